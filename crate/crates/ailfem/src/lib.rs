//! Adaptive iterative linearized finite elements (AILFEM) for strongly
//! monotone quasi-linear elliptic problems in two dimensions.
//!
//! The crate provides the full solve–estimate–mark–refine pipeline:
//!
//! * [`mesh`] — conforming triangulations with newest vertex bisection,
//!   closure, overlay and a plain-text exchange format,
//! * [`sparse`] — compressed sparse row matrices and a preconditioned
//!   conjugate gradient solver for the SPD linearized systems,
//! * [`model`] — the quasi-linear diffusion model `-div(mu(|grad u|^2) grad u) = g`
//!   together with a manufactured solution on the L-shaped domain,
//! * [`fem`] — P1 finite element spaces, per-scheme linearized assembly,
//!   energies, norms and prolongation between nested meshes,
//! * [`estimator`] — the h-weighted residual error estimator,
//! * [`marking`] — Dörfler marking with minimal cardinality,
//! * [`driver`] — the outer adaptive loop wrapping an inner linearization
//!   loop, plus run telemetry and theoretical contraction constants.
//!
//! ```
//! use ailfem::driver::{run_ailfem, AdaptiveConfig};
//! use ailfem::fem::SchemeSpec;
//! use ailfem::mesh::Mesh;
//! use ailfem::model::{ManufacturedSolution, NonlinearModel};
//!
//! let config = AdaptiveConfig {
//!     theta: 0.5,
//!     lambda: 0.1,
//!     scheme: SchemeSpec::Kacanov,
//!     max_elements: 2_000,
//!     ..AdaptiveConfig::default()
//! };
//! let history = run_ailfem(
//!     &config,
//!     Mesh::initial_lshape(),
//!     &NonlinearModel::exponential(),
//!     &ManufacturedSolution::lshape_default(),
//! )
//! .unwrap();
//! assert!(history.final_row().eta < history.rows()[0].eta);
//! ```

// Guards written as `!(x > 0.0)` are deliberate: they reject NaN along
// with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod driver;
pub mod error;
pub mod estimator;
pub mod fem;
pub mod marking;
pub mod mesh;
pub mod model;
pub mod quad;
pub mod sparse;

pub use error::{Error, Result};

// The guide's code samples compile and run as doctests, so the book in
// `book/` cannot drift from the library.
#[cfg(doctest)]
mod book_snippets {
    macro_rules! chapter {
        ($name:ident, $path:literal) => {
            #[doc = include_str!($path)]
            pub struct $name;
        };
    }
    chapter!(Introduction, "../../../book/src/introduction.md");
    chapter!(Meshes, "../../../book/src/meshes.md");
    chapter!(Model, "../../../book/src/model.md");
    chapter!(Linearization, "../../../book/src/linearization.md");
    chapter!(Estimation, "../../../book/src/estimation.md");
    chapter!(AdaptiveLoop, "../../../book/src/adaptive-loop.md");
    chapter!(Cli, "../../../book/src/cli.md");
}
