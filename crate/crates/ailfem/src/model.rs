//! The concrete quasi-linear model: diffusion coefficient, potential,
//! manufactured exact solution on the L-shaped domain, and the monotonicity
//! constants.
//!
//! The model problem is `-div(mu(|grad u|^2) grad u) = g` with homogeneous
//! Dirichlet data. The default diffusion is `mu(t) = 1 + exp(-t)`, for which
//! `mu(t^2) t - mu(s^2) s` has slope between `m_mu = 1 - 2 exp(-3/2)` and
//! `M_mu = 2`; the operator is then strongly monotone with `nu = m_mu` and
//! Lipschitz continuous with `L_F = 3 M_mu`.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::quad::Point;

/// Scalar diffusion nonlinearity and its derived quantities.
#[derive(Clone, Copy, Debug)]
pub struct NonlinearModel {
    /// Diffusion coefficient `mu(t)` as a function of `t = |grad u|^2`.
    pub mu: fn(f64) -> f64,
    /// `mu'(t)`.
    pub mu_prime: fn(f64) -> f64,
    /// Potential integrand `psi(s) = (1/2) * integral_0^s mu(t) dt`.
    pub psi: fn(f64) -> f64,
    /// Lower monotonicity slope of `t -> mu(t^2) t`.
    pub m_mu: f64,
    /// Upper monotonicity slope of `t -> mu(t^2) t`.
    pub big_m_mu: f64,
}

impl NonlinearModel {
    /// `mu(t) = 1 + exp(-t)` with `m_mu = 1 - 2 exp(-3/2)`, `M_mu = 2` and
    /// the closed-form potential `psi(s) = (s + 1 - exp(-s)) / 2`.
    pub fn exponential() -> Self {
        NonlinearModel {
            mu: |t| 1.0 + (-t).exp(),
            mu_prime: |t| -(-t).exp(),
            psi: |s| 0.5 * (s + 1.0 - (-s).exp()),
            m_mu: 1.0 - 2.0 * (-1.5f64).exp(),
            big_m_mu: 2.0,
        }
    }

    /// Degenerate linear model `mu = 1` (plain Poisson problem). Useful as a
    /// cross-check fixture: the Kacanov iteration then solves in one step.
    pub fn linear() -> Self {
        NonlinearModel {
            mu: |_| 1.0,
            mu_prime: |_| 0.0,
            psi: |s| 0.5 * s,
            m_mu: 1.0,
            big_m_mu: 1.0,
        }
    }

    /// Strong monotonicity constant of the operator.
    pub fn nu(&self) -> f64 {
        self.m_mu
    }

    /// Lipschitz constant of the operator.
    pub fn lipschitz(&self) -> f64 {
        3.0 * self.big_m_mu
    }
}

/// A known exact solution with its gradient and matching load.
///
/// `gradient` and `load` must not be evaluated at `singular_point`; the
/// quadrature rules used by the crate only sample element interiors, so mesh
/// vertices (where the singularity sits) are never touched.
#[derive(Clone, Copy)]
pub struct ManufacturedSolution {
    pub value: fn(Point) -> f64,
    pub gradient: fn(Point) -> [f64; 2],
    pub load: fn(Point) -> f64,
    pub singular_point: Option<Point>,
}

impl std::fmt::Debug for ManufacturedSolution {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ManufacturedSolution")
            .field("singular_point", &self.singular_point)
            .finish()
    }
}

impl ManufacturedSolution {
    /// The corner-singularity solution on the L-shaped domain
    /// `(-1,1)^2 \ [0,1]x[-1,0]`:
    ///
    /// `u(r,phi) = r^(2/3) sin(2phi/3) (1 - r cos phi)(1 + r cos phi)
    ///             (1 - r sin phi)(1 + r sin phi) cos phi`
    ///
    /// with the polar angle measured counterclockwise from the positive
    /// x-axis in `[0, 3pi/2]`. The gradient is unbounded at the origin.
    pub fn lshape_default() -> Self {
        ManufacturedSolution {
            value: lshape_value,
            gradient: lshape_gradient,
            load: lshape_load,
            singular_point: Some([0.0, 0.0]),
        }
    }

    /// Smooth polynomial solution `u = x (1-x) y (1-y)` on the unit square
    /// for the linear model `mu = 1`, with `g = 2y(1-y) + 2x(1-x)`. Its
    /// Dirichlet integral is `1/45`, so the exact energy `E(u)` is `-1/90`.
    pub fn unit_square_poly() -> Self {
        ManufacturedSolution {
            value: |p| p[0] * (1.0 - p[0]) * p[1] * (1.0 - p[1]),
            gradient: |p| {
                [
                    (1.0 - 2.0 * p[0]) * p[1] * (1.0 - p[1]),
                    p[0] * (1.0 - p[0]) * (1.0 - 2.0 * p[1]),
                ]
            },
            load: |p| 2.0 * p[1] * (1.0 - p[1]) + 2.0 * p[0] * (1.0 - p[0]),
            singular_point: None,
        }
    }
}

/// Polar coordinates with the angle in `[0, 2pi)`, so that the L-shape
/// occupies `[0, 3pi/2]` with both slit edges included.
pub fn polar(p: Point) -> (f64, f64) {
    let r = p[0].hypot(p[1]);
    let mut phi = p[1].atan2(p[0]);
    if phi < 0.0 {
        phi += 2.0 * PI;
    }
    (r, phi)
}

fn lshape_value(p: Point) -> f64 {
    let (r, phi) = polar(p);
    if r == 0.0 {
        return 0.0;
    }
    let (c, s) = (phi.cos(), phi.sin());
    r.powf(2.0 / 3.0)
        * (2.0 * phi / 3.0).sin()
        * (1.0 - r * c)
        * (1.0 + r * c)
        * (1.0 - r * s)
        * (1.0 + r * s)
        * c
}

fn lshape_gradient(p: Point) -> [f64; 2] {
    let (r, phi) = polar(p);
    let (ux, uy) = grad_polar_parts(r, phi);
    [ux, uy]
}

fn lshape_load(p: Point) -> f64 {
    let (r, phi) = polar(p);
    let (gx, gy) = grad_polar_parts(r, phi);
    let (hxx, hxy, hyy) = hess_polar_parts(r, phi);
    let q = gx * gx + gy * gy;
    let model = NonlinearModel::exponential();
    // g = -div(mu(q) grad u) = -2 mu'(q) (H grad u, grad u) - mu(q) lap u
    let hgg = hxx * gx * gx + 2.0 * hxy * gx * gy + hyy * gy * gy;
    -2.0 * (model.mu_prime)(q) * hgg - (model.mu)(q) * (hxx + hyy)
}

/// Exact solution value; zero at the origin by continuity.
pub fn exact_value(p: Point) -> f64 {
    lshape_value(p)
}

/// Exact gradient; errors at the origin where it is unbounded.
pub fn exact_gradient(p: Point) -> Result<[f64; 2]> {
    if p[0] == 0.0 && p[1] == 0.0 {
        return Err(Error::input("gradient is singular at the origin"));
    }
    Ok(lshape_gradient(p))
}

/// Manufactured load `g = -div(mu(|grad u|^2) grad u)`; errors at the origin.
pub fn load_g(p: Point) -> Result<f64> {
    if p[0] == 0.0 && p[1] == 0.0 {
        return Err(Error::input("load is singular at the origin"));
    }
    Ok(lshape_load(p))
}

// ---------------------------------------------------------------------------
// Closed-form partials of the L-shape solution, derived symbolically from the
// polar product form and verified against high-precision finite differences.
// Inputs are polar; outputs are Cartesian derivatives.

#[rustfmt::skip]
#[allow(clippy::all)]
fn grad_polar_parts(r: f64, phi: f64) -> (f64, f64) {
    let x0 = r.powf((-1.0_f64) / 3.0);
    let x1 = (2.0_f64 / 3.0) * phi;
    let x2 = x1.sin();
    let x3 = ((4.0_f64 / 3.0) * phi).sin();
    let x4 = ((8.0_f64 / 3.0) * phi).sin();
    let x5 = r.powi(2);
    let x6 = (7.0_f64 / 4.0) * x3;
    let x7 = r.powi(4);
    let x8 = 4.0 * x2;
    let x9 = x4 * x7;
    let x10 = (1.0_f64 / 8.0) * x7;
    let x11 = 1.0 + (-1.0 * x1.cos());
    let x12 = 1.0 + (-1.0 * (2.0 * phi).cos());
    let x13 = x12.powi(2);
    let x14 = phi.cos();
    let x15 = ((1.0_f64 / 3.0) * phi).cos();
    let x16 = 4.0 * x15;
    let x17 = ((5.0_f64 / 3.0) * phi).cos();
    let x18 = 12.0 * x17;
    let x19 = ((7.0_f64 / 3.0) * phi).cos();
    let x20 = 23.0 * x15;
    let x21 = 19.0 * x17;
    let x22 = 3.0 * ((11.0_f64 / 3.0) * phi).cos();
    let x23 = x14.powi(2);
    let x24 = x23 * x5;
    let x25 = x23 * x7;
    (
        (1.0_f64 / 3.0) * x0 * ((((-21.0_f64) / 4.0) * x3) + (((-9.0_f64) / 4.0) * x9) + (((-1.0_f64) / 4.0) * x4) + ((21.0_f64 / 2.0) * x2) + (x10 * ((10.0_f64 / 3.0) * phi).sin()) + (x10 * ((14.0_f64 / 3.0) * phi).sin()) + (x5 * x6) + (x6 * x7) + (x7 * x8) + (x8 * x11.powi(3)) + (-12.0 * x2 * x11.powi(2)) + (((-11.0_f64) / 2.0) * x2 * x5) + (((-3.0_f64) / 4.0) * x4 * x5) + ((1.0_f64 / 8.0) * x13 * x9) + (x10 * x13 * x3) + (-1.0 * x10 * x2 * x12.powi(3)) + (((-7.0_f64) / 4.0) * x13 * x2 * x7)),
        (1.0_f64 / 24.0) * x0 * x14 * (x16 + x18 + (x19 * x5) + (x20 * x25) + (x21 * x5) + (x22 * x5) + (-1.0 * x16 * x24) + (-1.0 * x18 * x24) + (-1.0 * x19 * x25) + (-1.0 * x20 * x5) + (-1.0 * x21 * x25) + (-1.0 * x22 * x25)),
    )
}

#[rustfmt::skip]
#[allow(clippy::all)]
fn hess_polar_parts(r: f64, phi: f64) -> (f64, f64, f64) {
    let x0 = phi.sin();
    let x1 = (2.0_f64 / 3.0) * phi;
    let x2 = x1.cos();
    let x3 = (4.0_f64 / 3.0) * phi;
    let x4 = x3.cos();
    let x5 = (8.0_f64 / 3.0) * phi;
    let x6 = x5.cos();
    let x7 = r.powi(2);
    let x8 = r.powi(4);
    let x9 = (10.0_f64 / 3.0) * phi;
    let x10 = (14.0_f64 / 3.0) * phi;
    let x11 = ((1.0_f64 / 3.0) * phi).sin().powi(4);
    let x12 = x0.powi(4);
    let x13 = x2 * x8;
    let x14 = -1.0 + x2;
    let x15 = x1.sin();
    let x16 = x15.powi(2);
    let x17 = 2.0 * phi;
    let x18 = x17.sin();
    let x19 = x15 * x8;
    let x20 = x17.cos();
    let x21 = -1.0 + x20;
    let x22 = x3.sin();
    let x23 = x22 * x8;
    let x24 = 6.0 * x18 * x21;
    let x25 = x5.sin();
    let x26 = x25 * x8;
    let x27 = (-168.0 * x4) + (-16.0 * x6) + (168.0 * x2) + (-768.0 * x11 * x2) + (-144.0 * x6 * x8) + (-112.0 * x12 * x13) + (-88.0 * x2 * x7) + (-64.0 * x2 * x14.powi(3)) + (-48.0 * x6 * x7) + (-16.0 * x13 * x0.powi(6)) + (-2.0 * x23 * x24) + (-2.0 * x24 * x26) + (10.0 * x8 * x9.cos()) + (14.0 * x8 * x10.cos()) + (56.0 * x4 * x7) + (56.0 * x4 * x8) + (64.0 * x2 * x8) + (384.0 * x14 * x16) + (768.0 * x11 * x16) + (-72.0 * x12 * x18 * x19) + (16.0 * x12 * x4 * x8) + (32.0 * x12 * x6 * x8) + (168.0 * x15 * x18 * x21 * x8);
    let x28 = phi.cos();
    let x29 = x15 * x7;
    let x30 = x22 * x7;
    let x31 = x9.sin();
    let x32 = 11.0 * x8;
    let x33 = x10.sin();
    let x34 = -1.0 * x14;
    let x35 = x15 * x34.powi(2);
    let x36 = x15 * x34.powi(3);
    let x37 = x35 * x8;
    let x38 = x36 * x8;
    let x39 = -1.0 * x21;
    let x40 = x39.powi(2);
    let x41 = (-4752.0 * x37) + (-1826.0 * x23) + (-230.0 * x30) + (-116.0 * x15) + (-48.0 * x36) + (62.0 * x22) + (144.0 * x35) + (260.0 * x29) + (1584.0 * x38) + (3520.0 * x19) + (x31 * x32) + (x32 * x33) + (-720.0 * x35 * x7) + (-330.0 * x19 * x40) + (-88.0 * x38 * x40) + (121.0 * x23 * x40) + (240.0 * x36 * x7) + (264.0 * x37 * x40) + (-1.0 * x15 * x32 * x39.powi(3));
    let x42 = (1.0_f64 / 72.0) * r.powf((-4.0_f64) / 3.0);
    let x43 = x25 * x7;
    let x44 = (101.0_f64 / 2.0) * x19;
    let x45 = 8.0 * x23;
    let x46 = 24.0 * x26;
    let x47 = (5.0_f64 / 4.0) * x31 * x8;
    let x48 = (27.0_f64 / 4.0) * x33 * x8;
    (
        x42 * ((x28 * x41) + (-1.0 * x0 * x27)),
        x42 * ((x0 * x41) + (x27 * x28)),
        x28 * x42 * (x44 + x45 + x46 + x47 + x48 + (-95.0 * x29) + (-54.0 * x25) + (-21.0 * x43) + (-12.0 * x15) + (-11.0 * x30) + (-10.0 * x22) + (x20 * x44) + (x20 * x45) + (x20 * x46) + (x20 * x47) + (x20 * x48) + (5.0 * x20 * x30) + (6.0 * x20 * x29) + (27.0 * x20 * x43) + (((-27.0_f64) / 2.0) * x33 * x7) + (((-5.0_f64) / 2.0) * x31 * x7)),
    )
}
