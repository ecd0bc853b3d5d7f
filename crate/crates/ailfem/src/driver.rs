//! The adaptive loop: iterate one linearization scheme on the current mesh
//! until the linearization error estimate drops below `lambda` times the
//! residual estimator, then mark, refine, prolongate and continue. Every
//! visited iterate appends one telemetry row.

use std::sync::Arc;
use std::time::{Duration, Instant};

use crate::error::{Error, Result};
use crate::estimator::{local_indicators, total};
use crate::fem::{
    assemble_linearized, assemble_load, energy, h1_seminorm_error, prolongate, x_norm, x_norm_diff,
    DofMap, FeFunction, SchemeSpec,
};
use crate::marking::doerfler;
use crate::mesh::Mesh;
use crate::model::{ManufacturedSolution, NonlinearModel};
use crate::quad;
use crate::sparse::solve_spd_with_guess;

/// Parameters of one adaptive run.
#[derive(Clone, Copy, Debug)]
pub struct AdaptiveConfig {
    /// Dörfler marking fraction, in `(0, 1]`.
    pub theta: f64,
    /// Stopping parameter of the inner linearization loop.
    pub lambda: f64,
    pub scheme: SchemeSpec,
    /// Terminate once a refinement would exceed this element count.
    pub max_elements: usize,
    /// Safety cap for the inner loop.
    pub max_inner_iterations: usize,
    /// Relative tolerance of the inner linear solves.
    pub solver_rel_tol: f64,
}

impl Default for AdaptiveConfig {
    fn default() -> Self {
        AdaptiveConfig {
            theta: 0.5,
            lambda: 0.1,
            scheme: SchemeSpec::Kacanov,
            max_elements: 200_000,
            max_inner_iterations: 500,
            solver_rel_tol: 1e-12,
        }
    }
}

impl AdaptiveConfig {
    pub fn validate(&self, model: &NonlinearModel) -> Result<()> {
        if !(self.theta > 0.0 && self.theta <= 1.0) {
            return Err(Error::input(format!("theta {} outside (0, 1]", self.theta)));
        }
        if !(self.lambda > 0.0) {
            return Err(Error::input(format!(
                "lambda {} must be positive",
                self.lambda
            )));
        }
        if self.max_inner_iterations == 0 {
            return Err(Error::input("max_inner_iterations must be positive"));
        }
        if !(self.solver_rel_tol > 0.0) {
            return Err(Error::input("solver_rel_tol must be positive"));
        }
        self.scheme.validate(model)
    }
}

/// Coercivity/continuity constants of one scheme for one model, and the
/// guaranteed contraction factors derived from them.
#[derive(Clone, Copy, Debug)]
pub struct TheoryConstants {
    /// Strong monotonicity constant of the operator (`m_mu`).
    pub monotonicity: f64,
    /// Lipschitz constant of the operator (`3 M_mu`).
    pub lipschitz: f64,
    /// Coercivity constant of the preconditioning form.
    pub coercivity: f64,
    /// Continuity constant of the preconditioning form.
    pub continuity: f64,
    /// Guaranteed coefficient in `E(u^n) - E(u^{n+1}) >= c ||u^n - u^{n+1}||^2`.
    /// Non-positive means the scheme carries no a-priori guarantee.
    pub energy_drop_coeff: f64,
    /// Energy contraction factor `q` with
    /// `E(u^{n+1}) - E(u*) <= q^2 (E(u^n) - E(u*))`; `None` when
    /// `energy_drop_coeff <= 0`.
    pub q_ctr: Option<f64>,
    /// Largest `lambda / theta` for which the cost-optimality theory applies,
    /// evaluated with unit estimator-stability constant.
    pub lambda_opt_unit_stability: Option<f64>,
    /// Norm contraction factor of the Zarantonello step, when applicable;
    /// values `>= 1` mean norm contraction is not guaranteed.
    pub norm_contraction_factor: Option<f64>,
}

impl TheoryConstants {
    pub fn energy_contraction_guaranteed(&self) -> bool {
        self.energy_drop_coeff > 0.0
    }

    pub fn norm_contraction_guaranteed(&self) -> bool {
        self.norm_contraction_factor.is_some_and(|f| f < 1.0)
    }
}

/// Scan range used to bound model-dependent suprema/infima numerically.
fn grid_scan(f: impl Fn(f64) -> f64) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for k in 0..=4000 {
        let q = 20.0 * k as f64 / 4000.0;
        let v = f(q);
        lo = lo.min(v);
        hi = hi.max(v);
    }
    for q in [50.0, 100.0, 1000.0, 1e6] {
        let v = f(q);
        lo = lo.min(v);
        hi = hi.max(v);
    }
    (lo, hi)
}

/// Derive the scheme's coercivity/continuity constants and the guaranteed
/// contraction factors for the given model.
pub fn scheme_constants(scheme: &SchemeSpec, model: &NonlinearModel) -> Result<TheoryConstants> {
    scheme.validate(model)?;
    let nu = model.nu();
    let lf = model.lipschitz();
    let (coercivity, continuity, energy_drop_coeff, norm_factor) = match *scheme {
        SchemeSpec::Zarantonello { step } => {
            let a = 1.0 / step;
            (
                a,
                a,
                a - 0.5 * lf,
                Some(1.0 - step * (2.0 * nu - step * lf * lf)),
            )
        }
        SchemeSpec::Kacanov => {
            let (mu_min, mu_max) = grid_scan(model.mu);
            (mu_min, mu_max, 0.5 * mu_min, None)
        }
        SchemeSpec::Newton { damping, .. } => {
            // Elementwise spectral bounds of the tangent form: eigenvalues
            // are mu(q) and mu(q) + 2 q mu'(q).
            let (alpha_prime, _) =
                grid_scan(|q| (model.mu)(q).min((model.mu)(q) + 2.0 * q * (model.mu_prime)(q)));
            let (_, beta_prime) =
                grid_scan(|q| (model.mu)(q) + 2.0 * q * (model.mu_prime)(q).abs());
            (
                alpha_prime / damping,
                beta_prime / damping,
                alpha_prime / damping - 0.5 * lf,
                None,
            )
        }
    };
    let q_ctr = (energy_drop_coeff > 0.0)
        .then(|| (1.0 - 2.0 * energy_drop_coeff * nu * nu / (continuity * continuity * lf)).sqrt());
    let lambda_opt_unit_stability = q_ctr.map(|q| (1.0 - q) / q * (0.5 * nu).sqrt());
    Ok(TheoryConstants {
        monotonicity: nu,
        lipschitz: lf,
        coercivity,
        continuity,
        energy_drop_coeff,
        q_ctr,
        lambda_opt_unit_stability,
        norm_contraction_factor: norm_factor,
    })
}

/// Result of one linearization step.
#[derive(Debug)]
pub struct StepOutcome {
    pub u_next: FeFunction,
    pub energy_prev: f64,
    pub energy_next: f64,
    /// Damping factor actually accepted (Newton only).
    pub newton_damping: Option<f64>,
}

/// Perform a single linearization step: assemble the scheme's SPD system at
/// `u_n`, solve it warm-started from `u_n`, and (for Newton with correction
/// enabled) halve the damping until the energy decreases.
pub fn linearization_step(
    scheme: &SchemeSpec,
    u_n: &FeFunction,
    model: &NonlinearModel,
    load_vec: &[f64],
    solver_rel_tol: f64,
) -> Result<StepOutcome> {
    let energy_prev = energy(u_n, model, load_vec);
    match *scheme {
        SchemeSpec::Zarantonello { .. } | SchemeSpec::Kacanov => {
            let (a, b) = assemble_linearized(scheme, u_n, model, load_vec)?;
            let x = solve_spd_with_guess(&a, &b, u_n.coeffs(), solver_rel_tol)?;
            let u_next = FeFunction::from_coeffs(u_n.mesh(), u_n.dof_map(), x)?;
            let energy_next = energy(&u_next, model, load_vec);
            Ok(StepOutcome {
                u_next,
                energy_prev,
                energy_next,
                newton_damping: None,
            })
        }
        SchemeSpec::Newton {
            damping,
            correction,
        } => {
            let mut delta = damping;
            for _ in 0..=30 {
                let trial = SchemeSpec::Newton {
                    damping: delta,
                    correction,
                };
                let (a, b) = assemble_linearized(&trial, u_n, model, load_vec)?;
                let x = solve_spd_with_guess(&a, &b, u_n.coeffs(), solver_rel_tol)?;
                let u_next = FeFunction::from_coeffs(u_n.mesh(), u_n.dof_map(), x)?;
                let energy_next = energy(&u_next, model, load_vec);
                let drop = energy_prev - energy_next;
                let diff_sq = x_norm_diff(&u_next, u_n)?.powi(2);
                let slack = 64.0 * f64::EPSILON * energy_prev.abs().max(1.0);
                if !correction || drop >= 1e-12 * diff_sq - slack {
                    return Ok(StepOutcome {
                        u_next,
                        energy_prev,
                        energy_next,
                        newton_damping: Some(delta),
                    });
                }
                delta *= 0.5;
            }
            Err(Error::StepFailed(format!(
                "newton damping control underflowed (delta < {:.3e}) without an energy decrease",
                damping * 0.5f64.powi(31)
            )))
        }
    }
}

/// Iterate Kacanov to energy stagnation, then polish with a few damped
/// Newton steps. Used as the mesh-exact-solution oracle `u*_Y`.
pub fn solve_to_stagnation(
    mesh: &Arc<Mesh>,
    model: &NonlinearModel,
    load_vec: &[f64],
    solver_rel_tol: f64,
) -> Result<FeFunction> {
    let mut u = FeFunction::zero(mesh);
    if u.n_dofs() == 0 {
        return Ok(u);
    }
    let mut e_prev = energy(&u, model, load_vec);
    let mut stagnant = 0;
    for _ in 0..500 {
        let out = linearization_step(&SchemeSpec::Kacanov, &u, model, load_vec, solver_rel_tol)?;
        u = out.u_next;
        let drop = (e_prev - out.energy_next).abs();
        e_prev = out.energy_next;
        if drop <= 1e-15 * e_prev.abs().max(1.0) {
            stagnant += 1;
            if stagnant >= 2 {
                break;
            }
        } else {
            stagnant = 0;
        }
    }
    // Quadratic polish to push the iterate itself (not only the energy) to
    // solver accuracy. Below 1e-13 relative the conjugate gradient residual
    // stagnates in double precision on larger meshes.
    let polish_tol = (0.1 * solver_rel_tol).max(1e-13);
    for _ in 0..6 {
        let out = linearization_step(&SchemeSpec::newton(), &u, model, load_vec, polish_tol)?;
        let step = x_norm_diff(&out.u_next, &u)?;
        u = out.u_next;
        if step <= 1e-13 * x_norm(&u).max(1.0) {
            break;
        }
    }
    Ok(u)
}

/// One telemetry row: the iterate `(N, n)` together with its estimator,
/// energies, errors and timing.
#[derive(Clone, Debug)]
pub struct RunRow {
    pub mesh_index: usize,
    pub inner_index: usize,
    /// Total solver-step counter; mesh transitions repeat the previous value
    /// because prolongation performs no solve.
    pub total_step: usize,
    pub n_elements: usize,
    pub n_dofs: usize,
    pub eta: f64,
    pub energy: f64,
    /// `E(u^{n-1}) - E(u^n)`; `None` on the first row of a mesh.
    pub energy_drop: Option<f64>,
    /// True H1-seminorm error against the manufactured solution.
    pub error: f64,
    /// `error + eta`.
    pub quasi_error: f64,
    /// Energy drop divided by the squared step norm; `None` when undefined.
    pub kappa: Option<f64>,
    /// `||u^n - u^{n-1}||_X`; `None` on the first row of a mesh.
    pub step_norm: Option<f64>,
    /// Damping accepted by the Newton control, when applicable.
    pub newton_damping: Option<f64>,
    /// Compute time attributed to this row (assembly, solves, estimation,
    /// marking, refinement; telemetry excluded), in seconds.
    pub dt_seconds: f64,
    /// Cumulative sum of `n_elements` over all rows so far (cost proxy).
    pub cumulative_elements: u64,
}

/// How a run ended.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Termination {
    /// The next refinement would have exceeded `max_elements`.
    MaxElements,
    /// The estimator vanished: the iterate solves the problem exactly.
    EstimatorZero,
    /// The run was aborted; see the error carried alongside.
    Aborted,
}

/// Ordered telemetry of one adaptive run.
#[derive(Clone, Debug)]
pub struct RunHistory {
    pub config: AdaptiveConfig,
    pub constants: TheoryConstants,
    pub rows: Vec<RunRow>,
    pub termination: Termination,
    /// The last mesh the run iterated on.
    pub final_mesh: Option<Arc<Mesh>>,
}

impl RunHistory {
    pub fn rows(&self) -> &[RunRow] {
        &self.rows
    }

    pub fn final_row(&self) -> &RunRow {
        self.rows.last().expect("a run records at least one row")
    }

    pub fn n_meshes(&self) -> usize {
        self.rows.last().map_or(0, |r| r.mesh_index + 1)
    }

    /// Number of inner iterations performed on mesh `N`.
    pub fn inner_count(&self, mesh_index: usize) -> usize {
        self.rows
            .iter()
            .filter(|r| r.mesh_index == mesh_index)
            .map(|r| r.inner_index)
            .max()
            .unwrap_or(0)
    }

    pub fn mesh_rows(&self, mesh_index: usize) -> impl Iterator<Item = &RunRow> {
        self.rows.iter().filter(move |r| r.mesh_index == mesh_index)
    }

    /// The last iterate's row on each mesh, in mesh order.
    pub fn final_iterates(&self) -> Vec<&RunRow> {
        let mut out: Vec<&RunRow> = Vec::new();
        for row in &self.rows {
            match out.last() {
                Some(last) if last.mesh_index == row.mesh_index => *out.last_mut().unwrap() = row,
                _ => out.push(row),
            }
        }
        out
    }
}

/// A failed run together with everything recorded before the failure.
#[derive(Debug)]
pub struct RunError {
    pub source: Error,
    pub partial: RunHistory,
}

impl std::fmt::Display for RunError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "adaptive run aborted: {}", self.source)
    }
}

impl std::error::Error for RunError {}

struct Stopwatch {
    accumulated: Duration,
}

impl Stopwatch {
    fn new() -> Self {
        Stopwatch {
            accumulated: Duration::ZERO,
        }
    }

    fn measure<T>(&mut self, f: impl FnOnce() -> T) -> T {
        let t0 = Instant::now();
        let out = f();
        self.accumulated += t0.elapsed();
        out
    }

    fn seconds(&self) -> f64 {
        self.accumulated.as_secs_f64()
    }
}

/// Run the full adaptive iterative linearized FEM loop.
///
/// Starting from `u = 0` on the initial mesh, repeat: perform linearization
/// steps until `sqrt(max(E(u^{n-1}) - E(u^n), 0)) <= lambda * eta(u^n)`
/// (the first step always executes), then Dörfler-mark, refine, and carry
/// the iterate over by inclusion. Terminates when a refinement would exceed
/// `config.max_elements` or the estimator vanishes.
// The error variant deliberately carries the partial telemetry.
#[allow(clippy::result_large_err)]
pub fn run_ailfem(
    config: &AdaptiveConfig,
    initial_mesh: Mesh,
    model: &NonlinearModel,
    manufactured: &ManufacturedSolution,
) -> std::result::Result<RunHistory, RunError> {
    let constants = match config
        .validate(model)
        .and_then(|()| scheme_constants(&config.scheme, model))
    {
        Ok(c) => c,
        Err(e) => {
            return Err(RunError {
                source: e,
                partial: RunHistory {
                    config: *config,
                    constants: TheoryConstants {
                        monotonicity: model.nu(),
                        lipschitz: model.lipschitz(),
                        coercivity: f64::NAN,
                        continuity: f64::NAN,
                        energy_drop_coeff: f64::NAN,
                        q_ctr: None,
                        lambda_opt_unit_stability: None,
                        norm_contraction_factor: None,
                    },
                    rows: Vec::new(),
                    termination: Termination::Aborted,
                    final_mesh: None,
                },
            })
        }
    };
    let mut history = RunHistory {
        config: *config,
        constants,
        rows: Vec::new(),
        termination: Termination::Aborted,
        final_mesh: None,
    };
    if initial_mesh.n_elements() > config.max_elements {
        return Err(RunError {
            source: Error::input(format!(
                "max_elements {} is below the initial mesh size {}",
                config.max_elements,
                initial_mesh.n_elements()
            )),
            partial: history,
        });
    }

    let mut watch = Stopwatch::new();
    let mut mesh = Arc::new(initial_mesh);
    let mut u = FeFunction::zero(&mesh);
    let mut mesh_index = 0usize;
    let mut total_step = 0usize;
    let mut cumulative_elements = 0u64;
    let mut time_at_last_row = 0.0f64;

    macro_rules! abort {
        ($history:ident, $mesh:expr, $err:expr) => {{
            $history.termination = Termination::Aborted;
            $history.final_mesh = Some(Arc::clone($mesh));
            return Err(RunError {
                source: $err,
                partial: $history,
            });
        }};
    }

    loop {
        let dofs = Arc::clone(u.dof_map());
        let load_vec = watch.measure(|| assemble_load(&mesh, &dofs, manufactured.load));
        let mut e_prev = watch.measure(|| energy(&u, model, &load_vec));
        let field0 = watch.measure(|| local_indicators(&u, model, manufactured.load));
        let eta0 = total(&field0);

        let push_row = |history: &mut RunHistory,
                        watch: &Stopwatch,
                        u: &FeFunction,
                        inner_index: usize,
                        total_step: usize,
                        eta: f64,
                        energy_val: f64,
                        drop: Option<f64>,
                        step_norm: Option<f64>,
                        damping: Option<f64>,
                        cumulative_elements: &mut u64,
                        time_at_last_row: &mut f64| {
            let error = h1_seminorm_error(u, manufactured.gradient);
            *cumulative_elements += u.mesh().n_elements() as u64;
            let now = watch.seconds();
            let dt = now - *time_at_last_row;
            *time_at_last_row = now;
            let kappa = match (drop, step_norm) {
                (Some(d), Some(s)) if s > 0.0 => Some(d / (s * s)),
                _ => None,
            };
            history.rows.push(RunRow {
                mesh_index,
                inner_index,
                total_step,
                n_elements: u.mesh().n_elements(),
                n_dofs: u.n_dofs(),
                eta,
                energy: energy_val,
                energy_drop: drop,
                error,
                quasi_error: error + eta,
                kappa,
                step_norm,
                newton_damping: damping,
                dt_seconds: dt,
                cumulative_elements: *cumulative_elements,
            });
        };

        push_row(
            &mut history,
            &watch,
            &u,
            0,
            total_step,
            eta0,
            e_prev,
            None,
            None,
            None,
            &mut cumulative_elements,
            &mut time_at_last_row,
        );

        // Inner linearization loop; the stopping test needs two iterates, so
        // the first step always executes.
        let mut inner = 0usize;
        let mut prev_eta = eta0;
        let (last_field, last_eta) = loop {
            if inner >= config.max_inner_iterations {
                abort!(
                    history,
                    &mesh,
                    Error::StepFailed(format!(
                        "inner loop exceeded {} iterations on mesh {} (eta {:.3e})",
                        config.max_inner_iterations, mesh_index, prev_eta
                    ))
                );
            }
            let step = match watch.measure(|| {
                linearization_step(&config.scheme, &u, model, &load_vec, config.solver_rel_tol)
            }) {
                Ok(s) => s,
                Err(e) => abort!(history, &mesh, e),
            };
            let step_norm = watch
                .measure(|| x_norm_diff(&step.u_next, &u))
                .expect("same mesh");
            u = step.u_next;
            inner += 1;
            total_step += 1;
            let drop = step.energy_prev - step.energy_next;
            e_prev = step.energy_next;
            let field = watch.measure(|| local_indicators(&u, model, manufactured.load));
            let eta = total(&field);
            prev_eta = eta;
            push_row(
                &mut history,
                &watch,
                &u,
                inner,
                total_step,
                eta,
                e_prev,
                Some(drop),
                Some(step_norm),
                step.newton_damping,
                &mut cumulative_elements,
                &mut time_at_last_row,
            );
            if drop.max(0.0).sqrt() <= config.lambda * eta {
                break (field, eta);
            }
        };

        if last_eta == 0.0 {
            history.termination = Termination::EstimatorZero;
            history.final_mesh = Some(mesh);
            return Ok(history);
        }

        // Mark, refine, carry over.
        let marks = match watch.measure(|| doerfler(&last_field, config.theta)) {
            Ok(m) => m,
            Err(e) => abort!(history, &mesh, e),
        };
        let next_mesh = match watch.measure(|| mesh.refine(&marks)) {
            Ok(m) => Arc::new(m),
            Err(e) => abort!(history, &mesh, e),
        };
        if next_mesh.n_elements() > config.max_elements {
            history.termination = Termination::MaxElements;
            history.final_mesh = Some(mesh);
            return Ok(history);
        }
        u = match watch.measure(|| prolongate(&u, &next_mesh)) {
            Ok(v) => v,
            Err(e) => abort!(history, &mesh, e),
        };
        mesh = next_mesh;
        mesh_index += 1;
    }
}

/// Least-squares slope of `log10(y)` against `log10(x)`.
/// Points with non-positive coordinates are skipped.
pub fn fit_loglog_slope(points: &[(f64, f64)]) -> f64 {
    let logs: Vec<(f64, f64)> = points
        .iter()
        .filter(|(x, y)| *x > 0.0 && *y > 0.0)
        .map(|(x, y)| (x.log10(), y.log10()))
        .collect();
    let n = logs.len() as f64;
    let sx: f64 = logs.iter().map(|p| p.0).sum();
    let sy: f64 = logs.iter().map(|p| p.1).sum();
    let sxx: f64 = logs.iter().map(|p| p.0 * p.0).sum();
    let sxy: f64 = logs.iter().map(|p| p.0 * p.1).sum();
    (n * sxy - sx * sy) / (n * sxx - sx * sx)
}

/// Restrict to the last decade of the x-range: `x >= max(x) / 10`.
pub fn last_decade(points: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let x_max = points.iter().map(|p| p.0).fold(0.0f64, f64::max);
    points
        .iter()
        .copied()
        .filter(|p| p.0 >= x_max / 10.0)
        .collect()
}

/// Energy contraction factor of mesh `N`:
/// `(E(u_N^final) - E_ref) / (E(u_N^0) - E_ref)`.
pub fn contraction_factor(
    history: &RunHistory,
    mesh_index: usize,
    reference_energy: f64,
) -> Result<f64> {
    let first = history
        .mesh_rows(mesh_index)
        .next()
        .ok_or_else(|| Error::input(format!("run has no mesh {mesh_index}")))?;
    let last = history.mesh_rows(mesh_index).last().unwrap();
    for row in history.mesh_rows(mesh_index) {
        if row.energy <= reference_energy {
            return Err(Error::input(format!(
                "reference energy {reference_energy} is not below the recorded energy {} at ({}, {})",
                row.energy, row.mesh_index, row.inner_index
            )));
        }
    }
    Ok((last.energy - reference_energy) / (first.energy - reference_energy))
}

/// The energy-drop quotient `kappa_N` recorded at the final inner step of
/// mesh `N`; `None` when the iterates were identical (0/0).
pub fn f4_quotient(history: &RunHistory, mesh_index: usize) -> Result<Option<f64>> {
    let last = history
        .mesh_rows(mesh_index)
        .last()
        .ok_or_else(|| Error::input(format!("run has no mesh {mesh_index}")))?;
    if last.inner_index == 0 {
        return Err(Error::input(format!(
            "mesh {mesh_index} records no completed inner step"
        )));
    }
    Ok(last.kappa)
}

/// Estimate of the exact energy together with its cross-check.
#[derive(Clone, Copy, Debug)]
pub struct EnergyReference {
    /// Direct quadrature of the exact energy on a uniformly refined mesh
    /// (the value to use).
    pub value: f64,
    /// Richardson extrapolation of stagnated discrete energies along an
    /// adaptive hierarchy, assuming `E_N - E* ~ C / #T`.
    pub richardson: f64,
    pub discrepancy: f64,
}

/// Compute `E(u*)` two independent ways and cross-check them; fails if the
/// two estimates disagree by more than `1e-4 * |value|`.
pub fn reference_energy(
    model: &NonlinearModel,
    manufactured: &ManufacturedSolution,
    initial_mesh: &Mesh,
    budget_elements: usize,
) -> Result<EnergyReference> {
    if budget_elements < 10_000 {
        return Err(Error::input(format!(
            "budget_elements {budget_elements} below the minimum of 10000"
        )));
    }

    // (a) direct quadrature of psi(|grad u*|^2) - g u* on a uniform
    // refinement, graded towards the singular point if there is one.
    let mut quad_mesh = initial_mesh.clone();
    while quad_mesh.n_elements() < budget_elements {
        quad_mesh = quad_mesh.uniform_refine();
    }
    let integrand = |p: crate::quad::Point| {
        let g = (manufactured.gradient)(p);
        let q = g[0] * g[0] + g[1] * g[1];
        (model.psi)(q) - (manufactured.load)(p) * (manufactured.value)(p)
    };
    let terms: Vec<f64> = (0..quad_mesh.n_elements())
        .map(|e| {
            let [a, b, c] = quad_mesh.element_points(e);
            match manufactured.singular_point {
                Some(s) => quad::integrate_graded(a, b, c, s, &mut |p| integrand(p)),
                None => quad::integrate(a, b, c, &mut |p| integrand(p)),
            }
        })
        .collect();
    let value = quad::pairwise_sum(&terms);

    // (b) Richardson extrapolation of stagnated discrete energies. The
    // `E_N = E* + C / #T` law only holds asymptotically, so the fit is
    // restricted to the largest meshes and weighted by (#T)^2 to suppress
    // the curvature bias of the coarser samples.
    let mut mesh = Arc::new(initial_mesh.clone());
    let mut samples: Vec<(f64, f64)> = Vec::new(); // (1/#T, E_N)
    loop {
        if mesh.n_elements() * 16 >= budget_elements {
            let dofs = DofMap::build(&mesh);
            let load_vec = assemble_load(&mesh, &dofs, manufactured.load);
            let u_star = solve_to_stagnation(&mesh, model, &load_vec, 1e-12)?;
            let e_n = energy(&u_star, model, &load_vec);
            samples.push((1.0 / mesh.n_elements() as f64, e_n));
            if mesh.n_elements() >= budget_elements {
                break;
            }
            let field = local_indicators(&u_star, model, manufactured.load);
            let marks = doerfler(&field, 0.5)?;
            if marks.is_empty() {
                break;
            }
            mesh = Arc::new(mesh.refine(&marks)?);
        } else {
            // Below the sampling window a cheap iterate is enough to steer
            // the refinement.
            let dofs = DofMap::build(&mesh);
            let load_vec = assemble_load(&mesh, &dofs, manufactured.load);
            let mut u = FeFunction::zero(&mesh);
            for _ in 0..5 {
                u = linearization_step(&SchemeSpec::Kacanov, &u, model, &load_vec, 1e-10)?.u_next;
            }
            let field = local_indicators(&u, model, manufactured.load);
            let marks = doerfler(&field, 0.5)?;
            if marks.is_empty() {
                break;
            }
            mesh = Arc::new(mesh.refine(&marks)?);
        }
    }
    if samples.len() < 3 {
        return Err(Error::Diagnostic(format!(
            "too few energy samples ({}) for extrapolation",
            samples.len()
        )));
    }
    let half = samples.len() / 2;
    let tail = &samples[half.min(samples.len() - 3)..];
    // Weighted least squares for E_N = E* + C x, weights 1/x^2.
    let (mut sw, mut swx, mut swy, mut swxx, mut swxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for &(x, y) in tail {
        let w = 1.0 / (x * x);
        sw += w;
        swx += w * x;
        swy += w * y;
        swxx += w * x * x;
        swxy += w * x * y;
    }
    let det = sw * swxx - swx * swx;
    let richardson = (swy * swxx - swx * swxy) / det;

    let discrepancy = (value - richardson).abs();
    if discrepancy > 1e-4 * value.abs() {
        return Err(Error::Diagnostic(format!(
            "energy reference cross-check failed: quadrature {value:.12e} vs extrapolation {richardson:.12e}"
        )));
    }
    Ok(EnergyReference {
        value,
        richardson,
        discrepancy,
    })
}

#[cfg(test)]
#[allow(clippy::excessive_precision)]
mod tests {
    use super::*;
    use crate::estimator::subset_total;

    fn lshape_setup() -> (Arc<Mesh>, Vec<f64>, NonlinearModel, ManufacturedSolution) {
        let mesh = Arc::new(Mesh::initial_lshape());
        let model = NonlinearModel::exponential();
        let sol = ManufacturedSolution::lshape_default();
        let dofs = DofMap::build(&mesh);
        let load = assemble_load(&mesh, &dofs, sol.load);
        (mesh, load, model, sol)
    }

    #[test]
    fn zarantonello_constants_at_tenth_step() {
        let model = NonlinearModel::exponential();
        let c = scheme_constants(&SchemeSpec::zarantonello(0.1), &model).unwrap();
        assert!((c.coercivity - 10.0).abs() <= 1e-12);
        assert!((c.continuity - 10.0).abs() <= 1e-12);
        assert!((c.energy_drop_coeff - 7.0).abs() <= 1e-12);
        let q = c.q_ctr.unwrap();
        assert!((q - 0.99641625600591885).abs() <= 1e-12, "q = {q}");
        assert!((q * q - 0.99284535523285282).abs() <= 1e-12);
        // Norm contraction is not guaranteed at this step size although
        // energy contraction is.
        let f = c.norm_contraction_factor.unwrap();
        assert!((f - 1.2492520640593719).abs() <= 1e-12);
        assert!(!c.norm_contraction_guaranteed());
        assert!(c.energy_contraction_guaranteed());
    }

    #[test]
    fn kacanov_constants() {
        let model = NonlinearModel::exponential();
        let c = scheme_constants(&SchemeSpec::Kacanov, &model).unwrap();
        assert!((c.coercivity - 1.0).abs() <= 1e-9);
        assert!((c.continuity - 2.0).abs() <= 1e-12);
        assert!((c.energy_drop_coeff - 0.5).abs() <= 1e-9);
        let q = c.q_ctr.unwrap();
        assert!((q - 0.99359138916865333).abs() <= 1e-8, "q = {q}");
    }

    #[test]
    fn newton_at_unit_damping_has_no_guarantee() {
        let model = NonlinearModel::exponential();
        let c = scheme_constants(&SchemeSpec::newton(), &model).unwrap();
        assert!((c.coercivity - model.nu()).abs() <= 1e-9);
        assert!(c.energy_drop_coeff < 0.0);
        assert!(!c.energy_contraction_guaranteed());
        assert!(c.q_ctr.is_none());
        // The continuity bound is the elementwise spectral bound
        // sup_q [mu(q) + 2 q |mu'(q)|] = 1 + 2 exp(-1/2).
        assert!((c.continuity - 2.2130613194252668).abs() <= 1e-9);
    }

    #[test]
    fn invalid_scheme_is_rejected() {
        let model = NonlinearModel::exponential();
        assert!(scheme_constants(&SchemeSpec::zarantonello(0.4), &model).is_err());
    }

    #[test]
    fn all_schemes_preserve_the_discrete_minimizer() {
        let (mesh, load, model, _) = lshape_setup();
        let u_star = solve_to_stagnation(&mesh, &model, &load, 1e-13).unwrap();
        for scheme in [
            SchemeSpec::zarantonello(0.1),
            SchemeSpec::Kacanov,
            SchemeSpec::newton(),
        ] {
            let out = linearization_step(&scheme, &u_star, &model, &load, 1e-13).unwrap();
            let drift = x_norm_diff(&out.u_next, &u_star).unwrap();
            assert!(
                drift <= 1e-9 * x_norm(&u_star),
                "{}: fixed point drifted by {drift}",
                scheme.name()
            );
        }
    }

    #[test]
    fn kacanov_energy_decreases_monotonically() {
        let (mesh, load, model, _) = lshape_setup();
        let mut u = FeFunction::zero(&mesh);
        let mut prev = energy(&u, &model, &load);
        let mut strict_drops = 0;
        for _ in 0..30 {
            let out = linearization_step(&SchemeSpec::Kacanov, &u, &model, &load, 1e-12).unwrap();
            assert!(out.energy_next <= prev + 1e-12 * prev.abs().max(1.0));
            if out.energy_next < prev - 1e-13 * prev.abs().max(1.0) {
                strict_drops += 1;
            }
            prev = out.energy_next;
            u = out.u_next;
        }
        assert!(strict_drops >= 10, "only {strict_drops} strict drops");
    }

    #[test]
    fn zarantonello_energy_gap_contracts_within_the_guaranteed_factor() {
        let (mesh, load, model, _) = lshape_setup();
        let u_star = solve_to_stagnation(&mesh, &model, &load, 1e-13).unwrap();
        let e_star = energy(&u_star, &model, &load);
        let scheme = SchemeSpec::zarantonello(0.1);
        let q2 = scheme_constants(&scheme, &model)
            .unwrap()
            .q_ctr
            .unwrap()
            .powi(2);
        let mut u = FeFunction::zero(&mesh);
        let mut gap_prev = energy(&u, &model, &load) - e_star;
        for _ in 0..60 {
            let out = linearization_step(&scheme, &u, &model, &load, 1e-12).unwrap();
            u = out.u_next;
            let gap = out.energy_next - e_star;
            assert!(gap >= -1e-12 * e_star.abs().max(1.0));
            if gap_prev > 1e-10 * e_star.abs().max(1.0) {
                assert!(
                    gap <= q2 * gap_prev + 1e-10,
                    "ratio {} exceeds q^2 = {q2}",
                    gap / gap_prev
                );
            }
            gap_prev = gap;
        }
    }

    #[test]
    fn newton_damping_control_reports_accepted_delta() {
        let (mesh, load, model, _) = lshape_setup();
        let u = FeFunction::zero(&mesh);
        let out = linearization_step(&SchemeSpec::newton(), &u, &model, &load, 1e-12).unwrap();
        assert_eq!(out.newton_damping, Some(1.0));
        assert!(out.energy_next < out.energy_prev);
    }

    #[test]
    fn run_records_consistent_telemetry() {
        let (_, _, model, sol) = lshape_setup();
        let config = AdaptiveConfig {
            max_elements: 3000,
            ..AdaptiveConfig::default()
        };
        let history = run_ailfem(&config, Mesh::initial_lshape(), &model, &sol).unwrap();
        assert_eq!(history.termination, Termination::MaxElements);
        assert!(history.n_meshes() >= 4);

        let rows = history.rows();
        assert_eq!(rows[0].mesh_index, 0);
        assert_eq!(rows[0].inner_index, 0);
        assert_eq!(rows[0].total_step, 0);
        assert_eq!(rows[0].energy, 0.0); // E(0) = 0

        let mut prev: Option<&RunRow> = None;
        for row in rows {
            if let Some(p) = prev {
                // Step counter grows with solves, repeats across meshes.
                if row.mesh_index == p.mesh_index {
                    assert_eq!(row.total_step, p.total_step + 1);
                    assert_eq!(row.inner_index, p.inner_index + 1);
                    // Monotone energy within a mesh.
                    assert!(row.energy <= p.energy + 1e-12 * p.energy.abs().max(1.0));
                } else {
                    assert_eq!(row.mesh_index, p.mesh_index + 1);
                    assert_eq!(row.inner_index, 0);
                    assert_eq!(row.total_step, p.total_step);
                }
                assert!(row.cumulative_elements > p.cumulative_elements);
            }
            assert!(row.eta.is_finite() && row.eta >= 0.0);
            assert!(row.error.is_finite());
            assert!((row.quasi_error - (row.error + row.eta)).abs() <= 1e-15);
            assert!(row.dt_seconds >= 0.0);
            prev = Some(row);
        }

        // Stopping consistency: strict failure before the final inner step,
        // satisfaction at it.
        for mesh_index in 0..history.n_meshes() {
            let n_final = history.inner_count(mesh_index);
            for row in history.mesh_rows(mesh_index) {
                if row.inner_index == 0 {
                    continue;
                }
                let drop = row.energy_drop.unwrap();
                let lhs = drop.max(0.0).sqrt();
                if row.inner_index < n_final {
                    assert!(lhs > config.lambda * row.eta, "premature stop candidate");
                } else {
                    assert!(lhs <= config.lambda * row.eta, "final step fails the test");
                }
            }
        }
    }

    #[test]
    fn huge_lambda_gives_single_inner_iterations() {
        let (_, _, model, sol) = lshape_setup();
        let config = AdaptiveConfig {
            lambda: 1e6,
            max_elements: 2000,
            ..AdaptiveConfig::default()
        };
        let history = run_ailfem(&config, Mesh::initial_lshape(), &model, &sol).unwrap();
        for mesh_index in 0..history.n_meshes() {
            assert_eq!(history.inner_count(mesh_index), 1);
        }
    }

    #[test]
    fn linear_problem_converges_in_one_effective_step() {
        // With mu = 1 the Kacanov step solves the linear problem exactly;
        // any further step leaves the iterate unchanged at solver accuracy.
        let model = NonlinearModel::linear();
        let sol = ManufacturedSolution::unit_square_poly();
        let config = AdaptiveConfig {
            lambda: 0.5,
            max_elements: 2000,
            scheme: SchemeSpec::Kacanov,
            ..AdaptiveConfig::default()
        };
        let history = run_ailfem(&config, Mesh::unit_square(), &model, &sol).unwrap();
        for mesh_index in 1..history.n_meshes() {
            assert!(
                history.inner_count(mesh_index) <= 2,
                "mesh {mesh_index} took {} inner steps",
                history.inner_count(mesh_index)
            );
            // A second step, if taken, changes nothing.
            for row in history.mesh_rows(mesh_index) {
                if row.inner_index == 2 {
                    assert!(row.step_norm.unwrap() <= 1e-9);
                }
            }
        }
    }

    #[test]
    fn contraction_factor_arithmetic() {
        let (_, _, model, sol) = lshape_setup();
        let config = AdaptiveConfig {
            lambda: 0.01,
            max_elements: 1000,
            ..AdaptiveConfig::default()
        };
        let history = run_ailfem(&config, Mesh::initial_lshape(), &model, &sol).unwrap();
        // Use a reference far below: factor must land in [0, 1].
        let e_min = history
            .rows()
            .iter()
            .map(|r| r.energy)
            .fold(f64::INFINITY, f64::min);
        let reference = e_min - 0.1;
        for mesh_index in 0..history.n_meshes() {
            let k = contraction_factor(&history, mesh_index, reference).unwrap();
            assert!((0.0..=1.0 + 1e-12).contains(&k), "kappa_{mesh_index} = {k}");
        }
        // A reference above a recorded energy is rejected.
        assert!(contraction_factor(&history, 0, e_min + 1.0).is_err());
        assert!(contraction_factor(&history, 999, reference).is_err());
    }

    fn synthetic_history(rows: Vec<RunRow>) -> RunHistory {
        let model = NonlinearModel::exponential();
        RunHistory {
            config: AdaptiveConfig::default(),
            constants: scheme_constants(&SchemeSpec::Kacanov, &model).unwrap(),
            rows,
            termination: Termination::MaxElements,
            final_mesh: None,
        }
    }

    fn synthetic_row(
        mesh_index: usize,
        inner_index: usize,
        energy: f64,
        kappa: Option<f64>,
    ) -> RunRow {
        RunRow {
            mesh_index,
            inner_index,
            total_step: inner_index,
            n_elements: 192,
            n_dofs: 81,
            eta: 1.0,
            energy,
            energy_drop: None,
            error: 0.5,
            quasi_error: 1.5,
            kappa,
            step_norm: None,
            newton_damping: None,
            dt_seconds: 0.0,
            cumulative_elements: 192,
        }
    }

    #[test]
    fn contraction_factor_hand_arithmetic() {
        // E(u^0) = 1.0, E(u^final) = 0.1, reference 0.0 -> factor 0.1.
        let history = synthetic_history(vec![
            synthetic_row(0, 0, 1.0, None),
            synthetic_row(0, 1, 0.1, Some(2.0)),
        ]);
        let k = contraction_factor(&history, 0, 0.0).unwrap();
        assert!((k - 0.1).abs() <= 1e-15);

        // No energy change across the mesh -> factor exactly 1.
        let flat = synthetic_history(vec![
            synthetic_row(0, 0, 0.5, None),
            synthetic_row(0, 1, 0.5, None),
        ]);
        assert_eq!(contraction_factor(&flat, 0, 0.0).unwrap(), 1.0);
    }

    #[test]
    fn f4_quotient_flags_identical_iterates_as_undefined() {
        let history = synthetic_history(vec![
            synthetic_row(0, 0, 1.0, None),
            synthetic_row(0, 1, 1.0, None), // zero step: kappa undefined
        ]);
        assert_eq!(f4_quotient(&history, 0).unwrap(), None);
        assert!(f4_quotient(&history, 3).is_err());
    }

    #[test]
    fn f4_quotient_respects_guaranteed_bounds() {
        let (_, _, model, sol) = lshape_setup();
        for (scheme, bound) in [
            (SchemeSpec::zarantonello(0.1), 7.0),
            (SchemeSpec::Kacanov, 0.5),
        ] {
            let config = AdaptiveConfig {
                scheme,
                max_elements: 1500,
                ..AdaptiveConfig::default()
            };
            let history = run_ailfem(&config, Mesh::initial_lshape(), &model, &sol).unwrap();
            for mesh_index in 0..history.n_meshes() {
                if let Some(kappa) = f4_quotient(&history, mesh_index).unwrap() {
                    assert!(
                        kappa >= bound - 1e-8,
                        "{}: kappa_{mesh_index} = {kappa} below {bound}",
                        scheme.name()
                    );
                }
            }
        }
    }

    #[test]
    fn reference_energy_matches_the_closed_form_on_the_smooth_fixture() {
        let model = NonlinearModel::linear();
        let sol = ManufacturedSolution::unit_square_poly();
        let initial = Mesh::unit_square();
        let reference = reference_energy(&model, &sol, &initial, 10_000).unwrap();
        // E(u*) = -1/2 * int |grad u*|^2 = -1/90 for this fixture.
        let exact = -1.0 / 90.0;
        assert!(
            (reference.value - exact).abs() <= 1e-8,
            "quadrature {} vs exact {exact}",
            reference.value
        );
        assert!(reference.discrepancy <= 1e-4 * reference.value.abs());

        let doubled = reference_energy(&model, &sol, &initial, 20_000).unwrap();
        assert!((doubled.value - reference.value).abs() <= 1e-5 * reference.value.abs());
    }

    #[test]
    fn reference_energy_rejects_small_budgets() {
        let model = NonlinearModel::linear();
        let sol = ManufacturedSolution::unit_square_poly();
        assert!(matches!(
            reference_energy(&model, &sol, &Mesh::unit_square(), 100),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn discrete_energies_stay_above_the_reference() {
        let model = NonlinearModel::linear();
        let sol = ManufacturedSolution::unit_square_poly();
        let initial = Mesh::unit_square();
        let reference = reference_energy(&model, &sol, &initial, 10_000).unwrap();
        let config = AdaptiveConfig {
            scheme: SchemeSpec::Kacanov,
            max_elements: 3000,
            ..AdaptiveConfig::default()
        };
        let history = run_ailfem(&config, initial, &model, &sol).unwrap();
        for row in history.rows() {
            if row.inner_index > 0 {
                assert!(
                    row.energy > reference.value,
                    "{} vs {}",
                    row.energy,
                    reference.value
                );
            }
        }
    }

    #[test]
    fn quasi_error_decays_along_the_run() {
        let (_, _, model, sol) = lshape_setup();
        let config = AdaptiveConfig {
            max_elements: 4000,
            ..AdaptiveConfig::default()
        };
        let history = run_ailfem(&config, Mesh::initial_lshape(), &model, &sol).unwrap();
        let deltas: Vec<f64> = history.rows().iter().map(|r| r.quasi_error).collect();
        // Log-linear fit has negative slope.
        let pts: Vec<(f64, f64)> = deltas
            .iter()
            .enumerate()
            .map(|(k, d)| (k as f64, d.ln()))
            .collect();
        let n = pts.len() as f64;
        let sx: f64 = pts.iter().map(|p| p.0).sum();
        let sy: f64 = pts.iter().map(|p| p.1).sum();
        let sxx: f64 = pts.iter().map(|p| p.0 * p.0).sum();
        let sxy: f64 = pts.iter().map(|p| p.0 * p.1).sum();
        let slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
        assert!(slope < 0.0, "quasi-error slope {slope}");
        // Windowed decay: Delta_{k+10} < Delta_k for at least 90% of k.
        let w = 10;
        let mut ok = 0;
        let mut totalw = 0;
        for k in 0..deltas.len().saturating_sub(w) {
            totalw += 1;
            if deltas[k + w] < deltas[k] {
                ok += 1;
            }
        }
        assert!(
            totalw > 0 && ok * 10 >= totalw * 9,
            "{ok}/{totalw} windows decay"
        );
    }

    #[test]
    fn effectivity_index_stays_in_window() {
        let (_, _, model, sol) = lshape_setup();
        let config = AdaptiveConfig {
            max_elements: 4000,
            ..AdaptiveConfig::default()
        };
        let history = run_ailfem(&config, Mesh::initial_lshape(), &model, &sol).unwrap();
        let mut lo = f64::INFINITY;
        let mut hi = 0.0f64;
        for row in history.final_iterates() {
            let eff = row.error / row.eta;
            lo = lo.min(eff);
            hi = hi.max(eff);
            assert!((0.01..=10.0).contains(&eff), "effectivity {eff}");
        }
        eprintln!("effectivity range over run: [{lo:.4}, {hi:.4}]");
    }

    #[test]
    fn marked_sets_satisfy_doerfler_along_a_run() {
        // Re-derive marking from recorded iterates to double-check the
        // criterion holds with the run's theta.
        let (mesh, load, model, sol) = lshape_setup();
        let u_star = solve_to_stagnation(&mesh, &model, &load, 1e-12).unwrap();
        let field = local_indicators(&u_star, &model, sol.load);
        for theta in [0.3, 0.5, 0.9] {
            let marks = doerfler(&field, theta).unwrap();
            let sub = subset_total(&field, &marks).unwrap();
            assert!(theta * total(&field) <= sub * (1.0 + 1e-12));
        }
    }
}
