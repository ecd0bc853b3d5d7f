//! Telemetry files: the per-run CSV, the merged comparison CSV, and the
//! human-readable summary.

use ailfem::driver::{fit_loglog_slope, last_decade, RunHistory, RunRow};
use std::fmt::Write as _;

pub const CSV_HEADER: &str =
    "N,n,step,elems,dofs,eta,energy,energy_drop,error,quasi_error,kappa,dt_s,cum_elems";

/// Render a float with 17 significant digits (round-trip safe).
fn num(v: f64) -> String {
    if v.is_nan() {
        "nan".to_string()
    } else {
        format!("{v:.16e}")
    }
}

fn opt(v: Option<f64>) -> String {
    num(v.unwrap_or(f64::NAN))
}

fn row_fields(row: &RunRow) -> String {
    format!(
        "{},{},{},{},{},{},{},{},{},{},{},{},{}",
        row.mesh_index,
        row.inner_index,
        row.total_step,
        row.n_elements,
        row.n_dofs,
        num(row.eta),
        num(row.energy),
        opt(row.energy_drop),
        num(row.error),
        num(row.quasi_error),
        opt(row.kappa),
        num(row.dt_seconds),
        row.cumulative_elements,
    )
}

pub fn history_csv(history: &RunHistory) -> String {
    let mut out = String::with_capacity(64 * history.rows().len());
    out.push_str(CSV_HEADER);
    out.push('\n');
    for row in history.rows() {
        out.push_str(&row_fields(row));
        out.push('\n');
    }
    out
}

/// Merged CSV for scheme comparisons: a leading `scheme` column plus the
/// per-run schema.
pub fn merged_csv(histories: &[(&str, &RunHistory)]) -> String {
    let mut out = String::new();
    out.push_str("scheme,");
    out.push_str(CSV_HEADER);
    out.push('\n');
    for (name, history) in histories {
        for row in history.rows() {
            let _ = writeln!(out, "{name},{}", row_fields(row));
        }
    }
    out
}

pub struct RunStats {
    pub final_elements: usize,
    pub final_eta: f64,
    pub final_error: f64,
    pub eta_slope_elements: f64,
    pub error_slope_elements: f64,
    pub eta_slope_cost: f64,
    pub total_inner_iterations: usize,
    pub compute_seconds: f64,
}

pub fn stats(history: &RunHistory) -> RunStats {
    let finals = history.final_iterates();
    let eta_pts: Vec<(f64, f64)> = finals
        .iter()
        .map(|r| (r.n_elements as f64, r.eta))
        .collect();
    let err_pts: Vec<(f64, f64)> = finals
        .iter()
        .map(|r| (r.n_elements as f64, r.error))
        .collect();
    let cost_pts: Vec<(f64, f64)> = finals
        .iter()
        .map(|r| (r.cumulative_elements as f64, r.eta))
        .collect();
    let last = history.final_row();
    RunStats {
        final_elements: last.n_elements,
        final_eta: last.eta,
        final_error: last.error,
        eta_slope_elements: fit_loglog_slope(&last_decade(&eta_pts)),
        error_slope_elements: fit_loglog_slope(&last_decade(&err_pts)),
        eta_slope_cost: fit_loglog_slope(&last_decade(&cost_pts)),
        total_inner_iterations: (0..history.n_meshes())
            .map(|m| history.inner_count(m))
            .sum(),
        compute_seconds: history.rows().iter().map(|r| r.dt_seconds).sum(),
    }
}

pub fn summary_text(scheme: &str, history: &RunHistory) -> String {
    let s = stats(history);
    let c = &history.constants;
    let mut out = String::new();
    let _ = writeln!(out, "scheme:                    {scheme}");
    let _ = writeln!(out, "termination:               {:?}", history.termination);
    let _ = writeln!(out, "meshes:                    {}", history.n_meshes());
    let _ = writeln!(
        out,
        "total inner iterations:    {}",
        s.total_inner_iterations
    );
    let _ = writeln!(out, "final elements:            {}", s.final_elements);
    let _ = writeln!(out, "final estimator:           {:.6e}", s.final_eta);
    let _ = writeln!(out, "final H1 error:            {:.6e}", s.final_error);
    let _ = writeln!(
        out,
        "slope eta vs #elements:    {:.4}",
        s.eta_slope_elements
    );
    let _ = writeln!(
        out,
        "slope error vs #elements:  {:.4}",
        s.error_slope_elements
    );
    let _ = writeln!(out, "slope eta vs cum elements: {:.4}", s.eta_slope_cost);
    let _ = writeln!(out, "compute time (s):          {:.3}", s.compute_seconds);
    let _ = writeln!(out, "monotonicity nu:           {:.8}", c.monotonicity);
    let _ = writeln!(out, "lipschitz L_F:             {:.8}", c.lipschitz);
    let _ = writeln!(out, "energy drop coeff:         {:.8}", c.energy_drop_coeff);
    match c.q_ctr {
        Some(q) => {
            let _ = writeln!(out, "q_ctr:                     {q:.8}");
        }
        None => {
            let _ = writeln!(out, "q_ctr:                     not guaranteed");
        }
    }
    out
}
