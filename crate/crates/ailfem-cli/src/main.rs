//! Experiment front end: configure a run (or the three preset parameter
//! studies), execute the adaptive solver on the L-shaped benchmark problem,
//! and emit CSV telemetry, a summary, and SVG rate plots.

mod manifest;
mod output;
mod plot;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use ailfem::driver::{
    contraction_factor, f4_quotient, reference_energy, run_ailfem, AdaptiveConfig, RunHistory,
};
use ailfem::fem::SchemeSpec;
use ailfem::mesh::Mesh;
use ailfem::model::{ManufacturedSolution, NonlinearModel};
use anyhow::{bail, Context};
use clap::{Parser, ValueEnum};
use manifest::ExperimentManifest;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum SchemeName {
    Zarantonello,
    Kacanov,
    Newton,
}

impl SchemeName {
    fn as_str(self) -> &'static str {
        match self {
            SchemeName::Zarantonello => "zarantonello",
            SchemeName::Kacanov => "kacanov",
            SchemeName::Newton => "newton",
        }
    }

    fn parse(name: &str) -> Option<Self> {
        match name {
            "zarantonello" => Some(SchemeName::Zarantonello),
            "kacanov" => Some(SchemeName::Kacanov),
            "newton" => Some(SchemeName::Newton),
            _ => None,
        }
    }

    fn spec(self, delta_z: f64) -> SchemeSpec {
        match self {
            SchemeName::Zarantonello => SchemeSpec::zarantonello(delta_z),
            SchemeName::Kacanov => SchemeSpec::Kacanov,
            SchemeName::Newton => SchemeSpec::newton(),
        }
    }
}

/// The three preset parameter studies: (delta_z, lambda).
const PRESETS: [(f64, f64); 3] = [(0.1, 0.5), (0.3, 0.1), (0.3, 0.01)];

#[derive(Parser, Debug)]
#[command(
    name = "ailfem",
    version,
    about = "Adaptive iterative linearized FEM on the L-shaped benchmark",
    after_help = "Environment:\n  AILFEM_THREADS  cap the number of worker threads used by --compare"
)]
struct Cli {
    /// Linearization scheme.
    #[arg(long, value_enum, default_value = "kacanov")]
    scheme: SchemeName,

    /// Step size of the Zarantonello iteration (must lie in (0, 1/3)).
    #[arg(long, default_value_t = 0.3)]
    delta_z: f64,

    /// Dörfler marking fraction in (0, 1].
    #[arg(long, default_value_t = 0.5)]
    theta: f64,

    /// Inner-loop stopping parameter.
    #[arg(long, default_value_t = 0.1)]
    lambda: f64,

    /// Stop once a refinement would exceed this element count.
    #[arg(long, default_value_t = 200_000)]
    max_elements: usize,

    /// Output directory (created if missing).
    #[arg(long, default_value = "ailfem-out")]
    out: PathBuf,

    /// Use a preset parameter study (sets --delta-z and --lambda).
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=3))]
    preset: Option<u8>,

    /// Skip the SVG plots.
    #[arg(long)]
    no_plots: bool,

    /// Dump the final mesh in the plain-text mesh format.
    #[arg(long)]
    mesh_dump: bool,

    /// Run all three schemes with the same parameters and emit overlays.
    #[arg(long)]
    compare: bool,

    /// Print the preset parameter studies and exit.
    #[arg(long)]
    list_experiments: bool,

    /// Recorded in the manifest for provenance (the pipeline itself is
    /// deterministic and consumes no randomness).
    #[arg(long, default_value_t = 0)]
    seed: u64,

    /// Re-run the experiment described by a previously written manifest.
    #[arg(long)]
    manifest: Option<PathBuf>,
}

fn usage_error(message: &str) -> ExitCode {
    eprintln!("error: {message}");
    eprintln!("run with --help for usage");
    ExitCode::from(2)
}

fn main() -> ExitCode {
    let mut cli = Cli::parse();

    if cli.list_experiments {
        println!("preset parameter studies (theta = 0.5 throughout):");
        for (k, (delta_z, lambda)) in PRESETS.iter().enumerate() {
            println!("  ({}) delta_z = {delta_z}, lambda = {lambda}", k + 1);
        }
        return ExitCode::SUCCESS;
    }

    if let Some(path) = &cli.manifest {
        let text = match std::fs::read_to_string(path) {
            Ok(t) => t,
            Err(e) => return usage_error(&format!("cannot read manifest {}: {e}", path.display())),
        };
        let m = match ExperimentManifest::from_json(&text) {
            Ok(m) => m,
            Err(e) => return usage_error(&format!("invalid manifest: {e}")),
        };
        let Some(scheme) = SchemeName::parse(&m.scheme) else {
            return usage_error(&format!("manifest names unknown scheme '{}'", m.scheme));
        };
        cli.scheme = scheme;
        cli.delta_z = m.delta_z;
        cli.theta = m.theta;
        cli.lambda = m.lambda;
        cli.max_elements = m.max_elements;
        cli.seed = m.seed;
        cli.compare = m.compare;
    } else if let Some(preset) = cli.preset {
        let (delta_z, lambda) = PRESETS[preset as usize - 1];
        cli.delta_z = delta_z;
        cli.lambda = lambda;
    }

    // Parameter validation beyond clap's syntax checks is still a usage
    // error (exit code 2).
    let model = NonlinearModel::exponential();
    if !(cli.theta > 0.0 && cli.theta <= 1.0) {
        return usage_error(&format!("--theta {} outside (0, 1]", cli.theta));
    }
    #[allow(clippy::neg_cmp_op_on_partial_ord)] // also rejects NaN
    if !(cli.lambda > 0.0) {
        return usage_error(&format!("--lambda {} must be positive", cli.lambda));
    }
    if cli.max_elements < 192 {
        return usage_error(&format!(
            "--max-elements {} is below the initial mesh size 192",
            cli.max_elements
        ));
    }
    let schemes: Vec<SchemeName> = if cli.compare {
        vec![
            SchemeName::Zarantonello,
            SchemeName::Kacanov,
            SchemeName::Newton,
        ]
    } else {
        vec![cli.scheme]
    };
    for scheme in &schemes {
        if let Err(e) = scheme.spec(cli.delta_z).validate(&model) {
            return usage_error(&e.to_string());
        }
    }

    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn write_manifest(cli: &Cli, dir: &Path) -> anyhow::Result<()> {
    let manifest = ExperimentManifest {
        schema_version: 1,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        timestamp: chrono::Utc::now().to_rfc3339(),
        scheme: cli.scheme.as_str().to_string(),
        delta_z: cli.delta_z,
        theta: cli.theta,
        lambda: cli.lambda,
        max_elements: cli.max_elements,
        out_dir: cli.out.display().to_string(),
        seed: cli.seed,
        compare: cli.compare,
    };
    std::fs::write(dir.join("manifest.json"), manifest.to_json())
        .context("writing manifest.json")?;
    Ok(())
}

fn execute(cli: &Cli) -> anyhow::Result<()> {
    std::fs::create_dir_all(&cli.out)
        .with_context(|| format!("creating output directory {}", cli.out.display()))?;
    write_manifest(cli, &cli.out)?;

    if cli.compare {
        compare_schemes(cli)
    } else {
        let history = run_one(cli, cli.scheme, &cli.out)?;
        let s = output::stats(&history);
        println!(
            "{}: {} meshes, final elements {}, eta {:.4e}, error {:.4e}, slope {:.3}",
            cli.scheme.as_str(),
            history.n_meshes(),
            s.final_elements,
            s.final_eta,
            s.final_error,
            s.eta_slope_elements
        );
        Ok(())
    }
}

/// Execute one run and write its artifacts; on failure, write the partial
/// telemetry before propagating the error.
fn run_one(cli: &Cli, scheme: SchemeName, dir: &Path) -> anyhow::Result<RunHistory> {
    std::fs::create_dir_all(dir)?;
    let model = NonlinearModel::exponential();
    let solution = ManufacturedSolution::lshape_default();
    let config = AdaptiveConfig {
        theta: cli.theta,
        lambda: cli.lambda,
        scheme: scheme.spec(cli.delta_z),
        max_elements: cli.max_elements,
        ..AdaptiveConfig::default()
    };
    let history = match run_ailfem(&config, Mesh::initial_lshape(), &model, &solution) {
        Ok(h) => h,
        Err(e) => {
            std::fs::write(dir.join("history.csv"), output::history_csv(&e.partial))
                .context("writing partial history.csv")?;
            bail!("run failed ({}); partial telemetry written", e.source);
        }
    };

    std::fs::write(dir.join("history.csv"), output::history_csv(&history))
        .context("writing history.csv")?;
    std::fs::write(
        dir.join("summary.txt"),
        output::summary_text(scheme.as_str(), &history),
    )
    .context("writing summary.txt")?;

    if cli.mesh_dump {
        if let Some(mesh) = &history.final_mesh {
            std::fs::write(dir.join("mesh_final.txt"), mesh.to_text())
                .context("writing mesh_final.txt")?;
        }
    }

    if !cli.no_plots {
        write_plots(dir, scheme.as_str(), &history)?;
    }
    Ok(history)
}

type PointPair = (Vec<(f64, f64)>, Vec<(f64, f64)>);

fn rate_points(history: &RunHistory) -> PointPair {
    let finals = history.final_iterates();
    (
        finals
            .iter()
            .map(|r| (r.n_elements as f64, r.eta))
            .collect(),
        finals
            .iter()
            .map(|r| (r.n_elements as f64, r.error))
            .collect(),
    )
}

fn time_points(history: &RunHistory) -> PointPair {
    let mut cumulative = 0.0;
    let mut by_row: Vec<(usize, f64)> = Vec::new();
    for row in history.rows() {
        cumulative += row.dt_seconds;
        by_row.push((row.mesh_index, cumulative));
    }
    let finals = history.final_iterates();
    let mut eta = Vec::new();
    let mut err = Vec::new();
    for r in finals {
        // Cumulative time up to the last row of this mesh.
        let t = by_row
            .iter()
            .filter(|(m, _)| *m == r.mesh_index)
            .map(|(_, t)| *t)
            .next_back()
            .unwrap_or(0.0);
        eta.push((t, r.eta));
        err.push((t, r.error));
    }
    (eta, err)
}

fn write_plots(dir: &Path, scheme: &str, history: &RunHistory) -> anyhow::Result<()> {
    let (eta_pts, err_pts) = rate_points(history);
    let series = vec![
        plot::Series::new(format!("estimator ({scheme})"), eta_pts, 0),
        plot::Series::new(format!("H1 error ({scheme})"), err_pts, 1).dashed(),
    ];
    std::fs::write(
        dir.join("rate_elems.svg"),
        plot::log_log_chart(
            "Estimator and error vs elements",
            "#elements",
            "estimator / error",
            &series,
            Some(-0.5),
        ),
    )?;

    let (eta_t, err_t) = time_points(history);
    let series = vec![
        plot::Series::new(format!("estimator ({scheme})"), eta_t, 0),
        plot::Series::new(format!("H1 error ({scheme})"), err_t, 1).dashed(),
    ];
    std::fs::write(
        dir.join("rate_time.svg"),
        plot::log_log_chart(
            "Estimator and error vs compute time",
            "cumulative compute time (s)",
            "estimator / error",
            &series,
            Some(-0.5),
        ),
    )?;

    // Iterations per mesh.
    let iters: Vec<(f64, f64)> = (0..history.n_meshes())
        .map(|m| (m as f64, history.inner_count(m) as f64))
        .collect();
    std::fs::write(
        dir.join("iterations.svg"),
        plot::linear_chart(
            "Inner iterations per mesh",
            "mesh index",
            "iterations",
            &[plot::Series::new(scheme.to_string(), iters, 0)],
        ),
    )?;

    // Energy-drop quotient per mesh.
    let kappas: Vec<(f64, f64)> = (0..history.n_meshes())
        .filter_map(|m| {
            f4_quotient(history, m)
                .ok()
                .flatten()
                .map(|k| (m as f64, k))
        })
        .collect();
    std::fs::write(
        dir.join("kappa.svg"),
        plot::linear_chart(
            "Energy-drop quotient per mesh",
            "mesh index",
            "kappa",
            &[plot::Series::new(scheme.to_string(), kappas, 0)],
        ),
    )?;

    // Per-mesh energy contraction factor; needs the exact-energy reference,
    // which can legitimately fail its internal cross-check. Degrade to a
    // warning in that case.
    let model = NonlinearModel::exponential();
    let solution = ManufacturedSolution::lshape_default();
    let budget = 10_000;
    match reference_energy(&model, &solution, &Mesh::initial_lshape(), budget) {
        Ok(reference) => {
            let points: Vec<(f64, f64)> = (0..history.n_meshes())
                .filter_map(|m| {
                    contraction_factor(history, m, reference.value)
                        .ok()
                        .map(|k| (m as f64, k))
                })
                .collect();
            std::fs::write(
                dir.join("contraction.svg"),
                plot::linear_chart(
                    "Energy contraction factor per mesh",
                    "mesh index",
                    "contraction factor",
                    &[plot::Series::new(scheme.to_string(), points, 0)],
                ),
            )?;
        }
        Err(e) => eprintln!("warning: skipping contraction.svg: {e}"),
    }
    Ok(())
}

fn worker_threads() -> usize {
    std::env::var("AILFEM_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(3)
        .min(3)
}

fn compare_schemes(cli: &Cli) -> anyhow::Result<()> {
    let schemes = [
        SchemeName::Zarantonello,
        SchemeName::Kacanov,
        SchemeName::Newton,
    ];
    let threads = worker_threads();
    let mut results: Vec<(SchemeName, anyhow::Result<RunHistory>)> = Vec::new();

    for chunk in schemes.chunks(threads) {
        let mut chunk_results: Vec<Option<(SchemeName, anyhow::Result<RunHistory>)>> =
            (0..chunk.len()).map(|_| None).collect();
        std::thread::scope(|scope| {
            let handles: Vec<_> = chunk
                .iter()
                .map(|&scheme| {
                    scope.spawn(move || {
                        let dir = cli.out.join(scheme.as_str());
                        (scheme, run_one(cli, scheme, &dir))
                    })
                })
                .collect();
            for (slot, handle) in chunk_results.iter_mut().zip(handles) {
                *slot = Some(handle.join().expect("scheme worker"));
            }
        });
        results.extend(chunk_results.into_iter().flatten());
    }

    let mut failures = Vec::new();
    let mut histories: Vec<(&str, RunHistory)> = Vec::new();
    for (scheme, result) in results {
        match result {
            Ok(history) => histories.push((scheme.as_str(), history)),
            Err(e) => failures.push(format!("{}: {e:#}", scheme.as_str())),
        }
    }

    // Merged CSV and overlay plots over whatever completed.
    let refs: Vec<(&str, &RunHistory)> = histories.iter().map(|(n, h)| (*n, h)).collect();
    std::fs::write(cli.out.join("compare.csv"), output::merged_csv(&refs))
        .context("writing compare.csv")?;

    let mut summary = String::new();
    for (name, history) in &histories {
        summary.push_str(&output::summary_text(name, history));
        summary.push('\n');
    }
    std::fs::write(cli.out.join("summary.txt"), summary).context("writing summary.txt")?;

    if !cli.no_plots {
        let mut eta_series = Vec::new();
        let mut err_series = Vec::new();
        let mut eta_time = Vec::new();
        let mut err_time = Vec::new();
        for (k, (name, history)) in histories.iter().enumerate() {
            let (eta, err) = rate_points(history);
            eta_series.push(plot::Series::new(format!("eta ({name})"), eta, k));
            err_series.push(plot::Series::new(format!("error ({name})"), err, k).dashed());
            let (eta_t, err_t) = time_points(history);
            eta_time.push(plot::Series::new(format!("eta ({name})"), eta_t, k));
            err_time.push(plot::Series::new(format!("error ({name})"), err_t, k).dashed());
        }
        let mut all: Vec<plot::Series> = eta_series;
        all.extend(err_series);
        std::fs::write(
            cli.out.join("overlay_rate_elems.svg"),
            plot::log_log_chart(
                "Estimator and error vs elements",
                "#elements",
                "estimator / error",
                &all,
                Some(-0.5),
            ),
        )?;
        let mut all_t: Vec<plot::Series> = eta_time;
        all_t.extend(err_time);
        std::fs::write(
            cli.out.join("overlay_rate_time.svg"),
            plot::log_log_chart(
                "Estimator and error vs compute time",
                "cumulative compute time (s)",
                "estimator / error",
                &all_t,
                Some(-0.5),
            ),
        )?;
    }

    for (name, history) in &histories {
        let s = output::stats(history);
        println!(
            "{name}: final elements {}, eta {:.4e}, error {:.4e}, slope {:.3}, compute {:.1}s",
            s.final_elements, s.final_eta, s.final_error, s.eta_slope_elements, s.compute_seconds
        );
    }
    if !failures.is_empty() {
        bail!(
            "{} scheme(s) failed: {}",
            failures.len(),
            failures.join("; ")
        );
    }
    Ok(())
}
