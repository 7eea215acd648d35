//! Config-driven experiment runner: generates or loads a reference table,
//! executes a pipeline suite and writes CSV reports plus a run manifest.
//!
//! Exit codes: 0 success (possibly with flagged rows), 1 config error,
//! 2 runtime failure.

use abcdr::evaluation::{
    collinearity_experiment, run_comparison, run_pipeline, PipelineSpec, ReductionKind,
};
use abcdr::models::ModelConfig;
use abcdr::sampler::{generate_table, SimulatorSpec};
use abcdr::table::ReferenceTable;
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "abcdr", version, about = "Likelihood-free inference experiment runner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute a run config and write its artifacts.
    Run {
        config: PathBuf,
        /// Overrides the config's output_dir.
        #[arg(long)]
        output_dir: Option<PathBuf>,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Worker-thread hint; results do not depend on it.
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Check a run config without simulating.
    Validate { config: PathBuf },
}

fn default_fraction() -> f64 {
    0.01
}

fn default_n_star() -> usize {
    100
}

/// The collinearity diagnostic is opt-in; lambda_grid defaults to the usual
/// three-point grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CollinearitySpec {
    n_pseudo: usize,
    #[serde(default = "default_lambda_grid")]
    lambda_grid: Vec<f64>,
}

fn default_lambda_grid() -> Vec<f64> {
    vec![1e-3, 1e-2, 1e-1]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunConfig {
    /// Inline model spec ({"model_id": "gaussian-toy", ...}); exclusive with
    /// table_path.
    #[serde(default)]
    model: Option<ModelConfig>,
    /// Reuse a previously written table instead of simulating.
    #[serde(default)]
    table_path: Option<PathBuf>,
    /// Reference-table size; required with a model.
    #[serde(default)]
    n_sims: Option<usize>,
    seed: u64,
    #[serde(default = "default_fraction")]
    acceptance_fraction: f64,
    #[serde(default = "default_n_star")]
    n_star: usize,
    pipelines: Vec<PipelineSpec>,
    #[serde(default)]
    output_dir: Option<PathBuf>,
    #[serde(default)]
    collinearity: Option<CollinearitySpec>,
}

/// Cross-field checks that need no table access beyond knowing (q, p).
fn config_diagnostics(cfg: &RunConfig, shape: Option<(usize, usize)>) -> Vec<String> {
    let mut out = Vec::new();
    match (&cfg.model, &cfg.table_path) {
        (Some(_), Some(_)) => out.push("model and table_path are mutually exclusive".into()),
        (None, None) => out.push("exactly one of model or table_path is required".into()),
        _ => {}
    }
    if cfg.model.is_some() && cfg.n_sims.is_none() {
        out.push("n_sims is required when simulating from a model".into());
    }
    if let Some(m) = &cfg.model {
        if let Err(e) = m.validate() {
            out.push(e.to_string());
        }
    }
    if !(cfg.acceptance_fraction > 0.0 && cfg.acceptance_fraction <= 1.0) {
        out.push(format!(
            "acceptance_fraction must lie in (0, 1], got {}",
            cfg.acceptance_fraction
        ));
    }
    if cfg.n_star == 0 {
        out.push("n_star must be >= 1".into());
    }
    if let Some(n) = cfg.n_sims {
        if cfg.n_star > n {
            out.push(format!("n_star ({}) exceeds n_sims ({n})", cfg.n_star));
        }
        if (cfg.acceptance_fraction * n as f64) < 2.0 {
            out.push("acceptance_fraction times n_sims must be at least 2".into());
        }
    }
    if cfg.pipelines.is_empty() {
        out.push("at least one pipeline is required".into());
    }
    if let Some(c) = &cfg.collinearity {
        if c.n_pseudo == 0 {
            out.push("collinearity.n_pseudo must be >= 1".into());
        }
        if c.lambda_grid.is_empty() || c.lambda_grid.iter().any(|&l| !(l > 0.0)) {
            out.push("collinearity.lambda_grid needs entries > 0".into());
        }
    }
    if let Some((q, p)) = shape {
        for (i, spec) in cfg.pipelines.iter().enumerate() {
            if let Err(e) = spec.validate(q, p) {
                out.push(format!("pipelines[{i}]: {e}"));
            }
        }
    }
    out
}

fn load_config(path: &Path) -> Result<RunConfig, String> {
    let text = fs::read_to_string(path)
        .map_err(|e| format!("cannot read {}: {e}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
}

/// (q, p) without running any simulation: from the model spec, or from the
/// table header on disk.
fn table_shape(cfg: &RunConfig) -> Result<Option<(usize, usize)>, String> {
    if let Some(m) = &cfg.model {
        return Ok(Some((m.q(), m.p())));
    }
    if let Some(path) = &cfg.table_path {
        let table = ReferenceTable::load_csv(path)
            .map_err(|e| format!("table_path {}: {e}", path.display()))?;
        return Ok(Some((table.q(), table.p())));
    }
    Ok(None)
}

fn validate_command(path: &Path) -> ExitCode {
    let cfg = match load_config(path) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("config error: {e}");
            return ExitCode::from(1);
        }
    };
    let shape = match table_shape(&cfg) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("config error: {e}");
            return ExitCode::from(1);
        }
    };
    let diags = config_diagnostics(&cfg, shape);
    if diags.is_empty() {
        println!("ok");
        ExitCode::SUCCESS
    } else {
        for d in &diags {
            eprintln!("config error: {d}");
        }
        ExitCode::from(1)
    }
}

#[derive(Serialize)]
struct ManifestRow {
    reduction: String,
    adjustment: String,
    n_eff: usize,
    flags: String,
}

#[derive(Serialize)]
struct RunManifest<'a> {
    version: &'a str,
    config: &'a RunConfig,
    n: usize,
    pseudo_rows: &'a [usize],
    rows: Vec<ManifestRow>,
}

fn run_command(
    path: &Path,
    output_dir: Option<PathBuf>,
    seed: Option<u64>,
    threads: Option<usize>,
) -> ExitCode {
    let mut cfg = match load_config(path) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("config error: {e}");
            return ExitCode::from(1);
        }
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(dir) = output_dir {
        cfg.output_dir = Some(dir);
    }
    let shape = match table_shape(&cfg) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("config error: {e}");
            return ExitCode::from(1);
        }
    };
    let diags = config_diagnostics(&cfg, shape);
    if !diags.is_empty() {
        for d in &diags {
            eprintln!("config error: {d}");
        }
        return ExitCode::from(1);
    }
    let out_dir = match &cfg.output_dir {
        Some(d) => d.clone(),
        None => {
            eprintln!("config error: output_dir is required (config field or --output-dir)");
            return ExitCode::from(1);
        }
    };
    if let Some(t) = threads {
        // ignore failure: the global pool can only be set once per process
        let _ = rayon::ThreadPoolBuilder::new().num_threads(t).build_global();
    }
    match execute(&cfg, &out_dir) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("run failed: {e}");
            ExitCode::from(2)
        }
    }
}

fn execute(cfg: &RunConfig, out_dir: &Path) -> abcdr::Result<()> {
    fs::create_dir_all(out_dir)?;
    let table = match (&cfg.model, &cfg.table_path) {
        (Some(model), None) => {
            let spec = SimulatorSpec::new(model.clone(), cfg.seed)?;
            let table = generate_table(&spec, cfg.n_sims.unwrap())?;
            table.save_csv(out_dir.join("table.csv"))?;
            table
        }
        (None, Some(path)) => ReferenceTable::load_csv(path)?,
        _ => unreachable!("checked by config_diagnostics"),
    };

    let report = run_comparison(
        &table,
        &cfg.pipelines,
        cfg.n_star,
        cfg.acceptance_fraction,
        cfg.seed,
    )?;
    report.write_csv(fs::File::create(out_dir.join("report.csv"))?)?;

    let trace_specs: Vec<(usize, &PipelineSpec)> = cfg
        .pipelines
        .iter()
        .enumerate()
        .filter(|(_, s)| {
            matches!(
                s.reduction,
                ReductionKind::Aic | ReductionKind::Aicc | ReductionKind::Bic | ReductionKind::Entropy
            )
        })
        .collect();
    if !trace_specs.is_empty() {
        let dir = out_dir.join("selection_traces");
        fs::create_dir_all(&dir)?;
        // one representative search per pipeline, at the first pseudo-observation
        let row = report.pseudo_rows[0];
        for (i, spec) in trace_specs {
            let run = run_pipeline(&table, row, spec, cfg.acceptance_fraction, cfg.seed)?;
            if let (Some(sel), Some(id)) = (&run.selection, &run.criterion_id) {
                let name = format!("{i}_{}.csv", spec.reduction.id());
                sel.write_csv(id, fs::File::create(dir.join(name))?)?;
            }
        }
    }

    if let Some(c) = &cfg.collinearity {
        let diag = collinearity_experiment(
            &table,
            c.n_pseudo,
            &c.lambda_grid,
            cfg.acceptance_fraction,
            cfg.seed,
        )?;
        diag.write_csv(fs::File::create(out_dir.join("condition.csv"))?)?;
    }

    let manifest = RunManifest {
        version: env!("CARGO_PKG_VERSION"),
        config: cfg,
        n: table.n(),
        pseudo_rows: &report.pseudo_rows,
        rows: report
            .rows
            .iter()
            .map(|r| ManifestRow {
                reduction: r.reduction.clone(),
                adjustment: r.adjustment.clone(),
                n_eff: r.n_eff,
                flags: r.flags.clone(),
            })
            .collect(),
    };
    fs::write(
        out_dir.join("run_manifest.json"),
        serde_json::to_string_pretty(&manifest).map_err(|e| {
            abcdr::AbcError::Config(format!("manifest serialisation failed: {e}"))
        })?,
    )?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run { config, output_dir, seed, threads } => {
            run_command(&config, output_dir, seed, threads)
        }
        Command::Validate { config } => validate_command(&config),
    }
}
