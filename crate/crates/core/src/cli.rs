//! Command-line front end.
//!
//! Subcommands: `fit`, `predict`, `simulate`, `prior` and `export`. Every run
//! that has an output location writes `config_used.json` next to its
//! outputs; it holds the resolved configuration (hyperparameters with
//! defaults filled in, paths, options) and is enough to repeat the run.
//!
//! Randomness comes only from `--seed` (or `seed` in the config), split into
//! named streams per factor, restart and replicate, so results do not depend
//! on the number of worker threads. `XFILE_THREADS` caps the thread count
//! (0 or unset = one per core).

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::error::{Result, XfileError};
use crate::io::{self, MapGrid, SavedModel};
use crate::model::{HyperParams, KernelScale, Transform};
use crate::optimizer;
use crate::rng::stream;
use crate::shrinkage::{self, ShrinkageParams};
use crate::simulation::{self, Grid, Report, ScenarioSpec};

#[derive(Debug, Parser)]
#[command(name = "xfile", version, about = "Stage-wise MAP matrix factorization with covariate-driven shrinkage priors")]
#[command(arg_required_else_help = true)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit a model and write it to a directory.
    Fit(FitArgs),
    /// Predict cells from a fitted model.
    Predict(PredictArgs),
    /// Run a simulation experiment and write a report.
    Simulate(SimulateArgs),
    /// Monte Carlo prior distribution of the rank.
    Prior(PriorArgs),
    /// Archetypes, loading signs, similarities and maps of a fitted model.
    Export(ExportArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformArg {
    Identity,
    Nonneg,
}

impl From<TransformArg> for Transform {
    fn from(t: TransformArg) -> Self {
        match t {
            TransformArg::Identity => Transform::Identity,
            TransformArg::Nonneg => Transform::NonNegTruncation,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelScaleArg {
    Theta,
    ThetaSquared,
}

impl From<KernelScaleArg> for KernelScale {
    fn from(k: KernelScaleArg) -> Self {
        match k {
            KernelScaleArg::Theta => KernelScale::Theta,
            KernelScaleArg::ThetaSquared => KernelScale::ThetaSquared,
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct FitArgs {
    /// Data matrix CSV; empty fields are missing.
    #[arg(long)]
    pub data: PathBuf,
    /// Row covariates CSV, without the intercept column.
    #[arg(long)]
    pub covariates: Option<PathBuf>,
    /// Column metacovariates CSV, without the intercept column.
    #[arg(long)]
    pub metacovariates: Option<PathBuf>,
    /// Hyperparameters as JSON; missing fields take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "identity")]
    pub transform: TransformArg,
    /// Overrides `seed` from the config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Input CSVs start with a header row.
    #[arg(long)]
    pub header: bool,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct PredictArgs {
    /// Model directory written by `fit`.
    #[arg(long)]
    pub model: PathBuf,
    /// CSV of the model's shape; cells with a nonzero entry are predicted.
    #[arg(long)]
    pub mask: PathBuf,
    #[arg(long)]
    pub header: bool,
    /// Output CSV (row, col, prediction); stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct SimulateArgs {
    /// Scenario JSON.
    #[arg(long)]
    pub scenario: PathBuf,
    /// Hyperparameters as JSON.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Grid JSON over alpha, b_sigma and b_eta, selected on a validation data set.
    #[arg(long)]
    pub grid: Option<PathBuf>,
    /// Report CSV.
    #[arg(long)]
    pub out: PathBuf,
    /// Leave the wall-time column empty so reports are reproducible byte for byte.
    #[arg(long)]
    pub no_timing: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct PriorArgs {
    #[arg(long)]
    pub alpha: f64,
    #[arg(long, default_value_t = 0.0)]
    pub delta: f64,
    #[arg(long, default_value_t = 100_000)]
    pub draws: usize,
    /// Number of sticks broken per draw; chosen from the tail decay when absent.
    #[arg(long)]
    pub trunc: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output CSV (k, probability); stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct ExportArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Rows of the map grid; each archetype is reshaped row-major.
    #[arg(long, requires = "grid_cols")]
    pub grid_rows: Option<usize>,
    #[arg(long, requires = "grid_rows")]
    pub grid_cols: Option<usize>,
    #[arg(long, value_enum, default_value = "theta")]
    pub kernel_scale: KernelScaleArg,
}

/// Everything a run used, echoed to `config_used.json`.
#[derive(Debug, Serialize)]
pub struct RunConfig<'a, A: Serialize> {
    pub command: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hyper: Option<&'a HyperParams>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scenario: Option<&'a ScenarioSpec>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grid: Option<&'a Grid>,
    pub args: &'a A,
}

fn require_exists(paths: &[Option<&Path>]) -> Result<()> {
    for p in paths.iter().flatten() {
        if !p.exists() {
            return Err(XfileError::io(
                *p,
                std::io::Error::new(std::io::ErrorKind::NotFound, "no such file or directory"),
            ));
        }
    }
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let s = fs::read_to_string(path).map_err(|e| XfileError::io(path, e))?;
    Ok(serde_json::from_str(&s)?)
}

fn load_hyper(path: Option<&Path>) -> Result<HyperParams> {
    let hp = match path {
        Some(p) => read_json(p)?,
        None => HyperParams::default(),
    };
    hp.validate()?;
    Ok(hp)
}

fn parent_dir(path: &Path) -> Result<PathBuf> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&dir).map_err(|e| XfileError::io(&dir, e))?;
    Ok(dir)
}

fn write_config<A: Serialize>(dir: &Path, cfg: &RunConfig<'_, A>) -> Result<()> {
    io::write_json(&dir.join("config_used.json"), cfg)
}

fn run_fit(args: &FitArgs) -> Result<()> {
    require_exists(&[
        Some(&args.data),
        args.covariates.as_deref(),
        args.metacovariates.as_deref(),
        args.config.as_deref(),
    ])?;
    let mut hp = load_hyper(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        hp.seed = seed;
    }
    let transform = Transform::from(args.transform);
    let data = io::load_matrix(&args.data, args.header, transform)?;
    let side = io::load_side_info(
        args.covariates.as_deref(),
        args.metacovariates.as_deref(),
        args.header,
        data.nrows(),
        data.ncols(),
    )?;
    let fit = optimizer::fit(&data, &side, &hp)?;
    log::info!("selected rank {}, log-posterior {}", fit.rank, fit.logpost);
    let model = SavedModel {
        fit,
        side,
        hyper: hp.clone(),
        transform,
    };
    io::save_model(&args.out_dir, &model)?;
    write_config(
        &args.out_dir,
        &RunConfig {
            command: "fit",
            hyper: Some(&hp),
            scenario: None,
            grid: None,
            args,
        },
    )?;
    println!("rank {}", model.fit.rank);
    Ok(())
}

fn run_predict(args: &PredictArgs) -> Result<()> {
    require_exists(&[Some(&args.model), Some(&args.mask)])?;
    let model = io::load_model(&args.model)?;
    let want = io::read_csv_matrix(&args.mask, args.header)?;
    let pred = model.fitted_observed();
    if want.values.dim() != pred.dim() {
        return Err(XfileError::Dimension(format!(
            "mask is {:?}, model is {:?}",
            want.values.dim(),
            pred.dim()
        )));
    }
    let mut s = String::from("row,col,prediction\n");
    for ((i, j), &v) in want.values.indexed_iter() {
        if want.mask[[i, j]] && v != 0.0 {
            s.push_str(&format!("{i},{j},{}\n", pred[[i, j]]));
        }
    }
    match &args.out {
        Some(out) => {
            let dir = parent_dir(out)?;
            io::write_file(out, s.as_bytes())?;
            write_config(
                &dir,
                &RunConfig {
                    command: "predict",
                    hyper: Some(&model.hyper),
                    scenario: None,
                    grid: None,
                    args,
                },
            )?;
        }
        None => print!("{s}"),
    }
    Ok(())
}

/// Report CSV: `# `-prefixed header lines, then one row per model and replicate.
pub fn report_csv(spec: &ScenarioSpec, hp: &HyperParams, report: &Report, timing: bool) -> Result<String> {
    let mut s = String::new();
    for line in simulation::report_header(spec) {
        s.push_str(&format!("# {line}\n"));
    }
    s.push_str(&format!("# hyper: {}\n", serde_json::to_string(hp)?));
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["replicate", "model", "rmse", "rank_selected", "wall_time_ms", "error"])?;
    let opt = |v: Option<String>| v.unwrap_or_default();
    for r in &report.rows {
        w.write_record([
            r.replicate.to_string(),
            r.model.clone(),
            opt(r.rmse.map(|v| v.to_string())),
            opt(r.rank_selected.map(|v| v.to_string())),
            if timing { opt(r.wall_time_ms.map(|v| v.to_string())) } else { String::new() },
            opt(r.error.clone()),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| XfileError::Domain(e.to_string()))?;
    s.push_str(&String::from_utf8_lossy(&bytes));
    Ok(s)
}

fn run_simulate(args: &SimulateArgs) -> Result<()> {
    require_exists(&[Some(&args.scenario), args.config.as_deref(), args.grid.as_deref()])?;
    let spec: ScenarioSpec = read_json(&args.scenario)?;
    spec.validate()?;
    let mut hp = load_hyper(args.config.as_deref())?;
    let grid: Option<Grid> = args.grid.as_deref().map(read_json).transpose()?;
    if let Some(g) = &grid {
        let (chosen, scores) = simulation::select_by_validation(&spec, &hp, g)?;
        for (p, s) in &scores {
            log::info!(
                "grid alpha {} b_sigma {} b_eta {}: validation rmse {:?}",
                p.shrink.alpha,
                p.b_sigma,
                p.b_eta,
                s
            );
        }
        hp = chosen;
    }
    let report = simulation::run_experiment(&spec, &hp)?;
    let dir = parent_dir(&args.out)?;
    io::write_file(&args.out, report_csv(&spec, &hp, &report, !args.no_timing)?.as_bytes())?;
    write_config(
        &dir,
        &RunConfig {
            command: "simulate",
            hyper: Some(&hp),
            scenario: Some(&spec),
            grid: grid.as_ref(),
            args,
        },
    )?;
    for s in &report.summary {
        println!(
            "{}: median rmse {} (IQR {}, {} ok)",
            s.model, s.median, s.iqr, s.n_ok
        );
    }
    Ok(())
}

fn run_prior(args: &PriorArgs) -> Result<()> {
    let params = ShrinkageParams::new(args.alpha, args.delta)?;
    let mut rng = stream(args.seed, "prior", &[]);
    let pmf = shrinkage::simulate_rank_pmf(&params, args.trunc, args.draws, &mut rng)?;
    let mut s = String::from("k,probability\n");
    for (k, pr) in pmf.pmf.iter().enumerate() {
        s.push_str(&format!("{k},{pr}\n"));
    }
    let summary = format!(
        "E[k] = {} (Monte Carlo, se {}); closed form {}",
        pmf.mean,
        pmf.std_error,
        shrinkage::expected_rank(&params)
    );
    match &args.out {
        Some(out) => {
            let dir = parent_dir(out)?;
            io::write_file(out, s.as_bytes())?;
            write_config(
                &dir,
                &RunConfig::<PriorArgs> {
                    command: "prior",
                    hyper: None,
                    scenario: None,
                    grid: None,
                    args,
                },
            )?;
            println!("{summary}");
        }
        None => {
            print!("{s}");
            eprintln!("{summary}");
        }
    }
    Ok(())
}

fn run_export(args: &ExportArgs) -> Result<()> {
    require_exists(&[Some(&args.model)])?;
    let model = io::load_model(&args.model)?;
    let grid = match (args.grid_rows, args.grid_cols) {
        (Some(rows), Some(cols)) => Some(MapGrid { rows, cols }),
        _ => None,
    };
    let files = io::export_analysis(
        &model.fit,
        &model.side,
        model.hyper.eps_frelu,
        args.kernel_scale.into(),
        grid,
        &args.out_dir,
    )?;
    write_config(
        &args.out_dir,
        &RunConfig {
            command: "export",
            hyper: Some(&model.hyper),
            scenario: None,
            grid: None,
            args,
        },
    )?;
    for f in files {
        println!("{}", f.display());
    }
    Ok(())
}

pub fn execute(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Fit(a) => run_fit(a),
        Command::Predict(a) => run_predict(a),
        Command::Simulate(a) => run_simulate(a),
        Command::Prior(a) => run_prior(a),
        Command::Export(a) => run_export(a),
    }
}

/// Size the global thread pool from `XFILE_THREADS`.
pub fn init_threads() {
    let n = match std::env::var("XFILE_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) => n,
            Err(_) => {
                log::warn!("ignoring XFILE_THREADS={v:?}");
                0
            }
        },
        Err(_) => 0,
    };
    if n > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("thread pool already initialized: {e}");
        }
    }
}

/// Parse `argv` and run; returns the process exit status (2 for usage errors).
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn usage_errors_exit_with_2() {
        assert_eq!(dispatch(["xfile"]), 2);
        assert_eq!(dispatch(["xfile", "frobnicate"]), 2);
        assert_eq!(dispatch(["xfile", "prior", "--alpha", "5", "--bogus"]), 2);
    }

    #[test]
    fn help_exits_cleanly() {
        assert_eq!(dispatch(["xfile", "fit", "--help"]), 0);
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
