//! `vnnet` subcommands: synth, ingest, train, eval, ablate, attribute.
//!
//! Exit status is 0 on success, 1 on runtime or input failures and 2 on
//! usage errors.

pub mod config;
pub mod manifest;

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use vnnet_core::ablation::{comparison_csv, run_ladder, write_comparison};
use vnnet_core::interpretation::{
    contribution_report, integrated_gradients, modal_delta, window_inputs, AttributionReport, BaselineInputs,
    IgOptions, ModelAttribution, OutputSelection,
};
use vnnet_core::training::{
    append_metrics, evaluate, evaluate_checkpoint, train, write_atomic, Checkpoint, MetricReport, StopReason,
};
use vnnet_ingest::dataset::{META_FILE, NPY_FILE};
use vnnet_ingest::{materialize_vision, synthesize_dataset, Dataset, Region, SplitName, TargetFactor};

use crate::config::{DatasetSource, Overrides, RunConfig};
use crate::manifest::{dataset_files, Recorder};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Input(String),
    #[error(transparent)]
    Core(#[from] vnnet_core::Error),
    #[error(transparent)]
    Data(#[from] vnnet_ingest::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn missing(flag: &str) -> CliError {
    CliError::Input(format!("missing required flag {flag}"))
}

#[derive(Debug, Parser)]
#[command(name = "vnnet", version, about = "Station forecasting with satellite and numerical fusion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a seeded synthetic dataset to --out.
    Synth,
    /// Convert a dataset's raw tiles to processed frames and check it loads.
    Ingest,
    /// Train a model and save its best checkpoint and metric log.
    Train,
    /// Score a checkpoint on one split.
    Eval,
    /// Train the five ablation configurations and write a comparison table.
    Ablate,
    /// Integrated-gradients factor contributions of a checkpoint.
    Attribute,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Synth => "synth",
            Command::Ingest => "ingest",
            Command::Train => "train",
            Command::Eval => "eval",
            Command::Ablate => "ablate",
            Command::Attribute => "attribute",
        }
    }
}

#[derive(Debug, Args)]
struct Common {
    /// TOML run configuration; flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// NE, SW, SE or synthetic.
    #[arg(long, global = true, value_parser = parse_region)]
    region: Option<Region>,
    /// temperature, relative_humidity or visibility.
    #[arg(long, global = true, value_parser = parse_factor)]
    factor: Option<TargetFactor>,
    /// Dataset directory or `synthetic-micro`; defaults to $VNNET_DATA_ROOT/<region>.
    #[arg(long, global = true)]
    dataset: Option<String>,
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// Run directory; defaults to runs/<subcommand>.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// train, validation or test.
    #[arg(long, global = true, value_parser = parse_split)]
    split: Option<SplitName>,
}

fn parse_region(s: &str) -> Result<Region, String> {
    s.parse().map_err(|e: vnnet_ingest::Error| e.to_string())
}

fn parse_factor(s: &str) -> Result<TargetFactor, String> {
    s.parse().map_err(|e: vnnet_ingest::Error| e.to_string())
}

fn parse_split(s: &str) -> Result<SplitName, String> {
    s.parse().map_err(|e: vnnet_ingest::Error| e.to_string())
}

/// Parses `argv` (program name first), runs the subcommand and returns the
/// exit status.
pub fn run<I, T>(argv: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let words = argv.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    match dispatch(cli, words) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn dispatch(cli: Cli, argv: Vec<String>) -> Result<(), CliError> {
    let c = cli.common;
    let flags = Overrides {
        seed: c.seed,
        region: c.region,
        factor: c.factor,
        dataset: c.dataset,
        checkpoint: c.checkpoint,
        out: c.out,
        split: c.split,
    };
    let mut cfg = RunConfig::load(c.config.as_deref(), &flags)?;
    let name = cli.command.name();
    let mut rec = Recorder::new(name, argv);
    if let Some(p) = &c.config {
        rec.input([p.clone()]);
    }
    // checked before anything touches the disk
    if matches!(cli.command, Command::Eval | Command::Attribute) && cfg.checkpoint.is_none() {
        return Err(missing("--checkpoint"));
    }
    let out = cfg.out.clone().unwrap_or_else(|| PathBuf::from("runs").join(name));
    fs::create_dir_all(&out)?;
    cfg.out = Some(out.clone());
    match cli.command {
        Command::Synth => synth(&cfg, &out, &mut rec)?,
        Command::Ingest => ingest(&mut cfg, &out, &mut rec)?,
        Command::Train => train_cmd(&mut cfg, &out, &mut rec)?,
        Command::Eval => eval_cmd(&mut cfg, &out, &mut rec)?,
        Command::Ablate => ablate(&mut cfg, &out, &mut rec)?,
        Command::Attribute => attribute(&mut cfg, &out, &mut rec)?,
    }
    absolutize(&mut cfg);
    rec.finish(&out, &cfg)?;
    Ok(())
}

/// Input paths in the saved config are made absolute so the rerun does not
/// depend on the working directory.
fn absolutize(cfg: &mut RunConfig) {
    let abs = |p: &Path| fs::canonicalize(p).unwrap_or_else(|_| p.to_path_buf());
    if let Some(d) = cfg.dataset.as_mut() {
        if d != config::SYNTHETIC_MICRO {
            *d = abs(Path::new(d)).display().to_string();
        }
    }
    for p in [&mut cfg.checkpoint, &mut cfg.attribute.uni_checkpoint].into_iter().flatten() {
        *p = abs(p);
    }
}

fn synth(cfg: &RunConfig, out: &Path, rec: &mut Recorder) -> Result<(), CliError> {
    let sc = cfg.synth_config();
    let meta = synthesize_dataset(&sc, out)?;
    rec.lap("synthesize");
    rec.output(out.to_path_buf());
    println!(
        "synthetic dataset: {} stations, {} hours, {} channels, {}x{}x{} frames -> {}",
        meta.stations.len(),
        meta.hours,
        meta.columns.len(),
        meta.height,
        meta.width,
        meta.bands.len(),
        out.display()
    );
    Ok(())
}

fn dataset_root(cfg: &RunConfig, out: &Path) -> Result<PathBuf, CliError> {
    match cfg.dataset_source()? {
        DatasetSource::SyntheticMicro => {
            let dir = out.join("dataset");
            synthesize_dataset(&cfg.synth_config(), &dir)?;
            Ok(dir)
        }
        DatasetSource::Dir(p) => {
            if !p.join(META_FILE).is_file() {
                return Err(CliError::Input(format!("{} is not a dataset directory (no {META_FILE})", p.display())));
            }
            Ok(p)
        }
    }
}

fn open_dataset(cfg: &mut RunConfig, out: &Path, rec: &mut Recorder) -> Result<Dataset, CliError> {
    let root = dataset_root(cfg, out)?;
    let ds = Dataset::open(&root, None)?;
    if let Some(r) = cfg.region {
        if r != ds.meta.region {
            return Err(CliError::Input(format!(
                "dataset {} covers region {}, not {r}",
                root.display(),
                ds.meta.region
            )));
        }
    }
    cfg.settle_split(ds.meta.region);
    rec.input(dataset_files(&root));
    rec.lap("load");
    Ok(ds)
}

fn ingest(cfg: &mut RunConfig, out: &Path, rec: &mut Recorder) -> Result<(), CliError> {
    let root = dataset_root(cfg, out)?;
    let frames = materialize_vision(&root)?;
    rec.lap("frames");
    let ds = Dataset::open(&root, None)?;
    if !root.join(NPY_FILE).exists() {
        ds.series.write_npy(&root.join(NPY_FILE))?;
    }
    rec.lap("validate");
    rec.input(dataset_files(&root));
    rec.output(root.clone());
    println!(
        "{}: {} stations x {} hours x {} columns, {frames} of {} frames present",
        root.display(),
        ds.meta.stations.len(),
        ds.meta.hours,
        ds.meta.columns.len(),
        ds.meta.hours
    );
    Ok(())
}

#[derive(Serialize)]
struct Evaluation {
    stop: StopReason,
    epochs_run: usize,
    best_epoch: usize,
    validation: MetricReport,
    test: Option<MetricReport>,
}

fn train_cmd(cfg: &mut RunConfig, out: &Path, rec: &mut Recorder) -> Result<(), CliError> {
    let ds = open_dataset(cfg, out, rec)?;
    let data = cfg.train.prepare(ds)?;
    let outcome = train(&cfg.train, &data)?;
    rec.lap("train");
    let ck_path = out.join("checkpoint.json");
    outcome.checkpoint.save(&ck_path)?;
    let log = out.join("metrics.csv");
    if log.exists() {
        fs::remove_file(&log)?;
    }
    append_metrics(&log, &outcome.history)?;
    let model = outcome.checkpoint.model()?;
    let validation = evaluate(&model, &data, SplitName::Validation, cfg.train.batch)?;
    let test = if data.starts(SplitName::Test).is_empty() {
        None
    } else {
        Some(evaluate(&model, &data, SplitName::Test, cfg.train.batch)?)
    };
    rec.lap("evaluate");
    let eval = Evaluation {
        stop: outcome.stop,
        epochs_run: outcome.epochs_run,
        best_epoch: outcome.checkpoint.epoch,
        validation,
        test,
    };
    let eval_path = out.join("evaluation.json");
    write_json(&eval_path, &eval)?;
    for p in [ck_path, log, eval_path] {
        rec.output(p);
    }
    println!(
        "trained {} epochs ({:?}), best epoch {}: validation MAE {:.4}, RMSE {:.4}",
        eval.epochs_run, eval.stop, eval.best_epoch, eval.validation.mae, eval.validation.rmse
    );
    if let Some(t) = &eval.test {
        println!("test MAE {:.4}, RMSE {:.4}", t.mae, t.rmse);
    }
    Ok(())
}

fn load_checkpoint(path: &Path, rec: &mut Recorder) -> Result<Checkpoint, CliError> {
    if !path.is_file() {
        return Err(CliError::Input(format!("checkpoint {} does not exist", path.display())));
    }
    rec.input([path.to_path_buf()]);
    Ok(Checkpoint::load(path)?)
}

fn eval_cmd(cfg: &mut RunConfig, out: &Path, rec: &mut Recorder) -> Result<(), CliError> {
    let ck_path = cfg.checkpoint.clone().ok_or_else(|| missing("--checkpoint"))?;
    let ck = load_checkpoint(&ck_path, rec)?;
    let ds = open_dataset(cfg, out, rec)?;
    let report = evaluate_checkpoint(&ck, ds, cfg.split)?;
    rec.lap("evaluate");
    let path = out.join("evaluation.json");
    write_json(&path, &report)?;
    rec.output(path);
    println!("{} {}: MAE {:.4}, RMSE {:.4} over {} values", cfg.split, report.factor, report.mae, report.rmse, report.count);
    Ok(())
}

fn ablate(cfg: &mut RunConfig, out: &Path, rec: &mut Recorder) -> Result<(), CliError> {
    let ds = open_dataset(cfg, out, rec)?;
    let results = run_ladder(&cfg.train, &ds)?;
    rec.lap("ladder");
    let path = out.join("comparison.csv");
    write_comparison(&path, &results)?;
    rec.output(path);
    print!("{}", comparison_csv(&results)?);
    Ok(())
}

#[derive(Serialize)]
struct ModalDelta {
    top5_mfc: f64,
    sic: f64,
}

#[derive(Serialize)]
struct AttributionOutput {
    split: SplitName,
    windows: Vec<usize>,
    m_steps: usize,
    mean_completeness_residual: f64,
    max_completeness_residual: f64,
    report: AttributionReport,
    modal_delta: Option<ModalDelta>,
}

/// Mean integrated gradients over evenly spaced windows of `split`.
fn attribution_of(
    ck: &Checkpoint,
    ds: Dataset,
    cfg: &RunConfig,
) -> Result<(AttributionReport, Vec<usize>, Vec<f64>), CliError> {
    let data = ck.train.prepare(ds)?;
    ck.check_compatible(&data)?;
    let model = ck.model()?;
    let all = data.starts(cfg.split);
    if all.is_empty() {
        return Err(CliError::Input(format!("{} split has no complete windows", cfg.split)));
    }
    let count = cfg.attribute.windows.clamp(1, all.len());
    let starts: Vec<usize> = (0..count).map(|k| all[k * all.len() / count]).collect();
    let baselines = BaselineInputs::from_training(&data)?;
    let opts = IgOptions {
        m_steps: cfg.attribute.m_steps,
        selection: OutputSelection::All,
        norm: cfg.attribute.norm,
    };
    let mut sum = None;
    let mut residuals = Vec::with_capacity(count);
    for &start in &starts {
        let (x, i, stamps) = window_inputs(&data, start)?;
        let f = ModelAttribution { model: &model, stamps };
        let ig = integrated_gradients(&f, &x, i.as_ref(), &baselines, opts)?;
        residuals.push(ig.completeness_residual());
        sum = Some(match sum {
            None => ig.per_step,
            Some(s) => s + &ig.per_step,
        });
    }
    let mean = sum.expect("at least one window") / count as f64;
    let columns = &data.numerical.series.columns;
    let statics: Vec<usize> = (data.numerical.series.num_factors()..columns.len()).collect();
    Ok((contribution_report(&mean, columns, &statics)?, starts, residuals))
}

fn attribute(cfg: &mut RunConfig, out: &Path, rec: &mut Recorder) -> Result<(), CliError> {
    let ck_path = cfg.checkpoint.clone().ok_or_else(|| missing("--checkpoint"))?;
    let ck = load_checkpoint(&ck_path, rec)?;
    let uni = match cfg.attribute.uni_checkpoint.clone() {
        Some(p) => Some(load_checkpoint(&p, rec)?),
        None => None,
    };
    let ds = open_dataset(cfg, out, rec)?;
    let (report, windows, residuals) = attribution_of(&ck, ds.clone(), cfg)?;
    let modal = match uni {
        Some(u) => {
            let (base, _, _) = attribution_of(&u, ds, cfg)?;
            let (top5_mfc, sic) = modal_delta(&base, &report)?;
            Some(ModalDelta { top5_mfc, sic })
        }
        None => None,
    };
    rec.lap("attribute");
    let csv_path = out.join("attribution.csv");
    write_atomic(&csv_path, report.to_csv()?.as_bytes())?;
    let output = AttributionOutput {
        split: cfg.split,
        windows,
        m_steps: cfg.attribute.m_steps,
        mean_completeness_residual: residuals.iter().sum::<f64>() / residuals.len() as f64,
        max_completeness_residual: residuals.iter().copied().fold(0.0, f64::max),
        report,
        modal_delta: modal,
    };
    let json_path = out.join("attribution.json");
    write_json(&json_path, &output)?;
    rec.output(json_path);
    rec.output(csv_path);
    println!(
        "top-5 factors {:?}: {:.2}% of attribution, static {:.2}%, over {} windows",
        output.report.top5_factors,
        output.report.top5_mfc,
        output.report.sic,
        output.windows.len()
    );
    if let Some(d) = &output.modal_delta {
        println!("change against the numerical-only checkpoint: top-5 {:+.2}, static {:+.2}", d.top5_mfc, d.sic);
    }
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Input(e.to_string()))?;
    text.push('\n');
    write_atomic(path, text.as_bytes())?;
    Ok(())
}
