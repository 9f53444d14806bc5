//! The `semadapt` command line: dataset generation, training, sweeps and
//! evaluation.
//!
//! Exit codes: 0 on success, 1 for usage or configuration errors, 2 for
//! runtime failures such as a non-finite loss.

mod config;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use image::RgbImage;
use serde::Serialize;

use crate::datagen::{export_bundle, import_bundle};
use crate::datagen::{DatasetBundle, LabelMap, Split, IGNORE};
use crate::metrics::IouReport;
use crate::models::{Checkpoint, GeneratorG, HeadCh};
use crate::trainer::{self, Mode, TrainReport, CHECKPOINT_BEST, CHECKPOINT_FINAL, CHECKPOINT_LAST, METRICS_FILE};
use crate::Error;

pub use config::{DatasetSection, DomainSection, ExperimentConfig, OutputSection, RESOLVED_CONFIG};

/// Environment variable naming the directory that holds runs by default.
pub const RUN_ROOT_ENV: &str = "SEMADAPT_RUN_ROOT";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const RUNS_FILE: &str = "runs.csv";
pub const MONOTONICITY_FILE: &str = "monotonicity.txt";
pub const REPORT_FILE: &str = "report.json";

#[derive(Debug, Parser)]
#[command(name = "semadapt", version, about = "Semi-supervised adversarial domain adaptation for segmentation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render the benchmark and export it as PNG files plus a manifest.
    Generate(GenerateArgs),
    /// Train one model.
    Train(TrainArgs),
    /// Train a grid of runs over labeled budgets or semantic weights.
    Sweep(SweepArgs),
    /// Evaluate a checkpoint on one split.
    Eval(EvalArgs),
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// TOML experiment config; omitted keys take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override the training seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Override the labeled target budget.
    #[arg(long)]
    pub budget: Option<usize>,
    /// Directory that receives runs when no output is given.
    #[arg(long, env = RUN_ROOT_ENV, default_value = "runs")]
    pub run_root: PathBuf,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Overwrite a non-empty output directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Run directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_parser = parse_mode)]
    pub mode: Option<Mode>,
    #[arg(long)]
    pub lambda_sadv: Option<f64>,
    #[arg(long)]
    pub iterations: Option<usize>,
    /// Train on an exported dataset instead of rendering one.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Overwrite a non-empty run directory.
    #[arg(long)]
    pub force: bool,
    /// Continue the run in `--out` from its last checkpoint.
    #[arg(long, conflicts_with = "force")]
    pub resume: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SweepAxis {
    Budget,
    LambdaSadv,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Directory of the sweep.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub axis: SweepAxis,
    /// Comma-separated axis values.
    #[arg(long, value_delimiter = ',', required = true)]
    pub values: Vec<f64>,
    /// Comma-separated modes; defaults to the configured mode.
    #[arg(long = "mode", value_delimiter = ',', value_parser = parse_mode)]
    pub modes: Vec<Mode>,
    /// Comma-separated seeds; defaults to the configured (or `--seed`) seed.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Vec<u64>,
    #[arg(long)]
    pub lambda_sadv: Option<f64>,
    #[arg(long)]
    pub iterations: Option<usize>,
    /// Slack, in mIoU points, allowed by the monotonicity report.
    #[arg(long, default_value_t = 0.0)]
    pub margin: f64,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CheckpointKind {
    Best,
    Final,
    Last,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Run directory holding the resolved config and checkpoints.
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long, value_enum, default_value = "final")]
    pub checkpoint: CheckpointKind,
    /// Checkpoint file to use instead of one from the run directory.
    #[arg(long)]
    pub checkpoint_path: Option<PathBuf>,
    #[arg(long, value_parser = parse_split, default_value = "target_val")]
    pub split: Split,
    /// Evaluate on an exported dataset instead of re-rendering the run's.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Write color-coded prediction PNGs into this directory.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    /// Where to write the JSON report; defaults to the run directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    Mode::parse(s).ok_or_else(|| {
        let names: Vec<&str> = Mode::ALL.iter().map(|m| m.name()).collect();
        format!("unknown mode {s:?}; expected one of {}", names.join(", "))
    })
}

fn parse_split(s: &str) -> Result<Split, String> {
    Split::parse(s).ok_or_else(|| format!("unknown split {s:?}"))
}

/// Parses arguments, runs the command and maps the outcome to an exit code.
pub fn main_with_args<I, S>(args: I) -> ExitCode
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// 1 for configuration and usage errors, 2 for everything else.
pub fn exit_code(e: &anyhow::Error) -> u8 {
    let usage = e.chain().any(|c| {
        matches!(
            c.downcast_ref::<Error>(),
            Some(Error::Config(_) | Error::InvalidArgument(_))
        ) || c.downcast_ref::<toml::de::Error>().is_some()
    });
    if usage {
        1
    } else {
        2
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(a) => run_generate(&a),
        Command::Train(a) => run_train(&a).map(|_| ()),
        Command::Sweep(a) => run_sweep(&a),
        Command::Eval(a) => run_eval(&a).map(|_| ()),
    }
}

fn load_config(common: &CommonArgs) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.training.seed = s;
    }
    if let Some(b) = common.budget {
        cfg.dataset.labeled_budget = b;
    }
    Ok(cfg)
}

/// Refuses to reuse a non-empty directory unless `force` is set, in which
/// case its contents are removed.
fn prepare_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let non_empty = fs::read_dir(dir)?.next().is_some();
        if non_empty && !force {
            return Err(Error::Config(format!(
                "{} exists and is not empty; pass --force to overwrite",
                dir.display()
            ))
            .into());
        }
        if non_empty {
            fs::remove_dir_all(dir)?;
        }
    }
    fs::create_dir_all(dir)?;
    Ok(())
}

pub fn run_generate(args: &GenerateArgs) -> Result<()> {
    let cfg = load_config(&args.common)?;
    cfg.dataset.split_plan()?;
    let bundle = cfg.dataset.build()?;
    prepare_dir(&args.out, args.force)?;
    export_bundle(&bundle, &args.out)?;
    fs::write(args.out.join(RESOLVED_CONFIG), cfg.resolved().to_toml()?)?;
    println!(
        "wrote {} source, {} labeled, {} unlabeled and {} validation samples to {}",
        bundle.source_train.len(),
        bundle.target_labeled.len(),
        bundle.target_unlabeled.len(),
        bundle.target_val.len(),
        args.out.display()
    );
    Ok(())
}

fn load_dataset(cfg: &ExperimentConfig, data: Option<&Path>) -> Result<DatasetBundle> {
    match data {
        Some(dir) => {
            let bundle = import_bundle(dir)?;
            if bundle.classes != cfg.model.classes {
                bail!(Error::Config(format!(
                    "dataset has {} classes, model {}",
                    bundle.classes, cfg.model.classes
                )));
            }
            cfg.training.check_budget(bundle.target_labeled.len())?;
            Ok(bundle)
        }
        None => cfg.dataset.build(),
    }
}

fn default_run_dir(root: &Path, cfg: &ExperimentConfig) -> PathBuf {
    root.join(format!(
        "{}-b{}-seed{}",
        cfg.training.mode, cfg.dataset.labeled_budget, cfg.training.seed
    ))
}

/// Trains one run and returns its directory and report.
pub fn run_train(args: &TrainArgs) -> Result<(PathBuf, TrainReport)> {
    if args.resume {
        let dir = args
            .out
            .clone()
            .ok_or_else(|| Error::Config("--resume needs --out pointing at the run".into()))?;
        let cfg = ExperimentConfig::load(&dir.join(RESOLVED_CONFIG))?;
        let data = load_dataset(&cfg, args.data.as_deref())?;
        let (_, report) = trainer::resume::<f32>(&dir, &cfg.training, &cfg.model, &data)?;
        print_final(&dir, &report);
        return Ok((dir, report));
    }
    let mut cfg = load_config(&args.common)?;
    if let Some(m) = args.mode {
        cfg.training.mode = m;
    }
    if let Some(l) = args.lambda_sadv {
        cfg.training.weights.lambda_sadv = Some(l);
    }
    if let Some(n) = args.iterations {
        cfg.training.max_iterations = n;
    }
    cfg.validate()?;
    let dir = args
        .out
        .clone()
        .or_else(|| cfg.output.run_dir.clone())
        .unwrap_or_else(|| default_run_dir(&args.common.run_root, &cfg));
    let data = load_dataset(&cfg, args.data.as_deref())?;
    let report = train_in(&cfg, &data, &dir, args.force)?;
    print_final(&dir, &report);
    Ok((dir, report))
}

fn train_in(cfg: &ExperimentConfig, data: &DatasetBundle, dir: &Path, force: bool) -> Result<TrainReport> {
    prepare_dir(dir, force)?;
    let mut resolved = cfg.resolved();
    resolved.output.run_dir = Some(dir.to_path_buf());
    fs::write(dir.join(RESOLVED_CONFIG), resolved.to_toml()?)?;
    let (_, report) = trainer::train::<f32>(&resolved.training, &resolved.model, data, Some(dir))?;
    Ok(report)
}

fn print_final(dir: &Path, report: &TrainReport) {
    let fmt = |m: Option<f64>| m.map_or("n/a".to_string(), |v| format!("{:.2}", 100.0 * v));
    println!(
        "{}: final mIoU {}, best mIoU {}",
        dir.display(),
        fmt(report.final_miou),
        fmt(report.best_miou)
    );
}

/// One cell of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub value: f64,
    pub mode: Mode,
    pub seed: u64,
    /// Final validation mIoU, or `None` when the cell is not trainable.
    pub final_miou: Option<f64>,
    pub run_dir: PathBuf,
}

fn fmt_value(v: f64) -> String {
    format!("{v}")
}

pub fn run_sweep(args: &SweepArgs) -> Result<()> {
    let base = load_config(&args.common)?;
    let modes = if args.modes.is_empty() { vec![base.training.mode] } else { args.modes.clone() };
    let seeds = if args.seeds.is_empty() { vec![base.training.seed] } else { args.seeds.clone() };
    for &v in &args.values {
        let ok = match args.axis {
            SweepAxis::Budget => v >= 0.0 && v.fract() == 0.0 && v as usize <= base.dataset.n_target_train,
            SweepAxis::LambdaSadv => v >= 0.0 && v.is_finite(),
        };
        if !ok {
            bail!(Error::Config(format!("invalid {:?} value {v}", args.axis)));
        }
    }
    let root = args.out.clone().unwrap_or_else(|| args.common.run_root.join("sweep"));
    prepare_dir(&root, args.force)?;
    let axis_name = match args.axis {
        SweepAxis::Budget => "budget",
        SweepAxis::LambdaSadv => "lambda_sadv",
    };
    let mut rows = Vec::new();
    for &v in &args.values {
        for &mode in &modes {
            for &seed in &seeds {
                let mut cfg = base.clone();
                cfg.training.mode = mode;
                cfg.training.seed = seed;
                if let Some(l) = args.lambda_sadv {
                    cfg.training.weights.lambda_sadv = Some(l);
                }
                if let Some(n) = args.iterations {
                    cfg.training.max_iterations = n;
                }
                match args.axis {
                    SweepAxis::Budget => cfg.dataset.labeled_budget = v as usize,
                    SweepAxis::LambdaSadv => cfg.training.weights.lambda_sadv = Some(v),
                }
                let dir = root.join(format!("{axis_name}={}", fmt_value(v))).join(format!("{mode}-seed{seed}"));
                let final_miou = match cfg.validate() {
                    Err(e) if exit_code(&e) == 1 => {
                        eprintln!("skipping {}: {e:#}", dir.display());
                        None
                    }
                    Err(e) => return Err(e),
                    Ok(()) => {
                        let data = cfg.dataset.build()?;
                        let report = train_in(&cfg, &data, &dir, false)?;
                        print_final(&dir, &report);
                        report.final_miou
                    }
                };
                rows.push(SweepRow { value: v, mode, seed, final_miou, run_dir: dir });
            }
        }
    }
    let (summary, runs) = summary_tables(axis_name, &args.values, &modes, &rows);
    fs::write(root.join(SUMMARY_FILE), &summary)?;
    fs::write(root.join(RUNS_FILE), runs)?;
    print!("{summary}");
    if args.axis == SweepAxis::Budget {
        let report = monotonicity_report(&args.values, &modes, &rows, args.margin);
        fs::write(root.join(MONOTONICITY_FILE), &report)?;
        print!("{report}");
    }
    Ok(())
}

/// Mean final mIoU (in points) of every (value, mode) cell; `None` when no
/// seed of the cell was trainable.
pub fn cell_means(values: &[f64], modes: &[Mode], rows: &[SweepRow]) -> BTreeMap<(usize, Mode), Option<f64>> {
    let mut out = BTreeMap::new();
    for (i, &v) in values.iter().enumerate() {
        for &m in modes {
            let got: Vec<f64> =
                rows.iter().filter(|r| r.value == v && r.mode == m).filter_map(|r| r.final_miou).collect();
            let mean = (!got.is_empty()).then(|| 100.0 * got.iter().sum::<f64>() / got.len() as f64);
            out.insert((i, m), mean);
        }
    }
    out
}

/// Pivoted summary (one row per axis value, one column per mode) and the
/// long per-run table.
pub fn summary_tables(axis: &str, values: &[f64], modes: &[Mode], rows: &[SweepRow]) -> (String, String) {
    let means = cell_means(values, modes, rows);
    let mut summary = String::from(axis);
    for m in modes {
        let _ = write!(summary, ",{m}");
    }
    summary.push('\n');
    for (i, &v) in values.iter().enumerate() {
        summary.push_str(&fmt_value(v));
        for &m in modes {
            match means[&(i, m)] {
                Some(x) => {
                    let _ = write!(summary, ",{x:.4}");
                }
                None => summary.push(','),
            }
        }
        summary.push('\n');
    }
    let mut runs = format!("{axis},mode,seed,final_miou,run_dir\n");
    for r in rows {
        let miou = r.final_miou.map(|m| format!("{m:.6}")).unwrap_or_default();
        let _ = writeln!(runs, "{},{},{},{},{}", fmt_value(r.value), r.mode, r.seed, miou, r.run_dir.display());
    }
    (summary, runs)
}

/// Per mode: is the mean mIoU non-decreasing in the budget, up to `margin`
/// points?
pub fn monotonicity_report(values: &[f64], modes: &[Mode], rows: &[SweepRow], margin: f64) -> String {
    let means = cell_means(values, modes, rows);
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = String::new();
    for &m in modes {
        let series: Vec<(f64, f64)> =
            order.iter().filter_map(|&i| means[&(i, m)].map(|x| (values[i], x))).collect();
        let drops: Vec<String> = series
            .windows(2)
            .filter(|w| w[1].1 < w[0].1 - margin)
            .map(|w| format!("{} -> {}: {:.2} -> {:.2}", w[0].0, w[1].0, w[0].1, w[1].1))
            .collect();
        if drops.is_empty() {
            let _ = writeln!(out, "{m}: non-decreasing over {} budgets (margin {margin})", series.len());
        } else {
            let _ = writeln!(out, "{m}: decreases at {}", drops.join("; "));
        }
    }
    out
}

/// Colors of the prediction PNGs; ignore pixels are black.
pub const CLASS_COLORS: [[u8; 3]; 8] = [
    [128, 128, 128],
    [230, 60, 50],
    [60, 180, 75],
    [50, 90, 220],
    [240, 200, 40],
    [160, 60, 200],
    [40, 200, 200],
    [250, 130, 180],
];

pub fn color_label_map(label: &LabelMap) -> RgbImage {
    RgbImage::from_fn(label.width() as u32, label.height() as u32, |x, y| {
        let k = label.get(y as usize, x as usize);
        if k == IGNORE {
            image::Rgb([0, 0, 0])
        } else {
            image::Rgb(CLASS_COLORS[k as usize % CLASS_COLORS.len()])
        }
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub checkpoint: PathBuf,
    pub split: Split,
    pub samples: usize,
    pub iteration: Option<u64>,
    pub miou: f64,
    pub per_class_iou: BTreeMap<usize, f64>,
    pub excluded_classes: Vec<usize>,
}

pub fn run_eval(args: &EvalArgs) -> Result<EvalReport> {
    let cfg = ExperimentConfig::load(&args.run.join(RESOLVED_CONFIG))?;
    let ck_path = args.checkpoint_path.clone().unwrap_or_else(|| {
        args.run.join(match args.checkpoint {
            CheckpointKind::Best => CHECKPOINT_BEST,
            CheckpointKind::Final => CHECKPOINT_FINAL,
            CheckpointKind::Last => CHECKPOINT_LAST,
        })
    });
    let ck = Checkpoint::load(&ck_path)?;
    ck.check_fingerprint(&cfg.model.fingerprint())?;
    let mut generator = GeneratorG::<f32>::new(&cfg.model, 0);
    let mut head = HeadCh::<f32>::new(&cfg.model, 0);
    ck.load_module(&mut generator)?;
    ck.load_module(&mut head)?;
    if args.split == Split::TargetUnlabeled {
        bail!(Error::Config("the unlabeled target split has no usable labels".into()));
    }
    let data = load_dataset(&cfg, args.data.as_deref())?;
    let samples = data.split(args.split);
    if samples.is_empty() {
        bail!(Error::Config(format!("split {} is empty", args.split.name())));
    }
    let cm = trainer::evaluate(&generator, &head, cfg.model.classes, samples)?;
    let IouReport { per_class, excluded, mean } = cm.miou_all()?;
    if let Some(dir) = &args.predictions {
        fs::create_dir_all(dir)?;
        for s in samples {
            let pred = trainer::predict(&generator, &head, &s.image)?;
            color_label_map(&pred).save(dir.join(format!("{:012x}.png", s.id)))?;
        }
    }
    let report = EvalReport {
        checkpoint: ck_path,
        split: args.split,
        samples: samples.len(),
        iteration: ck.meta["iteration"].as_u64(),
        miou: mean,
        per_class_iou: per_class,
        excluded_classes: excluded,
    };
    let json = serde_json::to_string_pretty(&report)?;
    let out = args.out.clone().unwrap_or_else(|| args.run.join(REPORT_FILE));
    if let Some(parent) = out.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(&out, &json).with_context(|| format!("writing {}", out.display()))?;
    println!("{json}");
    Ok(report)
}

/// Paths of the metrics log of a run directory.
pub fn metrics_path(run_dir: &Path) -> PathBuf {
    run_dir.join(METRICS_FILE)
}
