//! Command-line workflows: dataset generation, weights, training, prediction,
//! evaluation and the weighting-scheme by learning-rate grid.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use crate::dice::{class_weights, dice_report, DiceError, DiceReport, ReportTable, WeightScheme, EPSILON};
use crate::inference::{argmax_labels, default_stride, evaluate_cases, plan_tiles, predict_volume, InferenceError};
use crate::phantom::{generate_dataset, read_dataset, write_dataset, Dataset, PhantomError, PhantomSpec};
use crate::trainer::{write_curve_csv, CurvePoint, TrainConfig, TrainError, Trainer};
use crate::unet3d::{read_checkpoint, write_checkpoint, UNetConfig, UNetError, UNetParams};
use crate::voxelgrid::vvol::{read_labels, read_scalar};
use crate::voxelgrid::{write_volume, Shape3, VolumeError};

pub const CHECKPOINT_FILE: &str = "checkpoint.vnet";
pub const CURVE_FILE: &str = "curve.csv";
pub const PROBABILITIES_FILE: &str = "probabilities.vvol";
pub const LABELS_FILE: &str = "labels.vvol";
pub const REPORT_FILE: &str = "report.csv";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    File { path: PathBuf, source: Box<CliError> },
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    Phantom(#[from] PhantomError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Net(#[from] UNetError),
    #[error(transparent)]
    Inference(#[from] InferenceError),
    #[error(transparent)]
    Dice(#[from] DiceError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn at<T, E: Into<CliError>>(path: &Path, r: Result<T, E>) -> Result<T, CliError> {
    r.map_err(|e| CliError::File { path: path.to_path_buf(), source: Box::new(e.into()) })
}

#[derive(Debug, Parser)]
#[command(name = "voxseg", version, about = "Class-weighted soft-Dice 3D U-Net segmentation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic multi-organ dataset.
    PhantomGen(PhantomGenArgs),
    /// Print the class weights of a dataset's training split as JSON.
    Weights(WeightsArgs),
    /// Train a network and write its checkpoint and learning curve.
    Train(TrainArgs),
    /// Segment one volume with a trained checkpoint.
    Predict(PredictArgs),
    /// Per-class Dice of a label volume against a reference.
    Evaluate(EvaluateArgs),
    /// Train every scheme and learning-rate combination and tabulate the results.
    Grid(GridArgs),
}

#[derive(Debug, Args)]
pub struct PhantomGenArgs {
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 20)]
    pub patients: usize,
    /// Edge length of the cubic volumes.
    #[arg(long, default_value_t = 48)]
    pub size: usize,
    /// Standard deviation of the additive noise.
    #[arg(long, default_value_t = 0.1)]
    pub sigma: f32,
    #[arg(long, default_value_t = 0.8)]
    pub train_fraction: f64,
}

#[derive(Debug, Args)]
pub struct WeightsArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "uniform")]
    pub scheme: WeightScheme,
    /// Write to this file instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Network shape flags.
#[derive(Debug, Clone, Args)]
pub struct NetArgs {
    /// Patch edge length; must be divisible by 2^levels.
    #[arg(long, default_value_t = 32)]
    pub patch: usize,
    #[arg(long, default_value_t = 2)]
    pub levels: usize,
    #[arg(long, default_value_t = 8)]
    pub base_channels: usize,
}

impl NetArgs {
    fn config(&self, num_classes: usize) -> Result<UNetConfig, CliError> {
        let patch = Shape3::cube(self.patch)?;
        let cfg = UNetConfig {
            levels: self.levels,
            base_channels: self.base_channels,
            ..UNetConfig::new(num_classes, patch)
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Optimisation flags shared by `train` and `grid`.
#[derive(Debug, Clone, Args)]
pub struct OptimArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 500)]
    pub iterations: usize,
    #[arg(long, default_value_t = 3)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 50)]
    pub validation_interval: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 0.001)]
    pub lr: f64,
    #[arg(long, default_value = "uniform")]
    pub scheme: WeightScheme,
    /// Also write a checkpoint every this many iterations.
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    #[command(flatten)]
    pub net: NetArgs,
    #[command(flatten)]
    pub optim: OptimArgs,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Scalar VVOL volume to segment.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Tile stride; defaults to half the patch.
    #[arg(long)]
    pub stride: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub truth: PathBuf,
    /// Comma-separated class names; defaults to class_0, class_1, ...
    #[arg(long, value_delimiter = ',')]
    pub class_names: Option<Vec<String>>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GridArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "uniform,simple,square")]
    pub schemes: Vec<WeightScheme>,
    #[arg(long = "lrs", value_delimiter = ',', default_value = "0.001,0.01")]
    pub learning_rates: Vec<f64>,
    /// Number of runs trained concurrently.
    #[arg(long, default_value_t = 1)]
    pub parallel: usize,
    #[command(flatten)]
    pub net: NetArgs,
    #[command(flatten)]
    pub optim: OptimArgs,
}

/// Execute a parsed command. Human-readable output goes to `out`.
pub fn run(cli: &Cli, out: &mut dyn Write) -> Result<(), CliError> {
    match &cli.command {
        Command::PhantomGen(a) => cmd_phantom_gen(a, out),
        Command::Weights(a) => cmd_weights(a, out),
        Command::Train(a) => cmd_train(a, out),
        Command::Predict(a) => cmd_predict(a, out),
        Command::Evaluate(a) => cmd_evaluate(a, out),
        Command::Grid(a) => cmd_grid(a, out),
    }
}

pub fn cmd_phantom_gen(a: &PhantomGenArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let spec = PhantomSpec { noise_sigma: a.sigma, seed: a.seed, ..PhantomSpec::cube(a.size)? };
    let dataset = generate_dataset(&spec, a.patients, a.train_fraction)?;
    at(&a.out_dir, write_dataset(&dataset, &a.out_dir))?;
    writeln!(
        out,
        "wrote {} train and {} test patients to {}",
        dataset.train.len(),
        dataset.test.len(),
        a.out_dir.display()
    )?;
    Ok(())
}

fn load(dir: &Path) -> Result<Dataset, CliError> {
    at(dir, read_dataset(dir))
}

pub fn cmd_weights(a: &WeightsArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let dataset = load(&a.data)?;
    let counts = dataset.train_counts()?;
    let weights = class_weights(&counts, a.scheme, EPSILON);
    let json = serde_json::json!({
        "scheme": a.scheme,
        "epsilon": weights.epsilon(),
        "class_names": dataset.class_names,
        "counts": counts.per_class(),
        "total": counts.total(),
        "weights": weights.values(),
    });
    let text = serde_json::to_string_pretty(&json)?;
    match &a.out {
        Some(path) => at(path, fs::write(path, text + "\n"))?,
        None => writeln!(out, "{text}")?,
    }
    Ok(())
}

fn train_config(optim: &OptimArgs, scheme: WeightScheme, lr: f64, seed: u64) -> TrainConfig {
    TrainConfig {
        learning_rate: lr,
        iterations: optim.iterations,
        batch_size: optim.batch_size,
        scheme,
        seed,
        validation_interval: optim.validation_interval,
        distinct_patients: true,
    }
}

/// A finished or aborted training run.
struct RunResult {
    params: Option<UNetParams<f32>>,
    curve: Vec<CurvePoint>,
    error: Option<TrainError>,
}

/// Train on the train split, validating on centre crops of the test split.
/// With `snapshots = Some((k, dir))` a checkpoint is written every `k` iterations.
fn train_run(
    dataset: &Dataset,
    unet: UNetConfig,
    cfg: TrainConfig,
    snapshots: Option<(usize, &Path)>,
) -> Result<RunResult, CliError> {
    let train = dataset.train_pairs();
    let test = dataset.test_pairs();
    let mut trainer = Trainer::new(&train, &test, unet, cfg)?;
    let mut curve = Vec::new();
    while trainer.iteration() < cfg.iterations {
        let point = trainer.step().and_then(|loss| {
            let it = trainer.iteration();
            if it % cfg.validation_interval == 0 || it == cfg.iterations {
                curve.push(trainer.curve_point(loss)?);
            }
            Ok(())
        });
        match point {
            Ok(()) => {}
            Err(e) if e.is_divergence() => return Ok(RunResult { params: None, curve, error: Some(e) }),
            Err(e) => return Err(e.into()),
        }
        if let Some((k, dir)) = snapshots {
            if trainer.iteration() % k == 0 {
                let path = dir.join(snapshot_file(trainer.iteration()));
                at(&path, write_checkpoint(trainer.params(), &path))?;
            }
        }
    }
    Ok(RunResult { params: Some(trainer.into_params()), curve, error: None })
}

/// Name of the periodic checkpoint after `iteration` steps.
pub fn snapshot_file(iteration: usize) -> String {
    format!("checkpoint_{iteration:06}.vnet")
}

fn write_curve(path: &Path, curve: &[CurvePoint], num_classes: usize) -> Result<(), CliError> {
    let file = at(path, fs::File::create(path))?;
    at(path, write_curve_csv(curve, num_classes, std::io::BufWriter::new(file)))
}

pub fn cmd_train(a: &TrainArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let dataset = load(&a.data)?;
    let unet = a.net.config(dataset.num_classes)?;
    let cfg = train_config(&a.optim, a.scheme, a.lr, a.optim.seed);
    cfg.validate()?;
    if a.checkpoint_every == Some(0) {
        return Err(CliError::Invalid("--checkpoint-every must be >= 1".into()));
    }
    at(&a.out_dir, fs::create_dir_all(&a.out_dir))?;
    let run = train_run(&dataset, unet, cfg, a.checkpoint_every.map(|k| (k, a.out_dir.as_path())))?;
    write_curve(&a.out_dir.join(CURVE_FILE), &run.curve, dataset.num_classes)?;
    if let Some(e) = run.error {
        return Err(e.into());
    }
    let params = run.params.expect("finished run has parameters");
    let path = a.out_dir.join(CHECKPOINT_FILE);
    at(&path, write_checkpoint(&params, &path))?;
    if let Some(last) = run.curve.last() {
        writeln!(
            out,
            "iteration {}: loss {:.6}, validation mean foreground DSC {:.4}",
            last.iteration, last.loss, last.mean_foreground_dsc
        )?;
    }
    Ok(())
}

pub fn cmd_predict(a: &PredictArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let params: UNetParams<f32> = at(&a.checkpoint, read_checkpoint(&a.checkpoint))?;
    let volume = at(&a.input, read_scalar(&a.input))?;
    let patch = params.config().patch;
    let stride = match a.stride {
        Some(s) => Shape3::cube(s)?,
        None => default_stride(patch),
    };
    let plan = plan_tiles(volume.shape(), patch, stride)?;
    let map = predict_volume(&params, &volume, &plan)?;
    let labels = argmax_labels(&map)?;
    at(&a.out_dir, fs::create_dir_all(&a.out_dir))?;
    let probs = a.out_dir.join(PROBABILITIES_FILE);
    at(&probs, write_volume(&map.to_channel_volume()?, &probs))?;
    let lbl = a.out_dir.join(LABELS_FILE);
    at(&lbl, write_volume(&labels, &lbl))?;
    writeln!(out, "segmented {} with {} tiles", volume.shape(), plan.corners.len())?;
    Ok(())
}

pub fn cmd_evaluate(a: &EvaluateArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let truth = at(&a.truth, read_labels(&a.truth, None))?;
    let pred = at(&a.pred, read_labels(&a.pred, Some(truth.num_classes())))?;
    let names = match &a.class_names {
        Some(n) => n.clone(),
        None => (0..truth.num_classes()).map(|c| format!("class_{c}")).collect(),
    };
    let report = dice_report(&pred, &truth, &names)?;
    let mut table = ReportTable::default();
    table.push("dsc", Some(report));
    match &a.out {
        Some(path) => {
            let file = at(path, fs::File::create(path))?;
            at(path, table.write_csv(file))?;
        }
        None => table.write_csv(&mut *out)?,
    }
    Ok(())
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of one grid run: `splitmix64(splitmix64(base ^ scheme_index) ^ lr_bits)`
/// with schemes indexed uniform 0, simple 1, square 2.
pub fn run_seed(base: u64, scheme: WeightScheme, learning_rate: f64) -> u64 {
    let index = WeightScheme::ALL.iter().position(|&s| s == scheme).expect("known scheme") as u64;
    splitmix64(splitmix64(base ^ index) ^ learning_rate.to_bits())
}

/// Column label and file stem of one grid run, e.g. `simple_lr0.01`.
pub fn run_label(scheme: WeightScheme, learning_rate: f64) -> String {
    format!("{scheme}_lr{learning_rate}")
}

pub fn curve_file(scheme: WeightScheme, learning_rate: f64) -> String {
    format!("curve_{}.csv", run_label(scheme, learning_rate))
}

pub fn checkpoint_file(scheme: WeightScheme, learning_rate: f64) -> String {
    format!("{}.vnet", run_label(scheme, learning_rate))
}

/// Outcome of one grid cell.
struct GridCell {
    run: RunResult,
    report: Option<DiceReport>,
}

fn grid_cell(dataset: &Dataset, unet: UNetConfig, cfg: TrainConfig) -> Result<GridCell, CliError> {
    let run = train_run(dataset, unet, cfg, None)?;
    let report = match &run.params {
        Some(p) => Some(evaluate_cases(p, &dataset.test_pairs(), &dataset.class_names, default_stride(unet.patch))?),
        None => None,
    };
    Ok(GridCell { run, report })
}

pub fn cmd_grid(a: &GridArgs, out: &mut dyn Write) -> Result<(), CliError> {
    if a.schemes.is_empty() || a.learning_rates.is_empty() {
        return Err(CliError::Invalid("grid needs at least one scheme and one learning rate".into()));
    }
    if a.parallel == 0 {
        return Err(CliError::Invalid("--parallel must be >= 1".into()));
    }
    let dataset = load(&a.data)?;
    let unet = a.net.config(dataset.num_classes)?;
    let runs: Vec<(WeightScheme, f64)> =
        a.schemes.iter().flat_map(|&s| a.learning_rates.iter().map(move |&lr| (s, lr))).collect();
    let configs: Vec<TrainConfig> =
        runs.iter().map(|&(s, lr)| train_config(&a.optim, s, lr, run_seed(a.optim.seed, s, lr))).collect();
    for cfg in &configs {
        cfg.validate()?;
    }
    at(&a.out_dir, fs::create_dir_all(&a.out_dir))?;

    let cells: Vec<Result<GridCell, CliError>> = if a.parallel == 1 {
        configs.iter().map(|&cfg| grid_cell(&dataset, unet, cfg)).collect()
    } else {
        let mut slots: Vec<Option<Result<GridCell, CliError>>> = (0..configs.len()).map(|_| None).collect();
        for (chunk_cfgs, chunk_slots) in configs.chunks(a.parallel).zip(slots.chunks_mut(a.parallel)) {
            std::thread::scope(|s| {
                let handles: Vec<_> = chunk_cfgs
                    .iter()
                    .map(|&cfg| {
                        let dataset = &dataset;
                        s.spawn(move || grid_cell(dataset, unet, cfg))
                    })
                    .collect();
                for (slot, h) in chunk_slots.iter_mut().zip(handles) {
                    *slot = Some(h.join().expect("grid run panicked"));
                }
            });
        }
        slots.into_iter().map(|s| s.expect("every run filled")).collect()
    };

    let mut table = ReportTable::default();
    for (&(scheme, lr), cell) in runs.iter().zip(cells) {
        let cell = cell?;
        write_curve(&a.out_dir.join(curve_file(scheme, lr)), &cell.run.curve, dataset.num_classes)?;
        if let Some(p) = &cell.run.params {
            let path = a.out_dir.join(checkpoint_file(scheme, lr));
            at(&path, write_checkpoint(p, &path))?;
        }
        match (&cell.run.error, &cell.report) {
            (Some(e), _) => writeln!(out, "{}: diverged ({e})", run_label(scheme, lr))?,
            (None, Some(r)) => {
                writeln!(out, "{}: mean foreground DSC {:.4}", run_label(scheme, lr), r.mean_foreground())?
            }
            (None, None) => unreachable!("finished run without report"),
        }
        table.push(run_label(scheme, lr), cell.report);
    }
    let path = a.out_dir.join(REPORT_FILE);
    let file = at(&path, fs::File::create(&path))?;
    at(&path, table.write_csv(file))?;
    Ok(())
}
