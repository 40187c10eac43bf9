//! `hqcnf` command-line front end.
//!
//! Every command reads an optional flat JSON config (unknown keys are
//! errors), writes its artifacts under `--out`, and exits with 0 on
//! success, 1 on a config or usage error, and 2 on a runtime failure.

use std::ffi::OsString;
use std::fmt;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{
    brightest_crop, export_pgm, load_dataset, preprocess, save_dataset, synth_generate, synthetic_dataset, unpreprocess,
    Dataset, ImageGrid, PreprocessSpec, SynthKind, SynthSpec, DEFAULT_BIAS,
};
use crate::error::{Error, Result};
use crate::flow::{Checkpoint, FlowModel, ImageMeta, DEFAULT_S_CLAMP};
use crate::metrics::{
    fid_rows, fmt17, mode_collapse_score, read_columns, ComplexityReport, Extractor, FeatureMap,
};
use crate::qsim::AnsatzKind;
use crate::training::{generate_rows, train_run, RunMetrics, TrainAbort, TrainConfig, DEFAULT_KL_WEIGHT};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

/// Seed offset between a synthetic training set and its held-out reference.
pub const REFERENCE_SEED_OFFSET: u64 = 1_000_003;

/// Samples drawn for the PGM panel written after training.
pub const PANEL_ROWS: usize = 4;
pub const PANEL_COLS: usize = 5;

/// Mode-collapse scores below this are flagged in evaluation reports.
pub const COLLAPSE_FLAG_THRESHOLD: f64 = 0.05;

pub const SCALE_RESOLUTION: Resolution = Resolution { height: 24, width: 32 };
pub const SCALE_QUBITS: usize = 8;

/// Image height × width, written `HxW`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Resolution {
    pub height: usize,
    pub width: usize,
}

impl Resolution {
    pub fn dim(self) -> usize {
        self.height * self.width
    }
}

impl FromStr for Resolution {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("resolution {s:?} is not of the form HxW"));
        let (h, w) = s.split_once(['x', 'X']).ok_or_else(bad)?;
        let height: usize = h.trim().parse().map_err(|_| bad())?;
        let width: usize = w.trim().parse().map_err(|_| bad())?;
        if height == 0 || width == 0 {
            return Err(bad());
        }
        Ok(Self { height, width })
    }
}

impl TryFrom<String> for Resolution {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Resolution> for String {
    fn from(r: Resolution) -> String {
        r.to_string()
    }
}

impl fmt::Display for Resolution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.height, self.width)
    }
}

/// Flat experiment configuration. Every key is optional.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub quantum_multiplier: f64,
    pub kl_weight: f64,
    pub seed: u64,
    pub coupling_layers: usize,
    pub hybrid: bool,
    pub n_qubits: usize,
    pub ansatz: AnsatzKind,
    pub circuit_layers: usize,
    pub s_clamp: f64,
    pub eval_samples: usize,
    pub log_nonzero_ratio: bool,

    /// Dataset CSV; a synthetic set is generated when absent.
    pub dataset: Option<PathBuf>,
    /// Held-out dataset CSV for FID; defaults to the training set when a
    /// dataset file is given, otherwise to a fresh synthetic draw.
    pub reference_dataset: Option<PathBuf>,
    pub synth_kind: SynthKind,
    /// Training images (synthetic datasets only).
    pub samples: usize,
    pub synth_seed: u64,
    pub canvas: usize,
    pub diffusion_sigma: f64,
    pub noise_floor: f64,
    pub resolution: Resolution,
    pub bias: f64,
    pub reference_count: usize,

    pub run_count: usize,
    pub workers: Option<usize>,
    pub out: Option<PathBuf>,

    pub sweep_samples: Option<Vec<usize>>,
    pub sweep_layers: Option<Vec<usize>>,
    pub sweep_resolution: Option<Vec<Resolution>>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            quantum_multiplier: t.quantum_multiplier,
            kl_weight: DEFAULT_KL_WEIGHT,
            seed: t.seed,
            coupling_layers: t.coupling_layers,
            hybrid: t.hybrid,
            n_qubits: t.n_qubits,
            ansatz: t.ansatz,
            circuit_layers: t.circuit_layers,
            s_clamp: DEFAULT_S_CLAMP,
            eval_samples: t.eval_samples,
            log_nonzero_ratio: t.log_nonzero_ratio,
            dataset: None,
            reference_dataset: None,
            synth_kind: SynthKind::Mixed,
            samples: 100,
            synth_seed: 1,
            canvas: 256,
            diffusion_sigma: 1.0,
            noise_floor: 0.0,
            resolution: Resolution { height: 12, width: 8 },
            bias: DEFAULT_BIAS,
            reference_count: 100,
            run_count: 1,
            workers: None,
            out: None,
            sweep_samples: None,
            sweep_layers: None,
            sweep_resolution: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Parses a config file. Relative dataset paths are taken relative to
    /// the file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.dataset, &mut cfg.reference_dataset].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            quantum_multiplier: self.quantum_multiplier,
            kl_weight: self.kl_weight,
            seed: self.seed,
            coupling_layers: self.coupling_layers,
            hybrid: self.hybrid,
            n_qubits: self.n_qubits,
            ansatz: self.ansatz,
            circuit_layers: self.circuit_layers,
            s_clamp: self.s_clamp,
            eval_samples: self.eval_samples,
            log_nonzero_ratio: self.log_nonzero_ratio,
        }
    }

    pub fn synth_spec(&self) -> SynthSpec {
        SynthSpec {
            kind: self.synth_kind,
            canvas: self.canvas,
            count: self.samples,
            seed: self.synth_seed,
            diffusion_sigma: self.diffusion_sigma,
            noise_floor: self.noise_floor,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train_config().validate()?;
        if self.run_count == 0 {
            return Err(Error::Config("run_count must be >= 1".into()));
        }
        if self.workers == Some(0) {
            return Err(Error::Config("workers must be >= 1".into()));
        }
        if self.dataset.is_none() {
            if self.samples == 0 {
                return Err(Error::Config("samples must be >= 1".into()));
            }
            let r = self.resolution;
            if r.height > self.canvas || r.width > self.canvas {
                return Err(Error::Config(format!("resolution {r} exceeds the {0}x{0} canvas", self.canvas)));
            }
        }
        if self.hybrid {
            let b = self.ansatz.block_size(self.n_qubits);
            let dims = match &self.sweep_resolution {
                Some(rs) => rs.iter().map(|r| r.dim()).collect(),
                None if self.dataset.is_none() => vec![self.resolution.dim()],
                None => vec![],
            };
            if let Some(d) = dims.into_iter().find(|d| b > d / 2) {
                return Err(Error::Config(format!(
                    "{} qubits with ansatz {:?} need a block of {b}, but d/2 = {}",
                    self.n_qubits,
                    self.ansatz,
                    d / 2
                )));
            }
        }
        for (name, empty) in [
            ("sweep_samples", self.sweep_samples.as_ref().is_some_and(Vec::is_empty)),
            ("sweep_layers", self.sweep_layers.as_ref().is_some_and(Vec::is_empty)),
            ("sweep_resolution", self.sweep_resolution.as_ref().is_some_and(Vec::is_empty)),
        ] {
            if empty {
                return Err(Error::Config(format!("{name} must not be empty")));
            }
        }
        if self.sweep_samples.as_ref().is_some_and(|v| v.contains(&0)) {
            return Err(Error::Config("sweep_samples entries must be >= 1".into()));
        }
        Ok(())
    }

    /// Seed of run `i`.
    pub fn run_seed(&self, i: usize) -> u64 {
        self.seed.wrapping_add(i as u64)
    }
}

/// Training rows plus a held-out reference set in the same model space.
pub struct TrainingData {
    pub dataset: Dataset,
    pub reference: Vec<Vec<f64>>,
}

/// Builds the training set and reference rows described by `cfg`.
pub fn training_data(cfg: &ExperimentConfig) -> Result<TrainingData> {
    let dataset = match &cfg.dataset {
        Some(path) => load_dataset(path)?,
        None => {
            let r = cfg.resolution;
            synthetic_dataset(&cfg.synth_spec(), r.height, r.width, cfg.bias)?
        }
    };
    let reference = match (&cfg.reference_dataset, &cfg.dataset) {
        (Some(path), _) => {
            let r = load_dataset(path)?;
            if r.dim() != dataset.dim() {
                return Err(Error::dim(format!(
                    "reference images have {} pixels, training images {}",
                    r.dim(),
                    dataset.dim()
                )));
            }
            r.model_rows()
        }
        (None, Some(_)) => {
            log::warn!("no reference_dataset given; FID is measured against the training set");
            dataset.model_rows()
        }
        (None, None) => {
            let spec = SynthSpec {
                count: cfg.reference_count,
                seed: cfg.synth_seed.wrapping_add(REFERENCE_SEED_OFFSET),
                ..cfg.synth_spec()
            };
            synthetic_reference(&spec, dataset.height, dataset.width, &dataset.preprocess)?
        }
    };
    Ok(TrainingData { dataset, reference })
}

/// Synthetic events cropped and mapped with an existing preprocessing.
fn synthetic_reference(spec: &SynthSpec, h: usize, w: usize, pre: &PreprocessSpec) -> Result<Vec<Vec<f64>>> {
    if spec.count == 0 {
        return Ok(vec![]);
    }
    synth_generate(spec)?
        .iter()
        .map(|e| Ok(preprocess(&brightest_crop(&e.image, h, w)?, pre).to_model_space()))
        .collect()
}

/// Model-space rows (already clamped to `[−1, 1]`) as `[0, 255]` images.
fn rows_to_images(rows: &[Vec<f64>], h: usize, w: usize) -> Result<Vec<ImageGrid>> {
    rows.iter()
        .map(|r| Ok(ImageGrid::from_model_space(h, w, r)?.clipped(0.0, 255.0)))
        .collect()
}

/// Tiles `images` row-major into a `rows × cols` panel.
pub fn image_panel(images: &[ImageGrid], rows: usize, cols: usize) -> Result<ImageGrid> {
    let first = images
        .first()
        .ok_or_else(|| Error::Contract("panel needs at least one image".into()))?;
    let (h, w) = (first.height(), first.width());
    if images.len() > rows * cols {
        return Err(Error::dim(format!("{} images for a {rows}x{cols} panel", images.len())));
    }
    let mut panel = ImageGrid::zeros(rows * h, cols * w);
    for (k, img) in images.iter().enumerate() {
        if (img.height(), img.width()) != (h, w) {
            return Err(Error::dim("panel images differ in size"));
        }
        let (pr, pc) = (k / cols, k % cols);
        for r in 0..h {
            for c in 0..w {
                panel.set(pr * h + r, pc * w + c, img.get(r, c));
            }
        }
    }
    Ok(panel)
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes `sample_NN.pgm` files and `grid.pgm` under `dir/samples`.
fn write_sample_pgms(model: &FlowModel, h: usize, w: usize, seed: u64, dir: &Path) -> Result<()> {
    let n = PANEL_ROWS * PANEL_COLS;
    let images = rows_to_images(&generate_rows(model, n, seed)?, h, w)?;
    let sdir = dir.join("samples");
    create_dir(&sdir)?;
    for (i, img) in images.iter().enumerate() {
        export_pgm(img, sdir.join(format!("sample_{i:02}.pgm")))?;
    }
    export_pgm(&image_panel(&images, PANEL_ROWS, PANEL_COLS)?, sdir.join("grid.pgm"))
}

/// Failure from a command, carrying the exit code it maps to.
#[derive(Debug)]
pub enum CommandError {
    Config(Error),
    Runtime(Error),
    Abort(TrainAbort),
}

impl CommandError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CommandError::Config(_) => EXIT_CONFIG,
            _ => EXIT_RUNTIME,
        }
    }
}

impl fmt::Display for CommandError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CommandError::Config(e) | CommandError::Runtime(e) => write!(f, "{e}"),
            CommandError::Abort(a) => write!(f, "training aborted: {a}"),
        }
    }
}

impl std::error::Error for CommandError {}

impl From<Error> for CommandError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => CommandError::Config(e),
            other => CommandError::Runtime(other),
        }
    }
}

impl From<TrainAbort> for CommandError {
    fn from(a: TrainAbort) -> Self {
        CommandError::Abort(a)
    }
}

pub type CommandResult<T> = std::result::Result<T, CommandError>;

/// Artifacts of one finished training run.
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub dir: PathBuf,
    pub metrics: RunMetrics,
}

/// Trains once with `seed` and writes `metrics.csv`, `model.ckpt` and the
/// sample PGMs to `dir`. On abort the partial metrics and `abort.txt` are
/// written before the error is returned.
fn train_one(data: &TrainingData, cfg: &ExperimentConfig, seed: u64, dir: &Path) -> CommandResult<RunArtifacts> {
    create_dir(dir)?;
    let tc = TrainConfig {
        seed,
        ..cfg.train_config()
    };
    let metrics_path = dir.join("metrics.csv");
    match train_run(&data.dataset, &data.reference, &tc) {
        Ok(out) => {
            write_file(&metrics_path, out.metrics.to_csv_string())?;
            let ds = &data.dataset;
            let meta = ImageMeta {
                height: ds.height,
                width: ds.width,
                preprocess: ds.preprocess,
            };
            Checkpoint::new(out.model.clone(), Some(meta)).save(dir.join("model.ckpt"))?;
            write_sample_pgms(&out.model, ds.height, ds.width, seed, dir)?;
            Ok(RunArtifacts {
                dir: dir.to_path_buf(),
                metrics: out.metrics,
            })
        }
        Err(abort) => {
            write_file(&metrics_path, abort.partial.to_csv_string())?;
            write_file(&dir.join("abort.txt"), format!("{abort}\n"))?;
            Err(abort.into())
        }
    }
}

/// Runs `run_count` seeded runs. With one run the artifacts go straight to
/// `out`; otherwise each run gets `out/run_NNN` and the per-epoch
/// aggregates are written to `out/summary.csv`.
pub fn cmd_train(cfg: &ExperimentConfig, out: &Path) -> CommandResult<Vec<RunArtifacts>> {
    cfg.validate()?;
    let data = training_data(cfg)?;
    if cfg.run_count == 1 {
        return Ok(vec![train_one(&data, cfg, cfg.run_seed(0), out)?]);
    }
    create_dir(out)?;
    let results: Vec<CommandResult<RunArtifacts>> = (0..cfg.run_count)
        .into_par_iter()
        .map(|i| train_one(&data, cfg, cfg.run_seed(i), &out.join(format!("run_{i:03}"))))
        .collect();
    let runs: Vec<RunOutcome> = results
        .iter()
        .enumerate()
        .map(|(i, r)| match r {
            Ok(a) => RunOutcome::Done(a.metrics.clone()),
            Err(e) => RunOutcome::Failed {
                seed: cfg.run_seed(i),
                reason: e.to_string(),
            },
        })
        .collect();
    let rows = aggregate_runs("runs", &cfg.run_count.to_string(), &runs);
    write_file(&out.join("summary.csv"), sweep_csv_string(&rows))?;
    results.into_iter().collect()
}

/// Result of one run inside a sweep cell.
#[derive(Debug, Clone)]
pub enum RunOutcome {
    Done(RunMetrics),
    Failed { seed: u64, reason: String },
}

/// Per-epoch mean/min/max across the runs of one sweep cell. `epoch` is
/// `None` on the warning row recorded for a failed run.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub axis: String,
    pub value: String,
    pub epoch: Option<usize>,
    pub loss: [f64; 3],
    pub fid: [f64; 3],
}

pub const SWEEP_HEADER: [&str; 9] = [
    "axis", "value", "epoch", "loss_mean", "loss_min", "loss_max", "fid_mean", "fid_min", "fid_max",
];

const FAILED_EPOCH: &str = "failed";

fn mean_min_max(v: &[f64]) -> [f64; 3] {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let min = v.iter().copied().fold(f64::INFINITY, f64::min);
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    // Guard the ordering against rounding in the mean.
    [mean.clamp(min, max), min, max]
}

/// Aggregates one cell. Failed runs become warning rows and are left out
/// of the statistics.
pub fn aggregate_runs(axis: &str, value: &str, runs: &[RunOutcome]) -> Vec<SweepRow> {
    let done: Vec<&RunMetrics> = runs
        .iter()
        .filter_map(|r| match r {
            RunOutcome::Done(m) => Some(m),
            RunOutcome::Failed { .. } => None,
        })
        .collect();
    let mut rows = Vec::new();
    for r in runs {
        if let RunOutcome::Failed { seed, reason } = r {
            log::warn!("{axis}={value}: run with seed {seed} failed and is excluded: {reason}");
            rows.push(SweepRow {
                axis: axis.into(),
                value: value.into(),
                epoch: None,
                loss: [f64::NAN; 3],
                fid: [f64::NAN; 3],
            });
        }
    }
    let epochs = done.iter().map(|m| m.epochs.len()).min().unwrap_or(0);
    for e in 0..epochs {
        let loss: Vec<f64> = done.iter().map(|m| m.epochs[e].loss.total).collect();
        let fid: Vec<f64> = done.iter().map(|m| m.epochs[e].fid).collect();
        rows.push(SweepRow {
            axis: axis.into(),
            value: value.into(),
            epoch: Some(e + 1),
            loss: mean_min_max(&loss),
            fid: mean_min_max(&fid),
        });
    }
    rows
}

pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let csv_err = |e: csv::Error| Error::Contract(format!("writing sweep: {e}"));
    w.write_record(SWEEP_HEADER).map_err(csv_err)?;
    for r in rows {
        let epoch = r.epoch.map_or(FAILED_EPOCH.to_string(), |e| e.to_string());
        let mut rec = vec![r.axis.clone(), r.value.clone(), epoch];
        rec.extend(r.loss.iter().chain(&r.fid).map(|v| fmt17(*v)));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::Contract(e.to_string()))
}

pub fn sweep_csv_string(rows: &[SweepRow]) -> String {
    let mut buf = Vec::new();
    write_sweep_csv(rows, &mut buf).expect("writing to memory");
    String::from_utf8(buf).expect("csv is utf-8")
}

pub fn read_sweep_csv<R: Read>(input: R) -> Result<Vec<SweepRow>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).from_reader(input);
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 1;
        let perr = |message: String| Error::Parse { line, message };
        let rec = rec.map_err(|e| perr(e.to_string()))?;
        if i == 0 {
            if rec.iter().ne(SWEEP_HEADER) {
                return Err(perr("unexpected sweep header".into()));
            }
            continue;
        }
        if rec.len() != SWEEP_HEADER.len() {
            return Err(perr(format!("{} fields, expected {}", rec.len(), SWEEP_HEADER.len())));
        }
        let epoch = match &rec[2] {
            FAILED_EPOCH => None,
            e => Some(e.parse().map_err(|_| perr(format!("bad epoch {e:?}")))?),
        };
        let nums = (3..9)
            .map(|j| rec[j].parse::<f64>().map_err(|_| perr(format!("bad number {:?}", &rec[j]))))
            .collect::<Result<Vec<_>>>()?;
        rows.push(SweepRow {
            axis: rec[0].to_string(),
            value: rec[1].to_string(),
            epoch,
            loss: [nums[0], nums[1], nums[2]],
            fid: [nums[3], nums[4], nums[5]],
        });
    }
    Ok(rows)
}

/// One cell of a sweep: an axis name, its value, and the config it implies.
fn sweep_cells(cfg: &ExperimentConfig) -> Vec<(&'static str, String, ExperimentConfig)> {
    let mut cells = Vec::new();
    for &n in cfg.sweep_samples.iter().flatten() {
        cells.push(("samples", n.to_string(), ExperimentConfig { samples: n, ..cfg.clone() }));
    }
    for &k in cfg.sweep_layers.iter().flatten() {
        cells.push((
            "layers",
            k.to_string(),
            ExperimentConfig {
                coupling_layers: k,
                ..cfg.clone()
            },
        ));
    }
    for &r in cfg.sweep_resolution.iter().flatten() {
        cells.push(("resolution", r.to_string(), ExperimentConfig { resolution: r, ..cfg.clone() }));
    }
    cells
}

/// Runs `run_count` seeded runs for every value on every sweep axis and
/// writes `out/sweep.csv`. Only metrics are kept per run.
pub fn cmd_sweep(cfg: &ExperimentConfig, out: &Path) -> CommandResult<Vec<SweepRow>> {
    cfg.validate()?;
    let cells = sweep_cells(cfg);
    if cells.is_empty() {
        return Err(Error::Config("sweep needs one of sweep_samples, sweep_layers, sweep_resolution".into()).into());
    }
    if cells.iter().any(|(axis, _, _)| *axis == "samples") && cfg.dataset.is_some() {
        return Err(Error::Config("sweep_samples requires a synthetic dataset".into()).into());
    }
    create_dir(out)?;
    let mut rows = Vec::new();
    for (axis, value, cell) in &cells {
        let data = training_data(cell)?;
        log::info!("sweep {axis}={value}: {} runs", cell.run_count);
        let runs: Vec<RunOutcome> = (0..cell.run_count)
            .into_par_iter()
            .map(|i| {
                let tc = TrainConfig {
                    seed: cell.run_seed(i),
                    ..cell.train_config()
                };
                match train_run(&data.dataset, &data.reference, &tc) {
                    Ok(o) => RunOutcome::Done(o.metrics),
                    Err(a) => RunOutcome::Failed {
                        seed: tc.seed,
                        reason: a.to_string(),
                    },
                }
            })
            .collect();
        rows.extend(aggregate_runs(axis, value, &runs));
    }
    write_file(&out.join("sweep.csv"), sweep_csv_string(&rows))?;
    Ok(rows)
}

/// The larger-image configuration: requires 24×32 images and 8 qubits and
/// always logs the training data's nonzero-pixel ratio.
pub fn cmd_scale(cfg: &ExperimentConfig, out: &Path) -> CommandResult<Vec<RunArtifacts>> {
    let dim = match &cfg.dataset {
        Some(p) => {
            let ds = load_dataset(p)?;
            Resolution {
                height: ds.height,
                width: ds.width,
            }
        }
        None => cfg.resolution,
    };
    if dim != SCALE_RESOLUTION || cfg.n_qubits != SCALE_QUBITS {
        return Err(Error::Config(format!(
            "scale runs need resolution {SCALE_RESOLUTION} and {SCALE_QUBITS} qubits, got {dim} and {}",
            cfg.n_qubits
        ))
        .into());
    }
    let cfg = ExperimentConfig {
        log_nonzero_ratio: true,
        ..cfg.clone()
    };
    cmd_train(&cfg, out)
}

/// Default config for `scale` when no file is given.
pub fn scale_defaults() -> ExperimentConfig {
    ExperimentConfig {
        resolution: SCALE_RESOLUTION,
        n_qubits: SCALE_QUBITS,
        log_nonzero_ratio: true,
        ..ExperimentConfig::default()
    }
}

fn checkpoint_geometry(ckpt: &Checkpoint) -> (usize, usize, Option<PreprocessSpec>) {
    match &ckpt.image {
        Some(m) => (m.height, m.width, Some(m.preprocess)),
        None => (1, ckpt.model.dim(), None),
    }
}

pub const SAMPLES_CSV: &str = "samples.csv";

/// Writes `count` samples as raw detector intensities (`samples.csv`, one
/// row per sample) and as `[0, 255]` PGMs.
pub fn cmd_generate(checkpoint: &Path, count: usize, seed: u64, out: &Path) -> CommandResult<Vec<Vec<f64>>> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let (h, w, pre) = checkpoint_geometry(&ckpt);
    let images = rows_to_images(&generate_rows(&ckpt.model, count, seed)?, h, w)?;
    let raw: Vec<ImageGrid> = match pre {
        Some(p) => images.iter().map(|i| unpreprocess(i, &p)).collect(),
        None => images.clone(),
    };
    create_dir(out)?;
    let rows: Vec<Vec<f64>> = raw.iter().map(ImageGrid::flatten).collect();
    write_file(&out.join(SAMPLES_CSV), samples_csv_string(&rows, h * w))?;
    let sdir = out.join("samples");
    create_dir(&sdir)?;
    for (i, img) in images.iter().enumerate() {
        export_pgm(img, sdir.join(format!("sample_{i:04}.pgm")))?;
    }
    Ok(rows)
}

fn samples_header(d: usize) -> Vec<String> {
    std::iter::once("sample".to_string())
        .chain((0..d).map(|j| format!("p{j}")))
        .collect()
}

pub fn samples_csv_string(rows: &[Vec<f64>], d: usize) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(samples_header(d)).expect("writing to memory");
    for (i, r) in rows.iter().enumerate() {
        let rec: Vec<String> = std::iter::once(i.to_string()).chain(r.iter().map(|v| fmt17(*v))).collect();
        w.write_record(&rec).expect("writing to memory");
    }
    String::from_utf8(w.into_inner().expect("flush to memory")).expect("csv is utf-8")
}

/// Parses what [`samples_csv_string`] writes; `d` is taken from the header.
pub fn read_samples_csv<R: Read>(input: R) -> Result<Vec<Vec<f64>>> {
    let mut text = String::new();
    let mut input = input;
    input
        .read_to_string(&mut text)
        .map_err(|e| Error::Parse { line: 0, message: e.to_string() })?;
    let first = text.lines().next().ok_or_else(|| Error::Parse {
        line: 1,
        message: "empty samples file".into(),
    })?;
    let header = samples_header(first.split(',').count().saturating_sub(1));
    let refs: Vec<&str> = header.iter().map(String::as_str).collect();
    let cols = read_columns(text.as_bytes(), &refs)?;
    Ok(cols.into_iter().map(|r| r[1..].to_vec()).collect())
}

/// One line of an evaluation report.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub extractor: Extractor,
    pub fid: f64,
    pub mode_collapse_score: f64,
    pub collapse_flag: bool,
}

pub const EVAL_HEADER: [&str; 4] = ["extractor", "fid", "mode_collapse_score", "collapse_flag"];

/// FID under the identity and `pca(16)` extractors plus the mode-collapse
/// score of `count` samples against `dataset`; writes `eval.csv`.
pub fn cmd_eval(checkpoint: &Path, dataset: &Path, count: usize, seed: u64, out: &Path) -> CommandResult<Vec<EvalRow>> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let ds = load_dataset(dataset)?;
    if ds.dim() != ckpt.model.dim() {
        return Err(Error::dim(format!(
            "model has dimension {}, dataset images have {} pixels",
            ckpt.model.dim(),
            ds.dim()
        ))
        .into());
    }
    let real = ds.model_rows();
    let gen = generate_rows(&ckpt.model, count, seed)?;
    let rows = evaluate_rows(&real, &gen)?;
    create_dir(out)?;
    write_file(&out.join("eval.csv"), eval_csv_string(&rows))?;
    for r in &rows {
        println!(
            "{}: fid {:.6} mode_collapse_score {:.6}{}",
            r.extractor,
            r.fid,
            r.mode_collapse_score,
            if r.collapse_flag { " (mode collapse suspected)" } else { "" }
        );
    }
    Ok(rows)
}

/// The evaluation report for generated rows against real rows.
pub fn evaluate_rows(real: &[Vec<f64>], gen: &[Vec<f64>]) -> Result<Vec<EvalRow>> {
    let d = real.first().map_or(0, Vec::len);
    let mc = mode_collapse_score(gen, real)?;
    [Extractor::Identity, Extractor::Pca(16.min(d))]
        .into_iter()
        .map(|kind| {
            let map = FeatureMap::fit(kind, real)?;
            Ok(EvalRow {
                extractor: kind,
                fid: fid_rows(&map, real, gen)?,
                mode_collapse_score: mc,
                collapse_flag: mc < COLLAPSE_FLAG_THRESHOLD,
            })
        })
        .collect()
}

pub fn eval_csv_string(rows: &[EvalRow]) -> String {
    let mut out = EVAL_HEADER.join(",") + "\n";
    for r in rows {
        out += &format!(
            "{},{},{},{}\n",
            r.extractor,
            fmt17(r.fid),
            fmt17(r.mode_collapse_score),
            r.collapse_flag
        );
    }
    out
}

/// Parses what [`eval_csv_string`] writes.
pub fn read_eval_csv<R: Read>(input: R) -> Result<Vec<EvalRow>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).from_reader(input);
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 1;
        let perr = |message: String| Error::Parse { line, message };
        let rec = rec.map_err(|e| perr(e.to_string()))?;
        if i == 0 {
            if rec.iter().ne(EVAL_HEADER) {
                return Err(perr("unexpected eval header".into()));
            }
            continue;
        }
        if rec.len() != EVAL_HEADER.len() {
            return Err(perr(format!("{} fields, expected {}", rec.len(), EVAL_HEADER.len())));
        }
        let num = |j: usize| rec[j].parse::<f64>().map_err(|_| perr(format!("bad number {:?}", &rec[j])));
        rows.push(EvalRow {
            extractor: rec[0].parse().map_err(|e: Error| perr(e.to_string()))?,
            fid: num(1)?,
            mode_collapse_score: num(2)?,
            collapse_flag: rec[3].parse().map_err(|_| perr(format!("bad flag {:?}", &rec[3])))?,
        });
    }
    Ok(rows)
}

/// Summary statistics compared side by side by `analyze`.
pub const COMPARISON_HEADER: [&str; 3] = ["metric", "a", "b"];

fn comparison_metrics(r: &ComplexityReport) -> Vec<(&'static str, f64)> {
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
    let std = |v: &[f64]| {
        let m = mean(v);
        (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len().max(1) as f64).sqrt()
    };
    let ratios = &r.pca_explained_variance;
    let mut acc = 0.0;
    let to_90 = ratios
        .iter()
        .position(|v| {
            acc += v;
            acc >= 0.9
        })
        .map_or(ratios.len(), |i| i + 1);
    vec![
        ("entropy_mean", mean(&r.entropy_values)),
        ("entropy_std", std(&r.entropy_values)),
        ("fractal_dim_mean", mean(&r.fractal_dims)),
        ("fractal_dim_std", std(&r.fractal_dims)),
        ("pca_first_ratio", ratios.first().copied().unwrap_or(f64::NAN)),
        ("pca_components_90", to_90 as f64),
    ]
}

pub fn comparison_csv_string(a: &ComplexityReport, b: &ComplexityReport) -> String {
    let mut out = COMPARISON_HEADER.join(",") + "\n";
    for ((name, va), (_, vb)) in comparison_metrics(a).into_iter().zip(comparison_metrics(b)) {
        out += &format!("{name},{},{}\n", fmt17(va), fmt17(vb));
    }
    out
}

/// Complexity reports for one dataset (`per_image.csv`, `pca.csv`) or two
/// (`a_*.csv`, `b_*.csv`, and `comparison.csv`).
pub fn cmd_analyze(dataset: &Path, compare: Option<&Path>, out: &Path) -> CommandResult<Vec<ComplexityReport>> {
    create_dir(out)?;
    let a = ComplexityReport::compute(&load_dataset(dataset)?.images)?;
    let Some(second) = compare else {
        a.save(out.join("per_image.csv"), out.join("pca.csv"))?;
        return Ok(vec![a]);
    };
    let b = ComplexityReport::compute(&load_dataset(second)?.images)?;
    a.save(out.join("a_per_image.csv"), out.join("a_pca.csv"))?;
    b.save(out.join("b_per_image.csv"), out.join("b_pca.csv"))?;
    write_file(&out.join("comparison.csv"), comparison_csv_string(&a, &b))?;
    Ok(vec![a, b])
}

/// Writes the configured synthetic dataset to `out/dataset.csv`.
pub fn cmd_synth(cfg: &ExperimentConfig, out: &Path) -> CommandResult<Dataset> {
    cfg.validate()?;
    let r = cfg.resolution;
    let ds = synthetic_dataset(&cfg.synth_spec(), r.height, r.width, cfg.bias)?;
    create_dir(out)?;
    save_dataset(&ds, out.join("dataset.csv"))?;
    Ok(ds)
}

#[derive(Debug, Parser)]
#[command(name = "hqcnf", version, about = "Hybrid quantum-classical normalizing flows for detector images")]
pub struct Cli {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// JSON config file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Base seed; overrides the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; overrides the config.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write metrics, checkpoint and sample images.
    Train,
    /// Repeat training across sweep axes and aggregate per epoch.
    Sweep,
    /// Draw samples from a checkpoint.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 20)]
        count: usize,
    },
    /// FID and mode-collapse score of a checkpoint against a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value_t = 100)]
        count: usize,
    },
    /// Entropy, fractal dimension and PCA of one or two datasets.
    Analyze {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        compare: Option<PathBuf>,
    },
    /// Train at 24x32 with 8 qubits.
    Scale,
    /// Write a synthetic dataset CSV.
    Synth,
}

fn resolve_config(common: &CommonArgs, fallback: ExperimentConfig) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => fallback,
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if common.workers.is_some() {
        cfg.workers = common.workers;
    }
    if common.out.is_some() {
        cfg.out = common.out.clone();
    }
    Ok(cfg)
}

fn dispatch(cli: &Cli) -> CommandResult<()> {
    let fallback = match cli.command {
        Command::Scale => scale_defaults(),
        _ => ExperimentConfig::default(),
    };
    let cfg = resolve_config(&cli.common, fallback)?;
    let out = cfg.out.clone().unwrap_or_else(|| PathBuf::from("hqcnf-out"));
    let seed = cfg.seed;
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(w) = cfg.workers {
        if w == 0 {
            return Err(Error::Config("workers must be >= 1".into()).into());
        }
        pool = pool.num_threads(w);
    }
    let pool = pool
        .build()
        .map_err(|e| CommandError::Runtime(Error::Contract(format!("thread pool: {e}"))))?;
    pool.install(|| match &cli.command {
        Command::Train => cmd_train(&cfg, &out).map(drop),
        Command::Sweep => cmd_sweep(&cfg, &out).map(drop),
        Command::Scale => cmd_scale(&cfg, &out).map(drop),
        Command::Synth => cmd_synth(&cfg, &out).map(drop),
        Command::Generate { checkpoint, count } => cmd_generate(checkpoint, *count, seed, &out).map(drop),
        Command::Eval {
            checkpoint,
            dataset,
            count,
        } => cmd_eval(checkpoint, dataset, *count, seed, &out).map(drop),
        Command::Analyze { dataset, compare } => cmd_analyze(dataset, compare.as_deref(), &out).map(drop),
    })
}

/// Parses `args` (including the program name), runs the command, and
/// returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
