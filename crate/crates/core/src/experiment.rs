//! Training loop, evaluation, multi-seed aggregation and result files.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{make_blob_classification, make_circles, make_moons, split_and_standardize, Dataset, Prng};
use crate::error::{invalid, io_err, QmlError, Result};
use crate::models::{LearningRates, Model, ModelSpec, VariantKind};
use crate::neural::Precision;
use crate::numfmt::g17;
use crate::qstate::{AnsatzConfig, DEFAULT_MAX_QUBITS};

/// Samples generated per dataset before the train/test split.
pub const DATASET_SIZE: usize = 300;

/// Test samples evaluated per forward batch.
const EVAL_CHUNK: usize = 50;

// Independent PRNG streams per seed. The dataset and split streams do not
// depend on the variant, so every variant sees the same data for a seed.
const STREAM_DATA: u64 = 1;
const STREAM_SPLIT: u64 = 2;
const STREAM_MODEL: u64 = 3;
const STREAM_SHUFFLE: u64 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum TaskSpec {
    Moons { noise: f64 },
    Circles { noise: f64, factor: f64 },
    Blobs { d: usize, class_sep: f64 },
}

impl TaskSpec {
    pub const CIRCLES_FACTOR: f64 = 0.5;
    pub const BLOBS_CLASS_SEP: f64 = 1.0;

    pub fn moons(noise: f64) -> Self {
        TaskSpec::Moons { noise }
    }

    pub fn circles(noise: f64) -> Self {
        TaskSpec::Circles {
            noise,
            factor: Self::CIRCLES_FACTOR,
        }
    }

    pub fn blobs(d: usize) -> Self {
        TaskSpec::Blobs {
            d,
            class_sep: Self::BLOBS_CLASS_SEP,
        }
    }

    /// Short label used in file names and CSV rows, e.g. `moons-0.1`, `blobs-d10`.
    pub fn label(&self) -> String {
        match *self {
            TaskSpec::Moons { noise } => format!("moons-{noise}"),
            TaskSpec::Circles { noise, factor } if factor == Self::CIRCLES_FACTOR => format!("circles-{noise}"),
            TaskSpec::Circles { noise, factor } => format!("circles-{noise}-f{factor}"),
            TaskSpec::Blobs { d, class_sep } if class_sep == Self::BLOBS_CLASS_SEP => format!("blobs-d{d}"),
            TaskSpec::Blobs { d, class_sep } => format!("blobs-d{d}-sep{class_sep}"),
        }
    }

    pub fn feature_dim(&self) -> usize {
        match *self {
            TaskSpec::Moons { .. } | TaskSpec::Circles { .. } => 2,
            TaskSpec::Blobs { d, .. } => d,
        }
    }

    /// Qubit count used when a config does not set one.
    pub fn default_qubits(&self) -> usize {
        match *self {
            TaskSpec::Moons { .. } | TaskSpec::Circles { .. } => 4,
            TaskSpec::Blobs { d, .. } => d,
        }
    }

    pub fn generate(&self, n: usize, rng: &mut Prng) -> Result<Dataset> {
        match *self {
            TaskSpec::Moons { noise } => make_moons(n, noise, rng),
            TaskSpec::Circles { noise, factor } => make_circles(n, noise, factor, rng),
            TaskSpec::Blobs { d, class_sep } => make_blob_classification(n, d, class_sep, rng),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub task: TaskSpec,
    pub variant: VariantKind,
    pub n_qubits: usize,
    pub depth: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub rates: LearningRates,
    pub latent_dim: usize,
    pub precision: Precision,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn new(task: TaskSpec, variant: VariantKind) -> Self {
        Self {
            task,
            variant,
            n_qubits: task.default_qubits(),
            depth: 2,
            epochs: 40,
            batch_size: 20,
            n_train: 200,
            n_test: 100,
            rates: LearningRates::default(),
            latent_dim: 16,
            precision: Precision::Double,
            seeds: (0..5).collect(),
            out_dir: PathBuf::from("results"),
        }
    }

    /// `<task>_<variant>`, used in output file names.
    pub fn id(&self) -> String {
        format!("{}_{}", self.task.label(), self.variant.name())
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_qubits == 0 || self.n_qubits > DEFAULT_MAX_QUBITS {
            return Err(invalid(format!(
                "n_qubits must be in 1..={DEFAULT_MAX_QUBITS}, got {}",
                self.n_qubits
            )));
        }
        if self.depth == 0 {
            return Err(invalid("depth must be positive"));
        }
        if self.batch_size == 0 || !self.n_train.is_multiple_of(self.batch_size) {
            return Err(invalid(format!(
                "batch size {} must divide n_train {}",
                self.batch_size, self.n_train
            )));
        }
        if self.n_test == 0 {
            return Err(invalid("n_test must be positive"));
        }
        if self.n_train + self.n_test > DATASET_SIZE {
            return Err(invalid(format!(
                "n_train + n_test must not exceed {DATASET_SIZE}, got {}",
                self.n_train + self.n_test
            )));
        }
        if self.seeds.is_empty() {
            return Err(invalid("at least one seed is required"));
        }
        if self.latent_dim == 0 {
            return Err(invalid("latent_dim must be positive"));
        }
        for (name, r) in [
            ("circuit", self.rates.circuit),
            ("observable", self.rates.observable),
            ("controller", self.rates.controller),
        ] {
            if !(r.is_finite() && r > 0.0) {
                return Err(invalid(format!("{name} learning rate must be positive, got {r}")));
            }
        }
        match self.task {
            TaskSpec::Moons { noise } | TaskSpec::Circles { noise, .. } if !(noise.is_finite() && noise >= 0.0) => {
                Err(invalid(format!("noise must be finite and non-negative, got {noise}")))
            }
            TaskSpec::Circles { factor, .. } if !(factor > 0.0 && factor < 1.0) => {
                Err(invalid(format!("circles factor must be in (0, 1), got {factor}")))
            }
            TaskSpec::Blobs { d, .. } if d < 2 => Err(invalid(format!("blobs need d >= 2, got {d}"))),
            TaskSpec::Blobs { class_sep, .. } if !(class_sep.is_finite() && class_sep >= 0.0) => {
                Err(invalid(format!("class_sep must be finite and non-negative, got {class_sep}")))
            }
            _ => Ok(()),
        }
    }

    pub fn model_spec(&self) -> Result<ModelSpec> {
        let mut spec = ModelSpec::new(
            self.variant,
            AnsatzConfig::new(self.n_qubits, self.depth)?,
            self.task.feature_dim(),
        );
        spec.latent_dim = self.latent_dim;
        spec.rates = self.rates;
        spec.precision = self.precision;
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunHistory {
    pub seed: u64,
    pub train_loss: Vec<f64>,
    pub test_acc: Vec<f64>,
    pub wall_seconds: f64,
}

impl RunHistory {
    pub fn epochs(&self) -> usize {
        self.train_loss.len()
    }
}

/// Standardized train and test sets for one seed.
pub fn prepare_data(cfg: &ExperimentConfig, seed: u64) -> Result<(Dataset, Dataset)> {
    let ds = cfg.task.generate(DATASET_SIZE, &mut Prng::new(seed, STREAM_DATA))?;
    let (train, test, _) = split_and_standardize(&ds, cfg.n_train, cfg.n_test, &mut Prng::new(seed, STREAM_SPLIT))?;
    Ok((train, test))
}

/// Fraction of samples where `p >= 0.5` matches the label.
pub fn evaluate(model: &Model, test: &Dataset) -> Result<f64> {
    if test.is_empty() {
        return Err(invalid("cannot evaluate on an empty test set"));
    }
    let mut correct = 0usize;
    for (xs, ys) in test.features.chunks(EVAL_CHUNK).zip(test.labels.chunks(EVAL_CHUNK)) {
        let refs: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
        for (cache, &y) in model.forward_batch(&refs)?.iter().zip(ys) {
            let predicted = u8::from(cache.probability >= 0.5);
            correct += usize::from(predicted == y);
        }
    }
    Ok(correct as f64 / test.len() as f64)
}

pub fn train_one_seed(cfg: &ExperimentConfig, seed: u64) -> Result<RunHistory> {
    train_one_seed_with(cfg, seed, |_, _| {})
}

/// Like [`train_one_seed`], calling `on_epoch(epoch, model)` after every epoch.
pub fn train_one_seed_with<F>(cfg: &ExperimentConfig, seed: u64, mut on_epoch: F) -> Result<RunHistory>
where
    F: FnMut(usize, &Model),
{
    cfg.validate()?;
    let start = Instant::now();
    let (train, test) = prepare_data(cfg, seed)?;
    let mut model = Model::init(cfg.model_spec()?, &mut Prng::new(seed, STREAM_MODEL))?;
    let mut shuffle = Prng::new(seed, STREAM_SHUFFLE);
    let mut grads = model.zero_gradients();
    let mut history = RunHistory {
        seed,
        train_loss: Vec::with_capacity(cfg.epochs),
        test_acc: Vec::with_capacity(cfg.epochs),
        wall_seconds: 0.0,
    };

    for epoch in 1..=cfg.epochs {
        let order = shuffle.permutation(train.len());
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let xs: Vec<&[f64]> = batch.iter().map(|&i| train.features[i].as_slice()).collect();
            let ys: Vec<f64> = batch.iter().map(|&i| f64::from(train.labels[i])).collect();
            grads.clear();
            let caches = model.forward_batch(&xs)?;
            loss_sum += model.accumulate_gradients(&caches, &ys, &mut grads)?;
            model.step(&grads, batch.len())?;
        }
        let loss = loss_sum / train.len() as f64;
        if !loss.is_finite() {
            return Err(QmlError::Numerical(format!(
                "{} seed {seed}: non-finite training loss at epoch {epoch}",
                cfg.id()
            )));
        }
        let acc = evaluate(&model, &test)?;
        log::debug!("{} seed {seed} epoch {epoch}: loss {loss:.4} acc {acc:.3}", cfg.id());
        history.train_loss.push(loss);
        history.test_acc.push(acc);
        on_epoch(epoch, &model);
    }
    history.wall_seconds = start.elapsed().as_secs_f64();
    Ok(history)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss_mean: f64,
    pub loss_std: f64,
    pub acc_mean: f64,
    pub acc_std: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentResult {
    pub config: ExperimentConfig,
    pub histories: Vec<RunHistory>,
    pub summary: Vec<EpochStats>,
}

impl ExperimentResult {
    pub fn final_epoch(&self) -> Option<&EpochStats> {
        self.summary.last()
    }
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn aggregate(histories: &[RunHistory]) -> Result<Vec<EpochStats>> {
    let Some(first) = histories.first() else {
        return Err(invalid("no histories to aggregate"));
    };
    let epochs = first.epochs();
    if histories.iter().any(|h| h.epochs() != epochs) {
        return Err(invalid("histories have different epoch counts"));
    }
    Ok((0..epochs)
        .map(|e| {
            let losses: Vec<f64> = histories.iter().map(|h| h.train_loss[e]).collect();
            let accs: Vec<f64> = histories.iter().map(|h| h.test_acc[e]).collect();
            let (loss_mean, loss_std) = mean_std(&losses);
            let (acc_mean, acc_std) = mean_std(&accs);
            EpochStats {
                epoch: e + 1,
                loss_mean,
                loss_std,
                acc_mean,
                acc_std,
            }
        })
        .collect())
}

/// Trains every seed (in parallel on the current rayon pool) and aggregates.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    cfg.validate()?;
    let histories = cfg
        .seeds
        .par_iter()
        .map(|&seed| train_one_seed(cfg, seed))
        .collect::<Result<Vec<_>>>()?;
    let summary = aggregate(&histories)?;
    Ok(ExperimentResult {
        config: cfg.clone(),
        histories,
        summary,
    })
}

pub const HISTORY_HEADER: &str = "variant,task,seed,epoch,train_loss,test_acc";
pub const SUMMARY_HEADER: &str = "variant,task,epoch,loss_mean,loss_std,acc_mean,acc_std";

pub fn history_csv(result: &ExperimentResult) -> String {
    let cfg = &result.config;
    let (variant, task) = (cfg.variant.name(), cfg.task.label());
    let mut out = format!("{HISTORY_HEADER}\n");
    for h in &result.histories {
        for (e, (loss, acc)) in h.train_loss.iter().zip(&h.test_acc).enumerate() {
            let _ = writeln!(out, "{variant},{task},{},{},{},{}", h.seed, e + 1, g17(*loss), g17(*acc));
        }
    }
    out
}

pub fn summary_rows(result: &ExperimentResult) -> String {
    let cfg = &result.config;
    let (variant, task) = (cfg.variant.name(), cfg.task.label());
    let mut out = String::new();
    for s in &result.summary {
        let _ = writeln!(
            out,
            "{variant},{task},{},{},{},{},{}",
            s.epoch,
            g17(s.loss_mean),
            g17(s.loss_std),
            g17(s.acc_mean),
            g17(s.acc_std)
        );
    }
    out
}

pub fn summary_csv(result: &ExperimentResult) -> String {
    format!("{SUMMARY_HEADER}\n{}", summary_rows(result))
}

#[derive(Serialize)]
struct Manifest<'a> {
    id: String,
    config: &'a ExperimentConfig,
}

/// Writes the history, summary and manifest files into `dir`, returning their paths.
pub fn write_outputs(result: &ExperimentResult, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let id = result.config.id();
    let manifest = serde_json::to_string_pretty(&Manifest {
        id: id.clone(),
        config: &result.config,
    })? + "\n";
    let files = [
        (format!("history_{id}.csv"), history_csv(result)),
        (format!("summary_{id}.csv"), summary_csv(result)),
        (format!("manifest_{id}.json"), manifest),
    ];
    let mut paths = Vec::with_capacity(files.len());
    for (name, contents) in files {
        let path = dir.join(name);
        fs::write(&path, contents).map_err(io_err(&path))?;
        paths.push(path);
    }
    Ok(paths)
}
