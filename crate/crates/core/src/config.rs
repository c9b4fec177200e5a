//! Sweep configuration files.
//!
//! Line-oriented `key = value` text with `[section]` headers. `#` starts a
//! comment. Values may be comma-separated lists where noted.
//!
//! ```text
//! [sweep]                      # optional, at most once, before any task
//! variants = VQC, FWP_Both     # default: all seven
//! seeds = 0, 1, 2, 3, 4
//! depth = 2
//! epochs = 40
//! batch_size = 20
//! n_train = 200
//! n_test = 100
//! latent_dim = 16
//! precision = double           # or single
//! lr_circuit = 0.01
//! lr_observable = 0.1
//! lr_controller = 0.01
//!
//! [task moons]
//! noise = 0.1, 0.2, 0.3
//! n_qubits = 4                 # optional, default 4
//!
//! [task circles]
//! noise = 0.05
//! factor = 0.5
//!
//! [task blobs]
//! d = 8, 10, 12                # n_qubits defaults to d
//! class_sep = 1.0
//! ```
//!
//! Every task section also accepts `n_qubits` and `precision`, overriding
//! the sweep-wide value for that section.
//!
//! Expansion order: task sections in file order, each section's list in
//! listed order, then variants in listed order.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{io_err, QmlError, Result};
use crate::experiment::{ExperimentConfig, TaskSpec};
use crate::models::{LearningRates, VariantKind};
use crate::neural::Precision;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SweepSpec {
    pub configs: Vec<ExperimentConfig>,
}

impl SweepSpec {
    pub fn is_empty(&self) -> bool {
        self.configs.is_empty()
    }

    pub fn len(&self) -> usize {
        self.configs.len()
    }

    pub fn with_out_dir(mut self, dir: &Path) -> Self {
        for c in &mut self.configs {
            c.out_dir = dir.to_path_buf();
        }
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Family {
    Moons,
    Circles,
    Blobs,
}

#[derive(Debug)]
struct TaskSection {
    line: usize,
    family: Family,
    noise: Vec<f64>,
    factor: f64,
    d: Vec<usize>,
    class_sep: f64,
    n_qubits: Option<usize>,
    precision: Option<Precision>,
}

impl TaskSection {
    fn new(line: usize, family: Family) -> Self {
        Self {
            line,
            family,
            noise: Vec::new(),
            factor: TaskSpec::CIRCLES_FACTOR,
            d: Vec::new(),
            class_sep: TaskSpec::BLOBS_CLASS_SEP,
            n_qubits: None,
            precision: None,
        }
    }

    fn tasks(&self) -> std::result::Result<Vec<TaskSpec>, String> {
        match self.family {
            Family::Moons | Family::Circles if self.noise.is_empty() => Err("task section needs 'noise'".into()),
            Family::Blobs if self.d.is_empty() => Err("blobs section needs 'd'".into()),
            Family::Moons => Ok(self.noise.iter().map(|&noise| TaskSpec::Moons { noise }).collect()),
            Family::Circles => Ok(self
                .noise
                .iter()
                .map(|&noise| TaskSpec::Circles {
                    noise,
                    factor: self.factor,
                })
                .collect()),
            Family::Blobs => Ok(self
                .d
                .iter()
                .map(|&d| TaskSpec::Blobs {
                    d,
                    class_sep: self.class_sep,
                })
                .collect()),
        }
    }
}

struct Defaults {
    variants: Vec<VariantKind>,
    seeds: Vec<u64>,
    depth: usize,
    epochs: usize,
    batch_size: usize,
    n_train: usize,
    n_test: usize,
    latent_dim: usize,
    precision: Precision,
    rates: LearningRates,
}

impl Default for Defaults {
    fn default() -> Self {
        let base = ExperimentConfig::new(TaskSpec::moons(0.0), VariantKind::Vqc);
        Self {
            variants: VariantKind::ALL.to_vec(),
            seeds: base.seeds,
            depth: base.depth,
            epochs: base.epochs,
            batch_size: base.batch_size,
            n_train: base.n_train,
            n_test: base.n_test,
            latent_dim: base.latent_dim,
            precision: base.precision,
            rates: base.rates,
        }
    }
}

enum Section {
    None,
    Sweep,
    Task(usize),
}

fn parse_list<T: FromStr>(value: &str) -> std::result::Result<Vec<T>, String>
where
    T::Err: std::fmt::Display,
{
    let items: Vec<&str> = value.split(',').map(str::trim).collect();
    if items.iter().any(|s| s.is_empty()) {
        return Err(format!("empty item in list '{value}'"));
    }
    items
        .into_iter()
        .map(|s| s.parse::<T>().map_err(|e| format!("invalid value '{s}': {e}")))
        .collect()
}

fn parse_one<T: FromStr>(value: &str) -> std::result::Result<T, String>
where
    T::Err: std::fmt::Display,
{
    let mut items = parse_list::<T>(value)?;
    match items.len() {
        1 => Ok(items.remove(0)),
        _ => Err(format!("expected a single value, got '{value}'")),
    }
}

fn parse_precision(value: &str) -> std::result::Result<Precision, String> {
    match value.trim() {
        "double" => Ok(Precision::Double),
        "single" => Ok(Precision::Single),
        other => Err(format!("precision must be 'double' or 'single', got '{other}'")),
    }
}

/// Parses config text. `origin` is only used in error messages.
pub fn parse_config_str(text: &str, origin: &Path) -> Result<SweepSpec> {
    let err = |line: usize, message: String| QmlError::Parse {
        path: origin.to_path_buf(),
        line,
        message,
    };
    let mut defaults = Defaults::default();
    let mut tasks: Vec<TaskSection> = Vec::new();
    let mut section = Section::None;
    let mut seen_sweep = false;

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(header) = line.strip_prefix('[') {
            let header = header
                .strip_suffix(']')
                .ok_or_else(|| err(line_no, format!("unterminated section header '{line}'")))?
                .trim();
            let words: Vec<&str> = header.split_whitespace().collect();
            section = match words.as_slice() {
                ["sweep"] if seen_sweep => return Err(err(line_no, "duplicate [sweep] section".into())),
                ["sweep"] if !tasks.is_empty() => {
                    return Err(err(line_no, "[sweep] must precede task sections".into()))
                }
                ["sweep"] => {
                    seen_sweep = true;
                    Section::Sweep
                }
                ["task", family] => {
                    let family = match *family {
                        "moons" => Family::Moons,
                        "circles" => Family::Circles,
                        "blobs" => Family::Blobs,
                        other => {
                            return Err(err(
                                line_no,
                                format!("unknown task family '{other}'; expected moons, circles or blobs"),
                            ))
                        }
                    };
                    tasks.push(TaskSection::new(line_no, family));
                    Section::Task(tasks.len() - 1)
                }
                _ => return Err(err(line_no, format!("unknown section '[{header}]'"))),
            };
            continue;
        }

        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| err(line_no, format!("expected 'key = value', got '{line}'")))?;
        let (key, value) = (key.trim(), value.trim());
        if value.is_empty() {
            return Err(err(line_no, format!("missing value for '{key}'")));
        }
        let result: std::result::Result<(), String> = match section {
            Section::None => Err(format!("'{key}' appears before any section header")),
            Section::Sweep => {
                let d = &mut defaults;
                match key {
                    "variants" => value
                        .split(',')
                        .map(|s| s.trim().parse::<VariantKind>().map_err(|e| e.to_string()))
                        .collect::<std::result::Result<Vec<_>, _>>()
                        .map(|v| d.variants = v),
                    "seeds" => parse_list(value).map(|v| d.seeds = v),
                    "depth" => parse_one(value).map(|v| d.depth = v),
                    "epochs" => parse_one(value).map(|v| d.epochs = v),
                    "batch_size" => parse_one(value).map(|v| d.batch_size = v),
                    "n_train" => parse_one(value).map(|v| d.n_train = v),
                    "n_test" => parse_one(value).map(|v| d.n_test = v),
                    "latent_dim" => parse_one(value).map(|v| d.latent_dim = v),
                    "precision" => parse_precision(value).map(|v| d.precision = v),
                    "lr_circuit" => parse_one(value).map(|v| d.rates.circuit = v),
                    "lr_observable" => parse_one(value).map(|v| d.rates.observable = v),
                    "lr_controller" => parse_one(value).map(|v| d.rates.controller = v),
                    _ => Err(format!("unknown key '{key}' in [sweep]")),
                }
            }
            Section::Task(i) => {
                let t = &mut tasks[i];
                match (key, t.family) {
                    ("noise", Family::Moons | Family::Circles) => parse_list(value).map(|v| t.noise = v),
                    ("factor", Family::Circles) => parse_one(value).map(|v| t.factor = v),
                    ("d", Family::Blobs) => parse_list(value).map(|v| t.d = v),
                    ("class_sep", Family::Blobs) => parse_one(value).map(|v| t.class_sep = v),
                    ("n_qubits", _) => parse_one(value).map(|v| t.n_qubits = Some(v)),
                    ("precision", _) => parse_precision(value).map(|v| t.precision = Some(v)),
                    _ => Err(format!("unknown key '{key}' for this task family")),
                }
            }
        };
        result.map_err(|m| err(line_no, m))?;
    }

    let mut configs = Vec::new();
    for section in &tasks {
        for task in section.tasks().map_err(|m| err(section.line, m))? {
            for &variant in &defaults.variants {
                let mut cfg = ExperimentConfig::new(task, variant);
                cfg.n_qubits = section.n_qubits.unwrap_or_else(|| task.default_qubits());
                cfg.seeds = defaults.seeds.clone();
                cfg.depth = defaults.depth;
                cfg.epochs = defaults.epochs;
                cfg.batch_size = defaults.batch_size;
                cfg.n_train = defaults.n_train;
                cfg.n_test = defaults.n_test;
                cfg.latent_dim = defaults.latent_dim;
                cfg.precision = section.precision.unwrap_or(defaults.precision);
                cfg.rates = defaults.rates;
                cfg.validate().map_err(|e| err(section.line, format!("{}: {e}", cfg.id())))?;
                configs.push(cfg);
            }
        }
    }
    Ok(SweepSpec { configs })
}

pub fn parse_config(path: &Path) -> Result<SweepSpec> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_config_str(&text, path)
}

/// Directory searched by tests and tools for the shipped configs.
pub fn shipped_config_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}
