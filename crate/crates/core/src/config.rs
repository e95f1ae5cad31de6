//! Experiment configuration files.
//!
//! ```text
//! # comment
//! [experiment]
//! name = "mlp-4bit"
//! seed = 0
//!
//! [data]
//! source = mnist_like
//! n = 5000
//!
//! [model]
//! kind = mlp
//! hidden = 256
//!
//! [train]
//! mode = fixed
//! bits = 4
//! lambda_dz = 0.01
//! ```
//!
//! Values are typed by their lexical form: `true`/`false` are booleans,
//! integer literals are integers, other numeric literals are reals, and
//! everything else (quoted or bare) is a string. Integers are accepted where a
//! real is expected. Unknown sections and keys are rejected.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{self, Dataset};
use crate::error::{CodeqError, Result};
use crate::models::{build_mini_cnn, build_mlp, Model};
use crate::trainer::{TrainConfig, TrainMode};

#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Int(i64),
    Real(f64),
    Bool(bool),
    Str(String),
}

impl Value {
    pub fn lex(raw: &str) -> Value {
        let raw = raw.trim();
        if raw.len() >= 2 && raw.starts_with('"') && raw.ends_with('"') {
            return Value::Str(raw[1..raw.len() - 1].to_string());
        }
        match raw {
            "true" => return Value::Bool(true),
            "false" => return Value::Bool(false),
            _ => {}
        }
        if let Ok(i) = raw.parse::<i64>() {
            return Value::Int(i);
        }
        let numeric = raw.chars().next().is_some_and(|c| c.is_ascii_digit() || "+-.".contains(c));
        match raw.parse::<f64>() {
            Ok(r) if numeric && r.is_finite() => Value::Real(r),
            _ => Value::Str(raw.to_string()),
        }
    }

    fn type_name(&self) -> &'static str {
        match self {
            Value::Int(_) => "integer",
            Value::Real(_) => "real",
            Value::Bool(_) => "boolean",
            Value::Str(_) => "string",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Entry {
    value: Value,
    /// 1-based source line; 0 for command-line overrides.
    line: usize,
}

/// Untyped `section.key → value` map as read from a file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RawConfig {
    entries: BTreeMap<String, Entry>,
}

fn parse_err(line: usize, message: impl Into<String>) -> CodeqError {
    CodeqError::ConfigParse {
        line,
        message: message.into(),
    }
}

impl RawConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        let mut section: Option<String> = None;
        for (i, raw_line) in text.lines().enumerate() {
            let line = i + 1;
            let content = strip_comment(raw_line).trim();
            if content.is_empty() {
                continue;
            }
            if let Some(rest) = content.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| parse_err(line, format!("unterminated section header {content:?}")))?
                    .trim();
                if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
                    return Err(parse_err(line, format!("invalid section name {name:?}")));
                }
                section = Some(name.to_string());
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| parse_err(line, format!("expected `key = value`, found {content:?}")))?;
            let key = key.trim();
            if key.is_empty() || !key.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
                return Err(parse_err(line, format!("invalid key {key:?}")));
            }
            let Some(sec) = &section else {
                return Err(parse_err(line, format!("key {key:?} appears before any [section]")));
            };
            let full = format!("{sec}.{key}");
            let entry = Entry {
                value: Value::lex(value),
                line,
            };
            if let Some(prev) = entries.insert(full.clone(), entry) {
                return Err(parse_err(line, format!("duplicate key {full} (first set on line {})", prev.line)));
            }
        }
        Ok(Self { entries })
    }

    /// Apply `section.key=value`.
    pub fn apply_override(&mut self, spec: &str) -> Result<()> {
        let (key, value) = spec
            .split_once('=')
            .ok_or_else(|| CodeqError::Config(format!("override {spec:?} is not of the form section.key=value")))?;
        let key = key.trim();
        if key.split('.').count() != 2 || key.split('.').any(str::is_empty) {
            return Err(CodeqError::Config(format!("override key {key:?} must be section.key")));
        }
        self.entries.insert(
            key.to_string(),
            Entry {
                value: Value::lex(value),
                line: 0,
            },
        );
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&Value> {
        self.entries.get(key).map(|e| &e.value)
    }
}

fn strip_comment(line: &str) -> &str {
    let mut in_quotes = false;
    for (i, c) in line.char_indices() {
        match c {
            '"' => in_quotes = !in_quotes,
            '#' | ';' if !in_quotes => return &line[..i],
            _ => {}
        }
    }
    line
}

/// Typed reader that records which keys were consumed.
struct Reader<'a> {
    raw: &'a RawConfig,
    used: Vec<&'static str>,
}

impl<'a> Reader<'a> {
    fn err(&self, key: &str, message: String) -> CodeqError {
        match self.raw.entries.get(key) {
            Some(e) if e.line > 0 => parse_err(e.line, format!("{key}: {message}")),
            _ => CodeqError::Config(format!("{key}: {message}")),
        }
    }

    fn value(&mut self, key: &'static str) -> Option<&'a Value> {
        self.used.push(key);
        self.raw.get(key)
    }

    fn f64(&mut self, key: &'static str, default: f64) -> Result<f64> {
        match self.value(key) {
            None => Ok(default),
            Some(Value::Real(v)) => Ok(*v),
            Some(Value::Int(v)) => Ok(*v as f64),
            Some(other) => Err(self.err(key, format!("expected a number, found {}", other.type_name()))),
        }
    }

    fn u64(&mut self, key: &'static str, default: u64) -> Result<u64> {
        match self.value(key) {
            None => Ok(default),
            Some(Value::Int(v)) if *v >= 0 => Ok(*v as u64),
            Some(Value::Int(v)) => Err(self.err(key, format!("expected a non-negative integer, found {v}"))),
            Some(other) => Err(self.err(key, format!("expected an integer, found {}", other.type_name()))),
        }
    }

    fn usize(&mut self, key: &'static str, default: usize) -> Result<usize> {
        self.u64(key, default as u64).map(|v| v as usize)
    }

    fn u32(&mut self, key: &'static str, default: u32) -> Result<u32> {
        let v = self.u64(key, u64::from(default))?;
        u32::try_from(v).map_err(|_| self.err(key, format!("{v} is too large")))
    }

    fn bool(&mut self, key: &'static str, default: bool) -> Result<bool> {
        match self.value(key) {
            None => Ok(default),
            Some(Value::Bool(b)) => Ok(*b),
            Some(other) => Err(self.err(key, format!("expected a boolean, found {}", other.type_name()))),
        }
    }

    fn string(&mut self, key: &'static str) -> Result<Option<String>> {
        match self.value(key) {
            None => Ok(None),
            Some(Value::Str(s)) => Ok(Some(s.clone())),
            Some(other) => Err(self.err(key, format!("expected a string, found {}", other.type_name()))),
        }
    }

    fn required_string(&mut self, key: &'static str) -> Result<String> {
        self.string(key)?
            .ok_or_else(|| CodeqError::Config(format!("missing required key {key}")))
    }

    fn path(&mut self, key: &'static str) -> Result<Option<PathBuf>> {
        Ok(self.string(key)?.map(PathBuf::from))
    }

    fn list(&mut self, key: &'static str, default: &[usize]) -> Result<Vec<usize>> {
        match self.value(key) {
            None => Ok(default.to_vec()),
            Some(Value::Int(v)) if *v > 0 => Ok(vec![*v as usize]),
            Some(Value::Str(s)) if s.trim().is_empty() => Ok(Vec::new()),
            Some(Value::Str(s)) => s
                .split(',')
                .map(|p| p.trim().parse::<usize>().ok().filter(|&v| v > 0))
                .collect::<Option<Vec<_>>>()
                .ok_or_else(|| self.err(key, format!("expected comma-separated positive integers, found {s:?}"))),
            Some(other) => Err(self.err(key, format!("expected a list of integers, found {}", other.type_name()))),
        }
    }

    fn reject_unknown(&self) -> Result<()> {
        for (key, entry) in &self.raw.entries {
            if !self.used.contains(&key.as_str()) {
                return Err(if entry.line > 0 {
                    parse_err(entry.line, format!("unknown key {key}"))
                } else {
                    CodeqError::Config(format!("unknown key {key} in override"))
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DataSource {
    Synthetic {
        n: usize,
        dims: usize,
        classes: usize,
        spread: f64,
    },
    /// [`data::mnist_like_blobs`]
    MnistLike { n: usize, classes: usize, spread: f64 },
    Mnist {
        train_images: PathBuf,
        train_labels: PathBuf,
        val_images: Option<PathBuf>,
        val_labels: Option<PathBuf>,
    },
    Csv { train: PathBuf, val: Option<PathBuf> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub source: DataSource,
    /// Samples split off as the validation set when the source has none.
    pub val_size: usize,
    /// Keep only the first `limit` training samples.
    pub limit: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Mlp,
    Cnn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub hidden: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    pub out_dir: Option<PathBuf>,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl ExperimentConfig {
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self> {
        let mut raw = RawConfig::parse(text)?;
        for o in overrides {
            raw.apply_override(o)?;
        }
        Self::from_raw(&raw)
    }

    pub fn load(path: impl AsRef<Path>, overrides: &[String]) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| CodeqError::io(path, e))?;
        Self::parse(&text, overrides)
    }

    pub fn from_raw(raw: &RawConfig) -> Result<Self> {
        let mut r = Reader { raw, used: Vec::new() };
        let name = r.string("experiment.name")?.unwrap_or_else(|| "experiment".into());
        let seed = r.u64("experiment.seed", 0)?;
        let out_dir = r.path("experiment.out_dir")?;

        let source_name = r.required_string("data.source")?;
        let source = match source_name.as_str() {
            "synthetic" => DataSource::Synthetic {
                n: r.usize("data.n", 1000)?,
                dims: r.usize("data.dims", 2)?,
                classes: r.usize("data.classes", 4)?,
                spread: r.f64("data.spread", 0.1)?,
            },
            "mnist_like" => DataSource::MnistLike {
                n: r.usize("data.n", 5000)?,
                classes: r.usize("data.classes", 10)?,
                spread: r.f64("data.spread", 1.0)?,
            },
            "mnist" => DataSource::Mnist {
                train_images: r
                    .path("data.train_images")?
                    .ok_or_else(|| CodeqError::Config("missing required key data.train_images".into()))?,
                train_labels: r
                    .path("data.train_labels")?
                    .ok_or_else(|| CodeqError::Config("missing required key data.train_labels".into()))?,
                val_images: r.path("data.val_images")?,
                val_labels: r.path("data.val_labels")?,
            },
            "csv" => DataSource::Csv {
                train: r
                    .path("data.train")?
                    .ok_or_else(|| CodeqError::Config("missing required key data.train".into()))?,
                val: r.path("data.val")?,
            },
            other => {
                return Err(r.err(
                    "data.source",
                    format!("unknown source {other:?} (expected synthetic, mnist_like, mnist or csv)"),
                ))
            }
        };
        let val_size = r.usize("data.val_size", 1000)?;
        let limit = match r.u64("data.limit", 0)? {
            0 => None,
            n => Some(n as usize),
        };

        let kind = match r.required_string("model.kind")?.as_str() {
            "mlp" => ModelKind::Mlp,
            "cnn" => ModelKind::Cnn,
            other => return Err(r.err("model.kind", format!("unknown model {other:?} (expected mlp or cnn)"))),
        };
        let hidden = r.list("model.hidden", &[256])?;

        let d = TrainConfig::default();
        let mode = match r.required_string("train.mode")?.as_str() {
            "fixed" => TrainMode::FixedBit(r.u32("train.bits", 4)?),
            "mixed" => TrainMode::MixedPrecision,
            "fp32" => TrainMode::Fp32,
            other => return Err(r.err("train.mode", format!("unknown mode {other:?} (expected fixed, mixed or fp32)"))),
        };
        if mode == TrainMode::MixedPrecision || mode == TrainMode::Fp32 {
            r.used.push("train.bits");
            if raw.get("train.bits").is_some() {
                return Err(r.err("train.bits", "only valid with mode = fixed".into()));
            }
        }
        let train = TrainConfig {
            lambda_dz: r.f64("train.lambda_dz", d.lambda_dz)?,
            lambda_bit: r.f64("train.lambda_bit", d.lambda_bit)?,
            lambda_w: r.f64("train.lambda_w", d.lambda_w)?,
            lr_weights: r.f64("train.lr_weights", d.lr_weights)?,
            lr_theta: r.f64("train.lr_theta", d.lr_theta)?,
            momentum: r.f64("train.momentum", d.momentum)?,
            epochs: r.usize("train.epochs", d.epochs)?,
            batch_size: r.usize("train.batch_size", d.batch_size)?,
            seed,
            mode,
            init_theta: r.f64("train.init_theta", d.init_theta)?,
            quantile: r.f64("train.quantile", d.quantile)?,
            b_min: r.u32("train.b_min", d.b_min)?,
            b_max: r.u32("train.b_max", d.b_max)?,
            epsilon: r.f64("train.epsilon", d.epsilon)?,
            cosine: r.bool("train.cosine", d.cosine)?,
            detach_scale_from_d: r.bool("train.detach_scale_from_d", d.detach_scale_from_d)?,
        };
        r.reject_unknown()?;
        let cfg = Self {
            name,
            seed,
            out_dir,
            data: DataConfig {
                source,
                val_size,
                limit,
            },
            model: ModelConfig { kind, hidden },
            train,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.train.seed != self.seed {
            return Err(CodeqError::Config(format!(
                "train seed {} differs from experiment seed {}",
                self.train.seed, self.seed
            )));
        }
        match &self.data.source {
            DataSource::Synthetic { n, dims, classes, spread } if *n == 0 || *dims == 0 || *classes == 0 || !(*spread > 0.0) => {
                Err(CodeqError::Config("synthetic data needs positive n, dims, classes and spread".into()))
            }
            DataSource::MnistLike { n, classes, spread } if *n == 0 || *classes == 0 || !(*spread > 0.0) => {
                Err(CodeqError::Config("mnist_like data needs positive n, classes and spread".into()))
            }
            DataSource::Mnist { val_images, val_labels, .. } if val_images.is_some() != val_labels.is_some() => Err(
                CodeqError::Config("data.val_images and data.val_labels must be given together".into()),
            ),
            _ => Ok(()),
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.train.seed = seed;
        self
    }

    /// Training and validation sets. Sources without a separate validation
    /// file have `val_size` samples split off with the experiment seed.
    pub fn load_data(&self) -> Result<(Dataset, Dataset)> {
        let (mut train, val) = match &self.data.source {
            DataSource::Synthetic { n, dims, classes, spread } => {
                let all = data::synthetic_blobs(*n, *dims, *classes, *spread, self.seed)?;
                self.split_off(all)?
            }
            DataSource::MnistLike { n, classes, spread } => {
                let all = data::mnist_like_blobs(*n, *classes, *spread, self.seed)?;
                self.split_off(all)?
            }
            DataSource::Mnist {
                train_images,
                train_labels,
                val_images,
                val_labels,
            } => {
                let train = data::load_idx(train_images, train_labels)?;
                match (val_images, val_labels) {
                    (Some(vi), Some(vl)) => (train, data::load_idx(vi, vl)?),
                    _ => self.split_off(train)?,
                }
            }
            DataSource::Csv { train, val } => {
                let t = data::load_csv(train)?;
                match val {
                    Some(v) => (t, data::load_csv(v)?),
                    None => self.split_off(t)?,
                }
            }
        };
        if let Some(limit) = self.data.limit {
            if limit < train.len() {
                train = train.subset(&(0..limit).collect::<Vec<_>>());
            }
        }
        Ok((train, val))
    }

    fn split_off(&self, all: Dataset) -> Result<(Dataset, Dataset)> {
        if self.data.val_size >= all.len() {
            return Err(CodeqError::Config(format!(
                "val_size {} leaves no training samples out of {}",
                self.data.val_size,
                all.len()
            )));
        }
        let (val, train) = all.split(self.data.val_size, self.seed)?;
        Ok((train, val))
    }

    pub fn build_model(&self, sample_shape: &[usize], num_classes: usize) -> Result<Model> {
        match self.model.kind {
            ModelKind::Mlp => build_mlp(sample_shape.iter().product(), &self.model.hidden, num_classes, self.seed),
            ModelKind::Cnn => {
                let shape: [usize; 3] = match *sample_shape {
                    [c, h, w] => [c, h, w],
                    [h, w] => [1, h, w],
                    _ => {
                        return Err(CodeqError::Config(format!(
                            "cnn needs image samples, data has shape {sample_shape:?}"
                        )))
                    }
                };
                build_mini_cnn(shape, num_classes, self.seed)
            }
        }
    }
}
