//! Run configuration: a flat `key = value` file plus overrides.
//!
//! ```text
//! # random bits, 50-bit code
//! dataset = random_bits
//! n_bits = 50
//! n_epochs = 200
//! batch_size = 100
//! lr = 0.001
//! l2_enc = 0.001
//! noise = 0.1
//! ```
//!
//! Overrides are applied with [`RunConfig::set`] after the file, so a flag
//! always wins.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use thiserror::Error;

use crate::channel::{ChannelKind, ChannelModel};
use crate::necst::{DecoderFamily, ModelSpec, TrainConfig};
use crate::report::parse_kv;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldError {
    pub field: String,
    pub reason: String,
}

impl fmt::Display for FieldError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.reason)
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("invalid config: {}", .0.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<FieldError>),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl ConfigError {
    fn field(field: &str, reason: impl Into<String>) -> Self {
        ConfigError::Invalid(vec![FieldError {
            field: field.to_string(),
            reason: reason.into(),
        }])
    }

    /// Names of the offending fields, for validation failures.
    pub fn fields(&self) -> Vec<&str> {
        match self {
            ConfigError::Invalid(v) => v.iter().map(|e| e.field.as_str()).collect(),
            _ => Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    /// Binarized IDX images from `data_path`.
    Mnist,
    /// Generated i.i.d. Bernoulli bitstrings.
    RandomBits,
    /// One bitstring per line in `data_path`.
    BitCorpus,
}

impl DatasetKind {
    pub fn name(self) -> &'static str {
        match self {
            DatasetKind::Mnist => "mnist",
            DatasetKind::RandomBits => "random_bits",
            DatasetKind::BitCorpus => "bits",
        }
    }
}

impl FromStr for DatasetKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "mnist" => Ok(DatasetKind::Mnist),
            "random_bits" => Ok(DatasetKind::RandomBits),
            "bits" => Ok(DatasetKind::BitCorpus),
            _ => Err(format!("expected mnist, random_bits or bits, got {s:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub dataset: DatasetKind,
    /// Directory holding `images-idx3-ubyte[.gz]` (mnist) or a corpus file.
    pub data_path: Option<PathBuf>,
    pub binarize_threshold: f64,
    /// Split sizes; zero means "default 5:1:1 split".
    pub n_train: usize,
    pub n_valid: usize,
    pub n_test: usize,
    /// Random-bits generator settings.
    pub n_items: usize,
    pub item_len: usize,
    pub bit_p: f64,

    pub n_bits: usize,
    pub channel: ChannelKind,
    pub noise: f64,
    pub decoder: String,
    pub variance: f64,
    pub enc_hidden: Vec<usize>,
    pub dec_hidden: Vec<usize>,

    pub n_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub l2_enc: f64,
    pub k: usize,
    pub seed: u64,
    pub eval_every: usize,

    pub checkpoint: PathBuf,
    pub report: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetKind::RandomBits,
            data_path: None,
            binarize_threshold: 0.5,
            n_train: 0,
            n_valid: 0,
            n_test: 0,
            n_items: 7000,
            item_len: 100,
            bit_p: 0.5,
            n_bits: 50,
            channel: ChannelKind::Bsc,
            noise: 0.0,
            decoder: "bernoulli".into(),
            variance: 1.0,
            enc_hidden: vec![500],
            dec_hidden: vec![500, 500],
            n_epochs: 200,
            batch_size: 100,
            lr: 1e-3,
            l2_enc: 1e-3,
            k: 5,
            seed: 0,
            eval_every: 1,
            checkpoint: PathBuf::from("model.ckpt"),
            report: PathBuf::from("train_report.txt"),
        }
    }
}

/// Every key [`RunConfig::set`] accepts.
pub const KEYS: &[&str] = &[
    "dataset",
    "data_path",
    "binarize_threshold",
    "n_train",
    "n_valid",
    "n_test",
    "n_items",
    "item_len",
    "bit_p",
    "n_bits",
    "channel",
    "noise",
    "decoder",
    "variance",
    "enc_hidden",
    "dec_hidden",
    "n_epochs",
    "batch_size",
    "lr",
    "l2_enc",
    "k",
    "seed",
    "eval_every",
    "checkpoint",
    "report",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: fmt::Display,
{
    value
        .parse()
        .map_err(|e: T::Err| ConfigError::field(key, format!("cannot parse {value:?}: {e}")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>, ConfigError> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|s| parse(key, s.trim())).collect()
}

impl RunConfig {
    /// Parses a config file body on top of the defaults.
    pub fn from_text(text: &str) -> Result<Self, ConfigError> {
        let kv = parse_kv(text).map_err(|(line, reason)| ConfigError::Parse { line, reason })?;
        let mut cfg = Self::default();
        let mut errors = Vec::new();
        for (k, v) in &kv {
            if let Err(ConfigError::Invalid(e)) = cfg.set(k, v) {
                errors.extend(e);
            }
        }
        if errors.is_empty() {
            Ok(cfg)
        } else {
            Err(ConfigError::Invalid(errors))
        }
    }

    pub fn from_file(path: impl AsRef<std::path::Path>) -> Result<Self, ConfigError> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        match key {
            "dataset" => self.dataset = value.parse().map_err(|e: String| ConfigError::field(key, e))?,
            "data_path" => self.data_path = Some(PathBuf::from(value)),
            "binarize_threshold" => self.binarize_threshold = parse(key, value)?,
            "n_train" => self.n_train = parse(key, value)?,
            "n_valid" => self.n_valid = parse(key, value)?,
            "n_test" => self.n_test = parse(key, value)?,
            "n_items" => self.n_items = parse(key, value)?,
            "item_len" => self.item_len = parse(key, value)?,
            "bit_p" => self.bit_p = parse(key, value)?,
            "n_bits" => self.n_bits = parse(key, value)?,
            "channel" => {
                self.channel = value
                    .parse()
                    .map_err(|e: crate::channel::ChannelError| ConfigError::field(key, e.to_string()))?
            }
            "noise" => self.noise = parse(key, value)?,
            "decoder" => self.decoder = value.to_string(),
            "variance" => self.variance = parse(key, value)?,
            "enc_hidden" => self.enc_hidden = parse_list(key, value)?,
            "dec_hidden" => self.dec_hidden = parse_list(key, value)?,
            "n_epochs" => self.n_epochs = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "l2_enc" => self.l2_enc = parse(key, value)?,
            "k" => self.k = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "eval_every" => self.eval_every = parse(key, value)?,
            "checkpoint" => self.checkpoint = PathBuf::from(value),
            "report" => self.report = PathBuf::from(value),
            _ => return Err(ConfigError::field(key, "unknown key")),
        }
        Ok(())
    }

    /// Checks every field and reports all failures at once.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut errors = Vec::new();
        let mut fail = |field: &str, reason: String| {
            errors.push(FieldError {
                field: field.to_string(),
                reason,
            })
        };
        match (&self.dataset, &self.data_path) {
            (DatasetKind::RandomBits, _) => {}
            (_, None) => fail("data_path", "required for this dataset".into()),
            (_, Some(p)) if !p.exists() => fail("data_path", format!("{} does not exist", p.display())),
            _ => {}
        }
        if !(0.0..=1.0).contains(&self.noise) {
            fail("noise", format!("must be in [0, 1], got {}", self.noise));
        }
        if !(0.0..=1.0).contains(&self.bit_p) {
            fail("bit_p", format!("must be in [0, 1], got {}", self.bit_p));
        }
        if !(0.0..=1.0).contains(&self.binarize_threshold) {
            fail(
                "binarize_threshold",
                format!("must be in [0, 1], got {}", self.binarize_threshold),
            );
        }
        if self.n_bits == 0 {
            fail("n_bits", "must be >= 1".into());
        }
        if self.dataset == DatasetKind::RandomBits && (self.n_items == 0 || self.item_len == 0) {
            fail("n_items", "n_items and item_len must be >= 1".into());
        }
        if self.batch_size == 0 {
            fail("batch_size", "must be >= 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            fail("lr", format!("must be positive, got {}", self.lr));
        }
        if !(self.l2_enc >= 0.0 && self.l2_enc.is_finite()) {
            fail("l2_enc", format!("must be >= 0, got {}", self.l2_enc));
        }
        if self.k < 2 {
            fail("k", format!("must be >= 2, got {}", self.k));
        }
        if self.enc_hidden.contains(&0) {
            fail("enc_hidden", "layer widths must be >= 1".into());
        }
        if self.dec_hidden.contains(&0) {
            fail("dec_hidden", "layer widths must be >= 1".into());
        }
        match self.decoder.as_str() {
            "bernoulli" => {}
            "gaussian" if self.variance > 0.0 && self.variance.is_finite() => {}
            "gaussian" => fail("variance", format!("must be positive, got {}", self.variance)),
            other => fail("decoder", format!("expected bernoulli or gaussian, got {other:?}")),
        }
        for (field, p) in [("checkpoint", &self.checkpoint), ("report", &self.report)] {
            let parent = p.parent().filter(|d| !d.as_os_str().is_empty());
            if let Some(d) = parent {
                if !d.is_dir() {
                    fail(field, format!("directory {} does not exist", d.display()));
                }
            }
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Invalid(errors))
        }
    }

    pub fn channel_model(&self) -> Result<ChannelModel, ConfigError> {
        ChannelModel::new(self.channel, self.noise).map_err(|e| ConfigError::field("noise", e.to_string()))
    }

    pub fn family(&self) -> DecoderFamily {
        match self.decoder.as_str() {
            "gaussian" => DecoderFamily::Gaussian {
                variance: self.variance,
            },
            _ => DecoderFamily::Bernoulli,
        }
    }

    pub fn model_spec(&self, input_dim: usize) -> Result<ModelSpec, ConfigError> {
        Ok(ModelSpec {
            input_dim,
            code_len: self.n_bits,
            encoder_hidden: self.enc_hidden.clone(),
            decoder_hidden: self.dec_hidden.clone(),
            channel: self.channel_model()?,
            family: self.family(),
            seed: self.seed,
        })
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            k: self.k,
            epochs: self.n_epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            l2_encoder: self.l2_enc,
            seed: self.seed,
            eval_every: self.eval_every,
        }
    }

    /// Every setting as `(key, value)`, in [`KEYS`] order.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let list = |v: &[usize]| v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",");
        let values = [
            self.dataset.name().to_string(),
            self.data_path
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default(),
            self.binarize_threshold.to_string(),
            self.n_train.to_string(),
            self.n_valid.to_string(),
            self.n_test.to_string(),
            self.n_items.to_string(),
            self.item_len.to_string(),
            self.bit_p.to_string(),
            self.n_bits.to_string(),
            self.channel.name().to_string(),
            self.noise.to_string(),
            self.decoder.clone(),
            self.variance.to_string(),
            list(&self.enc_hidden),
            list(&self.dec_hidden),
            self.n_epochs.to_string(),
            self.batch_size.to_string(),
            self.lr.to_string(),
            self.l2_enc.to_string(),
            self.k.to_string(),
            self.seed.to_string(),
            self.eval_every.to_string(),
            self.checkpoint.display().to_string(),
            self.report.display().to_string(),
        ];
        KEYS.iter().map(|k| k.to_string()).zip(values).collect()
    }
}
