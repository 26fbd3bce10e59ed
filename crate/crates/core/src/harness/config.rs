//! Experiment configuration.
//!
//! Grammar: one `key = value` per line. `#` starts a comment, blank lines are
//! ignored, values may be wrapped in double quotes, lists are comma-separated.
//! Every key has a default; unknown keys are errors.

use std::fmt::Display;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use crate::datagen::{NoiseModel, SyntheticSpec};
use crate::error::{PrismError, Result};
use crate::filters::Estimator;
use crate::losses::PairReduction;
use crate::thresholds::ThresholdPolicy;
use crate::vmf::KappaFormula;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Contrastive,
    /// Contrastive terms against the memory bank as well as the batch.
    Mcl,
    SoftTriple,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Contrastive => "contrastive",
            Self::Mcl => "mcl",
            Self::SoftTriple => "softtriple",
        }
    }
}

impl FromStr for LossKind {
    type Err = PrismError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "contrastive" => Ok(Self::Contrastive),
            "mcl" => Ok(Self::Mcl),
            "softtriple" => Ok(Self::SoftTriple),
            _ => Err(PrismError::config(format!("unknown loss '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ThresholdChoice {
    Fixed,
    Trm,
    Strm,
}

impl FromStr for ThresholdChoice {
    type Err = PrismError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fixed" => Ok(Self::Fixed),
            "trm" => Ok(Self::Trm),
            "strm" => Ok(Self::Strm),
            _ => Err(PrismError::config(format!("unknown threshold policy '{s}'"))),
        }
    }
}

impl ThresholdChoice {
    pub fn name(self) -> &'static str {
        match self {
            Self::Fixed => "fixed",
            Self::Trm => "trm",
            Self::Strm => "strm",
        }
    }
}

/// Conversion between config text and typed values.
pub trait ConfigValue: Sized {
    fn parse_value(s: &str) -> Result<Self>;
    fn render(&self) -> String;
}

macro_rules! scalar_value {
    ($($t:ty),*) => {$(
        impl ConfigValue for $t {
            fn parse_value(s: &str) -> Result<Self> {
                s.parse().map_err(|_| PrismError::config(format!("cannot parse '{s}'")))
            }
            fn render(&self) -> String {
                self.to_string()
            }
        }
    )*};
}
scalar_value!(usize, u64, f64, bool, String);

macro_rules! named_value {
    ($($t:ty),*) => {$(
        impl ConfigValue for $t {
            fn parse_value(s: &str) -> Result<Self> {
                s.parse()
            }
            fn render(&self) -> String {
                self.name().to_string()
            }
        }
    )*};
}
named_value!(Estimator, LossKind, ThresholdChoice, NoiseModel);

impl ConfigValue for KappaFormula {
    fn parse_value(s: &str) -> Result<Self> {
        s.parse()
    }
    fn render(&self) -> String {
        match self {
            KappaFormula::Standard => "standard",
            KappaFormula::PaperLiteral => "paper_literal",
        }
        .to_string()
    }
}

impl ConfigValue for PairReduction {
    fn parse_value(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(Self::Sum),
            "mean" => Ok(Self::Mean),
            _ => Err(PrismError::config(format!("unknown pair reduction '{s}'"))),
        }
    }
    fn render(&self) -> String {
        match self {
            Self::Sum => "sum",
            Self::Mean => "mean",
        }
        .to_string()
    }
}

impl ConfigValue for Vec<usize> {
    fn parse_value(s: &str) -> Result<Self> {
        if s.trim().is_empty() {
            return Ok(Vec::new());
        }
        s.split(',').map(|t| usize::parse_value(t.trim())).collect()
    }
    fn render(&self) -> String {
        self.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
    }
}

macro_rules! experiment_config {
    ($( $(#[$doc:meta])* $field:ident : $ty:ty = $default:expr ),* $(,)?) => {
        #[derive(Debug, Clone, PartialEq)]
        pub struct ExperimentConfig {
            $( $(#[$doc])* pub $field: $ty, )*
        }

        impl Default for ExperimentConfig {
            fn default() -> Self {
                Self { $( $field: $default, )* }
            }
        }

        impl ExperimentConfig {
            pub const KEYS: &'static [&'static str] = &[$( stringify!($field) ),*];

            /// Sets one key from its text form.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $( stringify!($field) => {
                        self.$field = <$ty>::parse_value(value)
                            .map_err(|e| PrismError::config(format!("{key}: {e}")))?;
                    } )*
                    _ => return Err(PrismError::config(format!("unknown config key '{key}'"))),
                }
                Ok(())
            }

            pub fn get(&self, key: &str) -> Option<String> {
                match key {
                    $( stringify!($field) => Some(self.$field.render()), )*
                    _ => None,
                }
            }
        }
    };
}

experiment_config! {
    /// Seed for initialization and batch sampling.
    seed: u64 = 0,
    /// Seed for dataset generation and label noise.
    data_seed: u64 = 0,
    num_classes: usize = 16,
    samples_per_class: usize = 100,
    heldout_per_class: usize = 50,
    input_dim: usize = 32,
    concentration: f64 = 40.0,
    noise_model: NoiseModel = NoiseModel::None,
    noise_rate: f64 = 0.0,
    cluster_size: usize = 5,
    estimator: Estimator = Estimator::VmfSim,
    threshold: ThresholdChoice = ThresholdChoice::Strm,
    /// Percentage of each batch below the threshold (TRM / sTRM).
    filter_rate: f64 = 50.0,
    /// sTRM window length in batches.
    window: usize = 10,
    fixed_threshold: f64 = 0.5,
    loss: LossKind = LossKind::Mcl,
    margin: f64 = 0.5,
    pair_reduction: PairReduction = PairReduction::Mean,
    softtriple_lambda: f64 = 20.0,
    softtriple_gamma: f64 = 10.0,
    softtriple_delta: f64 = 0.01,
    proxies_per_class: usize = 2,
    hidden_dims: Vec<usize> = vec![64],
    embedding_dim: usize = 16,
    base_lr: f64 = 0.05,
    momentum: f64 = 0.0,
    total_iters: usize = 4000,
    memory_size: usize = 4096,
    warmup_iters: usize = 1500,
    kappa_formula: KappaFormula = KappaFormula::Standard,
    /// Classes per batch (P).
    batch_classes: usize = 8,
    /// Samples per class in a batch (K).
    batch_per_class: usize = 8,
    eval_every: usize = 250,
    hist_bins: usize = 20,
    /// Iteration after which the full training set is scored; 0 means the last.
    probe_iter: usize = 0,
    bench_memory: usize = 8192,
    bench_classes: usize = 64,
    bench_batch: usize = 64,
    bench_iters: usize = 200,
    kappa_dim: usize = 128,
    kappa_true: f64 = 537.0,
    kappa_trials: usize = 200,
    kappa_sizes: Vec<usize> = vec![5, 10, 20, 34, 100],
}

impl ExperimentConfig {
    /// Applies every `key = value` line of `text`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| PrismError::config(format!("line {}: expected key = value", lineno + 1)))?;
            let value = value.trim();
            let value = value
                .strip_prefix('"')
                .and_then(|v| v.strip_suffix('"'))
                .unwrap_or(value);
            self.set(key.trim(), value)
                .map_err(|e| PrismError::config(format!("line {}: {e}", lineno + 1)))?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| PrismError::config(format!("override '{assignment}' is not key=value")))?;
        self.set(k.trim(), v.trim())
    }

    /// Every key with its current value, in declaration order, in the same
    /// grammar the parser reads.
    pub fn write_effective<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for key in Self::KEYS {
            writeln!(out, "{key} = {}", self.get(key).expect("declared key"))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        fn need(ok: bool, msg: impl Display) -> Result<()> {
            if ok {
                Ok(())
            } else {
                Err(PrismError::config(msg.to_string()))
            }
        }
        if self.estimator == Estimator::ProxySim && self.loss != LossKind::SoftTriple {
            return Err(PrismError::config("estimator proxysim requires loss = softtriple"));
        }
        self.spec().validate()?;
        need(self.heldout_per_class >= 2, "heldout_per_class must be >= 2")?;
        need((0.0..1.0).contains(&self.noise_rate), "noise_rate must be in [0, 1)")?;
        need(self.cluster_size >= 1, "cluster_size must be >= 1")?;
        need((0.0..=100.0).contains(&self.filter_rate), "filter_rate must be in [0, 100]")?;
        need(self.window >= 1, "window must be >= 1")?;
        need((0.0..=1.0).contains(&self.margin), "margin must be in [0, 1]")?;
        need(self.proxies_per_class >= 1, "proxies_per_class must be >= 1")?;
        need(self.hidden_dims.iter().all(|&d| d > 0), "hidden_dims must be positive")?;
        need(self.embedding_dim >= 2, "embedding_dim must be >= 2")?;
        need(self.base_lr > 0.0 && self.base_lr.is_finite(), "base_lr must be positive")?;
        need((0.0..1.0).contains(&self.momentum), "momentum must be in [0, 1)")?;
        need(self.total_iters >= 1, "total_iters must be >= 1")?;
        need(self.memory_size >= 1, "memory_size must be >= 1")?;
        need(self.batch_classes >= 1 && self.batch_per_class >= 1, "batch_classes and batch_per_class must be >= 1")?;
        need(
            self.batch_classes <= self.num_classes,
            format!("batch_classes {} exceeds num_classes {}", self.batch_classes, self.num_classes),
        )?;
        need(self.eval_every >= 1, "eval_every must be >= 1")?;
        need(self.hist_bins >= 1, "hist_bins must be >= 1")?;
        need(self.probe_iter <= self.total_iters, "probe_iter exceeds total_iters")?;
        self.policy()?;
        if self.loss == LossKind::SoftTriple {
            need(
                self.softtriple_lambda > 0.0 && self.softtriple_gamma > 0.0 && self.softtriple_delta >= 0.0,
                "SoftTriple needs lambda > 0, gamma > 0, delta >= 0",
            )?;
        }
        Ok(())
    }

    pub fn spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            num_classes: self.num_classes,
            samples_per_class: self.samples_per_class,
            input_dim: self.input_dim,
            concentration: self.concentration,
            seed: self.data_seed,
        }
    }

    pub fn policy(&self) -> Result<ThresholdPolicy> {
        match self.threshold {
            ThresholdChoice::Fixed => ThresholdPolicy::fixed(self.fixed_threshold),
            ThresholdChoice::Trm => ThresholdPolicy::trm(self.filter_rate),
            ThresholdChoice::Strm => ThresholdPolicy::strm(self.filter_rate, self.window),
        }
    }

    /// Layer widths from input through hidden layers to the embedding.
    pub fn layer_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.input_dim];
        dims.extend(&self.hidden_dims);
        dims.push(self.embedding_dim);
        dims
    }

    pub fn probe_at(&self) -> usize {
        if self.probe_iter == 0 {
            self.total_iters
        } else {
            self.probe_iter
        }
    }
}
