//! Versioned experiment configuration.
//!
//! Files are TOML. Every table is optional and falls back to the defaults
//! printed by `mpcl --dump-defaults`, but `schema_version` must be present
//! and unknown keys are rejected. Overrides use dotted keys
//! (`loss.kind=supcon`) and are type-checked against the default tree.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::augmentation::{AugmentationPolicy, PolicyStrength};
use crate::encoders::EncoderConfig;
use crate::error::{Error, Result};
use crate::losses::{LossKind, LossSpec, MpNceOptions};
use crate::numeric::AdamWConfig;
use crate::similarity::SimilarityMode;
use crate::world::WorldConfig;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    /// Root seed; every random stream derives from it.
    pub seed: u64,
    pub world: WorldConfig,
    pub views: ViewConfig,
    pub augment: AugmentConfig,
    pub model: EncoderConfig,
    pub similarity: SimilarityConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ViewConfig {
    pub image: usize,
    pub text: usize,
    /// Gaussian noise added to caption features of every text view after
    /// the first.
    pub text_noise: f64,
}

impl Default for ViewConfig {
    fn default() -> Self {
        Self {
            image: 3,
            text: 1,
            text_noise: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Policy of image view 0.
    pub first_view: PolicyStrength,
    /// Policy of image views 1 and later.
    pub other_views: PolicyStrength,
    pub weak: AugmentationPolicy,
    pub strong: AugmentationPolicy,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            first_view: PolicyStrength::Weak,
            other_views: PolicyStrength::Strong,
            weak: AugmentationPolicy::weak(),
            strong: AugmentationPolicy::strong(),
        }
    }
}

impl AugmentConfig {
    pub fn policy(&self, view: usize) -> &AugmentationPolicy {
        let strength = if view == 0 { self.first_view } else { self.other_views };
        match strength {
            PolicyStrength::Weak => &self.weak,
            PolicyStrength::Strong => &self.strong,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Supervision {
    /// One loss over the full mixed-domain score matrix.
    Unified,
    /// Independent per-domain losses whose pair sets are restricted to a
    /// single domain, averaged.
    Separated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimilarityConfig {
    pub mode: SimilarityMode,
    pub supervision: Supervision,
    pub init_tau: f64,
    pub init_offset: f64,
}

impl Default for SimilarityConfig {
    fn default() -> Self {
        Self {
            mode: SimilarityMode::DomainDependent,
            supervision: Supervision::Unified,
            init_tau: 0.1,
            init_offset: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub kind: LossKind,
    /// MP-NCE only: include the self-pair as a positive.
    pub trivial: bool,
    /// MP-NCE only: apply the per-domain balancing weights.
    pub weights: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            kind: LossKind::MpNce,
            trivial: true,
            weights: true,
        }
    }
}

impl LossConfig {
    pub fn spec(&self) -> LossSpec {
        LossSpec {
            kind: self.kind,
            mpnce: MpNceOptions {
                include_trivial: self.trivial,
                apply_weights: self.weights,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Peak learning rate, shared by network weights, `log τ` and offsets.
    pub lr: f64,
    pub warmup_epochs: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 64,
            lr: 2e-3,
            warmup_epochs: 2,
            weight_decay: 0.2,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn adamw(&self, lr: f64) -> AdamWConfig {
        AdamWConfig {
            lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Train pairs used to fit the linear probe.
    pub probe_train: usize,
    pub probe_steps: usize,
    pub probe_lr: f64,
    /// Samples per group in the fixed similarity-density batch.
    pub density_batch: usize,
    pub histogram_bins: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            probe_train: 1024,
            probe_steps: 100,
            probe_lr: 0.05,
            density_batch: 64,
            histogram_bins: 40,
        }
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            world: WorldConfig::default(),
            views: ViewConfig::default(),
            augment: AugmentConfig::default(),
            model: EncoderConfig::default(),
            similarity: SimilarityConfig::default(),
            loss: LossConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} must be finite and > 0, got {v}")))
    }
}

impl ExperimentConfig {
    /// Full semantic validation; run before any compute.
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.world.validate()?;
        self.model.validate()?;
        self.augment.weak.validate()?;
        self.augment.strong.validate()?;
        if self.views.image == 0 || self.views.text == 0 {
            return Err(Error::Config("views.image and views.text must be >= 1".into()));
        }
        if !(self.views.text_noise.is_finite() && self.views.text_noise >= 0.0) {
            return Err(Error::Config("views.text_noise must be finite and >= 0".into()));
        }
        positive("similarity.init_tau", self.similarity.init_tau)?;
        if !self.similarity.init_offset.is_finite() {
            return Err(Error::Config("similarity.init_offset must be finite".into()));
        }
        let t = &self.train;
        if t.batch_size < 2 {
            return Err(Error::Config("train.batch_size must be >= 2".into()));
        }
        if t.batch_size > self.world.n_train() {
            return Err(Error::Config(format!(
                "train.batch_size {} exceeds the {} training pairs",
                t.batch_size,
                self.world.n_train()
            )));
        }
        if !(t.lr.is_finite() && t.lr >= 0.0) {
            return Err(Error::Config("train.lr must be finite and >= 0".into()));
        }
        if !(t.weight_decay.is_finite() && t.weight_decay >= 0.0) {
            return Err(Error::Config("train.weight_decay must be finite and >= 0".into()));
        }
        for (name, b) in [("train.beta1", t.beta1), ("train.beta2", t.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1)")));
            }
        }
        positive("train.eps", t.eps)?;
        let e = &self.eval;
        if self.world.n_eval() < 5 {
            return Err(Error::Config("need at least 5 eval pairs for R@5".into()));
        }
        if e.density_batch < 2 || e.density_batch > self.world.n_eval() {
            return Err(Error::Config(format!(
                "eval.density_batch must lie in [2, {}]",
                self.world.n_eval()
            )));
        }
        if e.probe_train == 0 || e.histogram_bins == 0 {
            return Err(Error::Config(
                "eval.probe_train and eval.histogram_bins must be >= 1".into(),
            ));
        }
        if !(e.probe_lr.is_finite() && e.probe_lr >= 0.0) {
            return Err(Error::Config("eval.probe_lr must be finite and >= 0".into()));
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        if !table.contains_key("schema_version") {
            return Err(Error::Config("missing required key `schema_version`".into()));
        }
        let cfg: Self = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config file {}: {e}", path.display())))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config always serializes")
    }

    /// Applies one `dotted.key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{assignment}` is not of the form key=value")))?;
        self.set(key.trim(), raw.trim())
    }

    /// Sets `key` to `raw`, interpreting `raw` according to the type of the
    /// value currently stored at `key`.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        let mut root = toml::Value::try_from(&*self).map_err(|e| Error::Serialization(e.to_string()))?;
        let mut slot = &mut root;
        for part in key.split('.') {
            slot = slot
                .as_table_mut()
                .and_then(|t| t.get_mut(part))
                .ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))?;
        }
        *slot = parse_like(slot, raw).map_err(|msg| Error::Config(format!("{key}: {msg}")))?;
        let updated: Self = root
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("{key}: {}", e.message())))?;
        updated.validate()?;
        *self = updated;
        Ok(())
    }

    pub fn with_overrides<'a>(mut self, overrides: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        for o in overrides {
            self.apply_override(o)?;
        }
        Ok(self)
    }
}

fn parse_like(current: &toml::Value, raw: &str) -> std::result::Result<toml::Value, String> {
    use toml::Value;
    match current {
        Value::String(_) => Ok(Value::String(raw.trim_matches('"').to_string())),
        Value::Boolean(_) => match raw {
            "true" | "on" => Ok(Value::Boolean(true)),
            "false" | "off" => Ok(Value::Boolean(false)),
            _ => Err(format!("expected a boolean (true/false/on/off), got `{raw}`")),
        },
        Value::Integer(_) => raw
            .parse::<i64>()
            .map(Value::Integer)
            .map_err(|_| format!("expected an integer, got `{raw}`")),
        Value::Float(_) => raw
            .parse::<f64>()
            .map(Value::Float)
            .map_err(|_| format!("expected a number, got `{raw}`")),
        Value::Table(_) => Err("cannot assign a scalar to a table; use a dotted key".into()),
        Value::Array(_) | Value::Datetime(_) => {
            let doc: toml::Table = format!("v = {raw}")
                .parse()
                .map_err(|e: toml::de::Error| e.message().to_string())?;
            Ok(doc["v"].clone())
        }
    }
}
