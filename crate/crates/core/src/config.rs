//! Scenario configuration and the single table of numeric defaults.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::similarity::HeadConfig;
use crate::templates::WeightNetConfig;

/// Every numeric constant the paper leaves open, in one place.
pub mod defaults {
    /// Packets per sample window (one second at 100 packets/s).
    pub const PACKETS_PER_SAMPLE: usize = 100;
    /// Embedding width of the desk-scale encoder.
    pub const D1_TINY: usize = 64;
    /// Embedding width of the ResNet-18 encoder (its pooled feature width).
    pub const D1_RESNET18: usize = 512;
    /// Attention heads in the similarity head.
    pub const HEADS: usize = 4;
    /// Per-head projection width.
    pub const D2: usize = 64;
    /// Sigmoid temperature of the attention head, `sqrt(D2)`.
    pub const TEMPERATURE: f64 = 8.0;
    /// Adam learning rate.
    pub const LEARNING_RATE: f64 = 5e-5;
    /// Coupled L2 weight decay.
    pub const WEIGHT_DECAY: f64 = 0.01;
    pub const BATCH_SIZE: usize = 64;
    pub const EPOCHS: usize = 20;
    /// Template pool size per class (`k = POOL_PER_CLASS * n`).
    pub const POOL_PER_CLASS: usize = 8;
    /// Fine-tune epochs as a fraction of pre-train epochs.
    pub const FINETUNE_FRACTION: f64 = 0.2;
    /// Clamp applied to the automatic positive-pair weight.
    pub const ALPHA_AUTO_MIN: f64 = 1.0;
    pub const ALPHA_AUTO_MAX: f64 = 100.0;
    /// Gaussian kernels in the MK-MMD mixture (bandwidths median * 2^i, i in -2..=2).
    pub const MMD_KERNELS: usize = 5;
    pub const MMD_WEIGHT: f64 = 1.0;
    pub const MMD_BANDWIDTH_FLOOR: f64 = 1e-8;
    /// Chronological train fraction for in-domain splits.
    pub const TRAIN_FRACTION: f64 = 0.9;
    /// Fraction of synthesized packet slots dropped.
    pub const MISSING_RATE: f64 = 0.02;
    /// Largest pool Weight-Net accepts.
    pub const WEIGHTNET_MAX_POOL: usize = 512;
    pub const WEIGHTNET_CHANNELS: usize = 8;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    InDomain,
    KShot,
    ZeroShot,
    NewClass,
}

impl Scenario {
    pub fn default_metric(self) -> Metric {
        match self {
            Scenario::KShot => Metric::Gaussian,
            _ => Metric::Attention,
        }
    }

    pub fn needs_shots(self) -> bool {
        matches!(self, Scenario::KShot | Scenario::NewClass)
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "in-domain" => Scenario::InDomain,
            "k-shot" | "k-shot-cross-domain" => Scenario::KShot,
            "zero-shot" | "zero-shot-cross-domain" => Scenario::ZeroShot,
            "new-class" | "k-shot-new-class" => Scenario::NewClass,
            other => return Err(Error::config("scenario", format!("unknown scenario `{other}`"))),
        })
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scenario::InDomain => "in-domain",
            Scenario::KShot => "k-shot",
            Scenario::ZeroShot => "zero-shot",
            Scenario::NewClass => "new-class",
        })
    }
}

/// Similarity head selector. The names are part of the CLI/config contract.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Metric {
    Attention,
    Gaussian,
    Cosine,
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "attention" => Metric::Attention,
            "gaussian" => Metric::Gaussian,
            "cosine" => Metric::Cosine,
            other => return Err(Error::config("metric", format!("unknown metric `{other}`"))),
        })
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::Attention => "attention",
            Metric::Gaussian => "gaussian",
            Metric::Cosine => "cosine",
        })
    }
}

/// How class templates are built from a labeled pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TemplateMethod {
    WeightNet,
    PlainAverage,
    RandomSample,
}

impl FromStr for TemplateMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "weight-net" => TemplateMethod::WeightNet,
            "plain-average" | "average" => TemplateMethod::PlainAverage,
            "random-sample" | "random" => TemplateMethod::RandomSample,
            other => {
                return Err(Error::config(
                    "template_method",
                    format!("unknown template method `{other}`"),
                ))
            }
        })
    }
}

impl fmt::Display for TemplateMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TemplateMethod::WeightNet => "weight-net",
            TemplateMethod::PlainAverage => "plain-average",
            TemplateMethod::RandomSample => "random-sample",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum LrSchedule {
    Constant,
    /// Learning rate multiplied by `gamma` after every epoch.
    Exponential { gamma: f64 },
}

/// Declarative description of one experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub scenario: Scenario,
    /// Shots per class for k-shot and new-class scenarios.
    pub k: usize,
    /// Target domains for cross-domain scenarios; defaults to the last domain present.
    pub target_domains: Vec<usize>,
    /// Held-out class for the new-class scenario; defaults to the highest label.
    pub new_class: Option<usize>,
    /// Similarity head; `None` selects the scenario default.
    pub metric: Option<Metric>,
    pub template_method: TemplateMethod,
    pub use_mmd: bool,
    pub use_unlabeled_target: bool,
    pub epochs: usize,
    /// Defaults to `FINETUNE_FRACTION * epochs`, at least one.
    pub finetune_epochs: Option<usize>,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub lr_schedule: LrSchedule,
    pub seed: u64,
    /// Template pool size; defaults to `POOL_PER_CLASS * n`.
    pub pool_size: Option<usize>,
    /// Cuts gradient flow through template construction (ablation only).
    pub detach_templates: bool,
    pub loss: LossConfig,
    pub encoder: EncoderConfig,
    pub head: HeadConfig,
    pub weightnet: WeightNetConfig,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            scenario: Scenario::InDomain,
            k: 1,
            target_domains: Vec::new(),
            new_class: None,
            metric: None,
            template_method: TemplateMethod::WeightNet,
            use_mmd: false,
            use_unlabeled_target: false,
            epochs: defaults::EPOCHS,
            finetune_epochs: None,
            batch_size: defaults::BATCH_SIZE,
            learning_rate: defaults::LEARNING_RATE,
            weight_decay: defaults::WEIGHT_DECAY,
            lr_schedule: LrSchedule::Constant,
            seed: 0,
            pool_size: None,
            detach_templates: false,
            loss: LossConfig::default(),
            encoder: EncoderConfig::default(),
            head: HeadConfig::default(),
            weightnet: WeightNetConfig::default(),
        }
    }
}

impl ScenarioConfig {
    pub fn metric(&self) -> Metric {
        self.metric.unwrap_or_else(|| self.scenario.default_metric())
    }

    pub fn finetune_epochs(&self) -> usize {
        self.finetune_epochs.unwrap_or_else(|| {
            ((self.epochs as f64 * defaults::FINETUNE_FRACTION).round() as usize).max(1)
        })
    }

    pub fn pool_size(&self, classes: usize) -> usize {
        self.pool_size.unwrap_or(defaults::POOL_PER_CLASS * classes)
    }

    pub fn validate(&self) -> Result<()> {
        if self.scenario.needs_shots() && self.k == 0 {
            return Err(Error::config("k", "must be at least 1 for this scenario"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate", "must be finite and non-negative"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if self.pool_size == Some(0) {
            return Err(Error::config("pool_size", "must be at least 1"));
        }
        if self.use_unlabeled_target && !self.use_mmd {
            log::warn!("use_unlabeled_target has no effect without use_mmd");
        }
        self.loss.validate()?;
        self.encoder.validate()?;
        self.head.validate()?;
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ScenarioConfig = toml::from_str(text).map_err(|e| {
            let msg = e.message().to_string();
            let field = msg.split('`').nth(1).unwrap_or("config").to_string();
            Error::config(field, msg)
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }
}
