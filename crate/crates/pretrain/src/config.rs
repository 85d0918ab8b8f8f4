//! Training plan file: TOML with every field spelled out, unknown keys rejected.

use std::path::{Path, PathBuf};

use rtd_core::model::ModelConfig;
use rtd_core::optim::LambConfig;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};

pub const DEFAULT_CHECKPOINT_EVERY: u64 = 500;
pub const DEFAULT_PREFETCH: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub n_layers: usize,
    pub n_heads: usize,
    pub hidden: usize,
    pub vocab_size: usize,
    pub max_rel_distance: usize,
    pub generator_hidden: usize,
    pub generator_layers: usize,
    pub conv_kernel: usize,
}

impl From<ModelSection> for ModelConfig {
    fn from(m: ModelSection) -> Self {
        Self {
            n_layers: m.n_layers,
            n_heads: m.n_heads,
            hidden: m.hidden,
            vocab_size: m.vocab_size,
            max_rel_distance: m.max_rel_distance,
            generator_hidden: m.generator_hidden,
            generator_layers: m.generator_layers,
            conv_kernel: m.conv_kernel,
        }
    }
}

impl From<&ModelConfig> for ModelSection {
    fn from(m: &ModelConfig) -> Self {
        Self {
            n_layers: m.n_layers,
            n_heads: m.n_heads,
            hidden: m.hidden,
            vocab_size: m.vocab_size,
            max_rel_distance: m.max_rel_distance,
            generator_hidden: m.generator_hidden,
            generator_layers: m.generator_layers,
            conv_kernel: m.conv_kernel,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSection {
    pub lr_peak: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub trust_clip: f64,
}

impl From<OptimizerSection> for LambConfig {
    fn from(o: OptimizerSection) -> Self {
        Self {
            lr_peak: o.lr_peak,
            beta1: o.beta1,
            beta2: o.beta2,
            eps: o.eps,
            weight_decay: o.weight_decay,
            trust_clip: o.trust_clip,
        }
    }
}

impl From<LambConfig> for OptimizerSection {
    fn from(o: LambConfig) -> Self {
        Self {
            lr_peak: o.lr_peak,
            beta1: o.beta1,
            beta2: o.beta2,
            eps: o.eps,
            weight_decay: o.weight_decay,
            trust_clip: o.trust_clip,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseConfig {
    pub max_len: usize,
    pub steps: u64,
    pub warmup: u64,
    /// Effective batch in rows.
    pub batch_size: usize,
}

impl PhaseConfig {
    pub fn tokens_per_step(&self) -> u64 {
        self.batch_size as u64 * self.max_len as u64
    }

    pub fn tokens(&self) -> u64 {
        self.tokens_per_step() * self.steps
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainPlan {
    pub seed: u64,
    pub micro_batch: usize,
    pub rtd_weight: f64,
    pub mask_rate: f64,
    #[serde(default = "default_checkpoint_every")]
    pub checkpoint_every: u64,
    #[serde(default = "default_prefetch")]
    pub prefetch: usize,
    /// Vocabulary file; built from the corpus when absent.
    #[serde(default)]
    pub vocab: Option<PathBuf>,
    pub model: ModelSection,
    pub optimizer: OptimizerSection,
    #[serde(rename = "phase")]
    pub phases: Vec<PhaseConfig>,
}

fn default_checkpoint_every() -> u64 {
    DEFAULT_CHECKPOINT_EVERY
}

fn default_prefetch() -> usize {
    DEFAULT_PREFETCH
}

impl TrainPlan {
    /// Two phases: 128 tokens for 10,000 steps at 67,584 rows, then 512
    /// tokens for 3,300 steps at 27,648 rows, on the base model.
    pub fn base() -> Self {
        Self {
            seed: 42,
            micro_batch: 64,
            rtd_weight: rtd_core::objective::DEFAULT_RTD_WEIGHT,
            mask_rate: rtd_core::data::MASK_RATE,
            checkpoint_every: DEFAULT_CHECKPOINT_EVERY,
            prefetch: DEFAULT_PREFETCH,
            vocab: None,
            model: (&ModelConfig::base()).into(),
            optimizer: LambConfig::default().into(),
            phases: vec![
                PhaseConfig {
                    max_len: 128,
                    steps: 10_000,
                    warmup: 2_000,
                    batch_size: 67_584,
                },
                PhaseConfig {
                    max_len: 512,
                    steps: 3_300,
                    warmup: 200,
                    batch_size: 27_648,
                },
            ],
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let plan: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        plan.validate()?;
        Ok(plan)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let mut plan = Self::parse(&text)?;
        if let Some(v) = &plan.vocab {
            if v.is_relative() {
                let base = path.parent().unwrap_or(Path::new("."));
                plan.vocab = Some(base.join(v));
            }
        }
        Ok(plan)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("plan serializes")
    }

    pub fn model_config(&self) -> ModelConfig {
        self.model.clone().into()
    }

    pub fn lamb_config(&self) -> LambConfig {
        self.optimizer.into()
    }

    pub fn accumulation(&self, phase: &PhaseConfig) -> usize {
        phase.batch_size / self.micro_batch
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        self.model_config().validate()?;
        self.lamb_config().validate()?;
        if self.micro_batch == 0 {
            return fail("micro_batch must be positive".into());
        }
        if !(0.0..1.0).contains(&self.mask_rate) {
            return fail(format!("mask_rate {} outside [0, 1)", self.mask_rate));
        }
        if !(self.rtd_weight >= 0.0 && self.rtd_weight.is_finite()) {
            return fail(format!("rtd_weight {} must be finite and >= 0", self.rtd_weight));
        }
        if self.checkpoint_every == 0 || self.prefetch == 0 {
            return fail("checkpoint_every and prefetch must be positive".into());
        }
        if self.phases.is_empty() {
            return fail("at least one [[phase]] is required".into());
        }
        for (i, p) in self.phases.iter().enumerate() {
            let n = i + 1;
            if p.max_len < 3 {
                return fail(format!("phase {n}: max_len {} < 3", p.max_len));
            }
            if p.batch_size == 0 || p.batch_size % self.micro_batch != 0 {
                return fail(format!(
                    "phase {n}: batch_size {} is not a positive multiple of micro_batch {}",
                    p.batch_size, self.micro_batch
                ));
            }
            if p.steps > 0 && (p.warmup == 0 || p.warmup >= p.steps) {
                return fail(format!(
                    "phase {n}: need 0 < warmup ({}) < steps ({})",
                    p.warmup, p.steps
                ));
            }
            if i > 0 && p.max_len < self.phases[i - 1].max_len {
                return fail(format!(
                    "phase {n}: max_len {} shorter than the previous phase's {}",
                    p.max_len,
                    self.phases[i - 1].max_len
                ));
            }
        }
        Ok(())
    }
}

/// Total input tokens: Σ over phases of batch × max_len × steps.
pub fn token_accounting(plan: &TrainPlan) -> u64 {
    plan.phases.iter().map(PhaseConfig::tokens).sum()
}

/// `1234567` → `"1,234,567"`.
pub fn group_thousands(n: u64) -> String {
    let digits = n.to_string();
    let mut out = String::with_capacity(digits.len() + digits.len() / 3);
    for (i, c) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(c);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn base_plan_accounting() {
        let plan = TrainPlan::base();
        plan.validate().unwrap();
        assert_eq!(token_accounting(&plan), 133_221_580_800);
        assert_eq!(plan.accumulation(&plan.phases[0]), 1056);
        assert_eq!(plan.accumulation(&plan.phases[1]), 432);
    }

    #[test]
    fn grouping() {
        assert_eq!(group_thousands(0), "0");
        assert_eq!(group_thousands(999), "999");
        assert_eq!(group_thousands(1000), "1,000");
        assert_eq!(group_thousands(133_221_580_800), "133,221,580,800");
    }

    #[test]
    fn toml_roundtrip_and_unknown_keys() {
        let plan = TrainPlan::base();
        let text = plan.to_toml();
        assert_eq!(TrainPlan::parse(&text).unwrap(), plan);
        let bad = text.replace("micro_batch = 64", "micro_batch = 64\nmicro_batchh = 1");
        assert!(matches!(TrainPlan::parse(&bad), Err(Error::Config(_))));
        let bad = text.replace("warmup = 200", "warmup = 200\nwarm = 1");
        assert!(matches!(TrainPlan::parse(&bad), Err(Error::Config(_))));
    }

    #[test]
    fn validation() {
        let mut p = TrainPlan::base();
        p.micro_batch = 100;
        assert!(p.validate().is_err());
        let mut p = TrainPlan::base();
        p.phases[1].max_len = 64;
        assert!(p.validate().is_err());
        let mut p = TrainPlan::base();
        p.phases[0].warmup = 10_000;
        assert!(p.validate().is_err());
    }
}
