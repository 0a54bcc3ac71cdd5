use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{FmError, Result};
use crate::layer::ForwardMode;
use crate::model::ModelConfig;
use crate::tensor::Precision;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    Constant,
    #[default]
    Cosine,
}

impl std::str::FromStr for LrSchedule {
    type Err = FmError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(LrSchedule::Constant),
            "cosine" => Ok(LrSchedule::Cosine),
            other => Err(FmError::InvalidArgument(format!("unknown lr schedule {other:?}"))),
        }
    }
}

fn default_lr() -> f64 {
    3e-3
}
fn default_betas() -> [f64; 2] {
    [0.9, 0.95]
}
fn default_weight_decay() -> f64 {
    0.1
}
fn default_clip() -> f64 {
    1.0
}
fn default_eps() -> f64 {
    1e-8
}
fn default_final_lr_ratio() -> f64 {
    0.1
}
fn default_warmup_fraction() -> f64 {
    0.02
}
fn default_train_fraction() -> f64 {
    0.9
}
fn default_eval_batches() -> usize {
    4
}

/// Everything that determines a training run. The model's `train_ctx` is the
/// sequence length of every training example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default)]
    pub lr_schedule: LrSchedule,
    /// Linear warmup length; defaults to 2% of `total_steps`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warmup_steps: Option<usize>,
    /// Cosine floor as a fraction of `lr`.
    #[serde(default = "default_final_lr_ratio")]
    pub final_lr_ratio: f64,
    #[serde(default = "default_betas")]
    pub betas: [f64; 2],
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_clip")]
    pub grad_clip: f64,
    pub batch_size: usize,
    pub total_steps: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub precision: Precision,
    #[serde(default)]
    pub mode: ForwardMode,
    /// Steps between metrics records (the last step is always recorded).
    pub eval_every: usize,
    /// Batches drawn from the test split at each record.
    #[serde(default = "default_eval_batches")]
    pub eval_batches: usize,
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    /// Corpus file or directory; the CLI may override it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    /// Wall-clock throughput makes logs differ run to run, so it is opt-in.
    #[serde(default)]
    pub record_throughput: bool,
}

impl RunConfig {
    pub fn new(model: ModelConfig, batch_size: usize, total_steps: usize) -> Self {
        Self {
            model,
            lr: default_lr(),
            lr_schedule: LrSchedule::default(),
            warmup_steps: None,
            final_lr_ratio: default_final_lr_ratio(),
            betas: default_betas(),
            eps: default_eps(),
            weight_decay: default_weight_decay(),
            grad_clip: default_clip(),
            batch_size,
            total_steps,
            seed: 0,
            precision: Precision::default(),
            mode: ForwardMode::default(),
            eval_every: total_steps.max(1),
            eval_batches: default_eval_batches(),
            train_fraction: default_train_fraction(),
            data: None,
            record_throughput: false,
        }
    }

    pub fn train_ctx(&self) -> usize {
        self.model.train_ctx
    }

    pub fn warmup(&self) -> usize {
        self.warmup_steps
            .unwrap_or_else(|| (default_warmup_fraction() * self.total_steps as f64).round() as usize)
    }

    /// Learning rate applied at (0-based) `step`.
    pub fn lr_at(&self, step: usize) -> f64 {
        let warmup = self.warmup();
        if step < warmup {
            return self.lr * (step + 1) as f64 / warmup as f64;
        }
        match self.lr_schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::Cosine => {
                let span = self.total_steps.saturating_sub(warmup).max(1);
                let progress = ((step - warmup) as f64 / span as f64).min(1.0);
                let floor = self.lr * self.final_lr_ratio;
                floor + 0.5 * (self.lr - floor) * (1.0 + (std::f64::consts::PI * progress).cos())
            }
        }
    }

    /// Tokens the run will consume: steps × batch × context, exactly.
    pub fn token_budget(&self) -> u64 {
        (self.total_steps * self.batch_size * self.train_ctx()) as u64
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let bad = |msg: String| Err(FmError::Config(msg));
        if self.total_steps == 0 {
            return bad("total_steps must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.eval_every == 0 {
            return bad("eval_every must be at least 1".into());
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be finite and non-negative, got {}", self.lr));
        }
        if self.betas.iter().any(|b| !(0.0..1.0).contains(b)) {
            return bad(format!("betas must lie in [0, 1), got {:?}", self.betas));
        }
        if !(self.eps > 0.0) || !(self.grad_clip > 0.0) || !(self.weight_decay >= 0.0) {
            return bad("eps and grad_clip must be positive, weight_decay non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.final_lr_ratio) {
            return bad(format!(
                "final_lr_ratio must lie in [0, 1], got {}",
                self.final_lr_ratio
            ));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return bad(format!(
                "train_fraction must lie in (0, 1), got {}",
                self.train_fraction
            ));
        }
        if self.warmup() > self.total_steps {
            return bad("warmup_steps exceeds total_steps".into());
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| FmError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| FmError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| FmError::Config(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layer::LayerConfig;
    use crate::model::MixerKind;

    fn cfg() -> RunConfig {
        RunConfig::new(
            ModelConfig::new(1, LayerConfig::dense(4, 8, 8), MixerKind::FactorizationMemory, 16),
            2,
            100,
        )
    }

    #[test]
    fn toml_round_trip_and_unknown_keys() {
        let c = cfg();
        let text = c.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), c);
        assert!(RunConfig::from_toml(&format!("typo_lr = 1.0\n{text}")).is_err());
        let nested = text.replace("[model]", "[model]\nwhatever = 3");
        assert!(RunConfig::from_toml(&nested).is_err());
    }

    #[test]
    fn schedule_shape() {
        let c = cfg();
        assert_eq!(c.warmup(), 2);
        assert_eq!(c.lr_at(0), c.lr / 2.0);
        assert_eq!(c.lr_at(1), c.lr);
        assert_eq!(c.lr_at(2), c.lr);
        assert!((c.lr_at(100) - 0.1 * c.lr).abs() < 1e-15);
        let mid = c.lr_at(51);
        assert!((mid - 0.55 * c.lr).abs() < 1e-12);
        let mut k = c.clone();
        k.lr_schedule = LrSchedule::Constant;
        assert_eq!(k.lr_at(99), k.lr);
    }

    #[test]
    fn rejects_bad_values() {
        let mut c = cfg();
        c.total_steps = 0;
        assert!(c.validate().is_err());
        let mut c = cfg();
        c.betas = [0.9, 1.0];
        assert!(c.validate().is_err());
        let mut c = cfg();
        c.train_fraction = 1.0;
        assert!(c.validate().is_err());
    }
}
