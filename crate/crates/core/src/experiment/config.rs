use crate::channel::Constellation;
use crate::error::{Error, Result};
use crate::model::{ChainMode, ModelConfig};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Learning-rate shape after the linear warmup.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    #[default]
    Constant,
    /// Cosine decay from the peak rate to `min_lr_ratio` times it.
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub warmup_steps: usize,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub schedule: Schedule,
    pub min_lr_ratio: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            learning_rate: 3e-4,
            batch_size: 128,
            steps: 100_000,
            warmup_steps: 1_000,
            grad_clip: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            schedule: Schedule::Constant,
            min_lr_ratio: 0.1,
        }
    }
}

impl OptimConfig {
    /// Learning rate used for optimizer step `step` (0-based).
    pub fn lr_at(&self, step: usize) -> f64 {
        let peak = self.learning_rate;
        if step < self.warmup_steps {
            return peak * (step + 1) as f64 / self.warmup_steps as f64;
        }
        match self.schedule {
            Schedule::Constant => peak,
            Schedule::Cosine => {
                let span = self.steps.saturating_sub(self.warmup_steps).max(1);
                let frac = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
                let floor = peak * self.min_lr_ratio;
                floor + 0.5 * (peak - floor) * (1.0 + (std::f64::consts::PI * frac).cos())
            }
        }
    }
}

/// Everything needed to reproduce one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Identifier written to checkpoints and metric rows.
    pub name: String,
    pub model: ModelConfig,
    /// Constellation order (4, 16 or 64).
    pub modulation: usize,
    #[serde(default = "default_block_len")]
    pub block_len: usize,
    /// Training SNR range in dB; defaults by modulation when omitted.
    #[serde(default)]
    pub snr_range_db: Option<[f64; 2]>,
    #[serde(default)]
    pub optim: OptimConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub checkpoint_dir: Option<PathBuf>,
    /// Save every this many steps (0: only at the end).
    #[serde(default)]
    pub checkpoint_every: usize,
    #[serde(default)]
    pub chain_mode: ChainMode,
    /// Sequences per gradient shard; shards run in parallel and are summed
    /// in a fixed order.
    #[serde(default = "default_shard_size")]
    pub shard_size: usize,
    #[serde(default = "default_log_every")]
    pub log_every: usize,
}

fn default_block_len() -> usize {
    11
}

fn default_shard_size() -> usize {
    16
}

fn default_log_every() -> usize {
    100
}

/// Training SNR range used when a config leaves it out.
pub fn default_snr_range_db(modulation: usize) -> [f64; 2] {
    match modulation {
        64 => [30.0, 45.0],
        _ => [25.0, 35.0],
    }
}

/// Evaluation SNR used for each modulation.
pub fn default_eval_snr_db(modulation: usize) -> f64 {
    match modulation {
        64 => 40.0,
        _ => 30.0,
    }
}

impl TrainConfig {
    pub fn new(name: impl Into<String>, model: ModelConfig, modulation: usize) -> Self {
        TrainConfig {
            name: name.into(),
            model,
            modulation,
            block_len: default_block_len(),
            snr_range_db: None,
            optim: OptimConfig::default(),
            seed: 0,
            checkpoint_dir: None,
            checkpoint_every: 0,
            chain_mode: ChainMode::default(),
            shard_size: default_shard_size(),
            log_every: default_log_every(),
        }
    }

    pub fn snr_range(&self) -> [f64; 2] {
        self.snr_range_db.unwrap_or_else(|| default_snr_range_db(self.modulation))
    }

    pub fn validate(&self) -> Result<()> {
        Constellation::new(self.modulation)?;
        self.model.validate_for_block(self.block_len)?;
        let [lo, hi] = self.snr_range();
        let fail = |m: String| Err(Error::Config(m));
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return fail(format!("invalid snr_range_db [{lo}, {hi}]"));
        }
        let o = &self.optim;
        if o.steps == 0 || o.batch_size == 0 || self.shard_size == 0 {
            return fail("steps, batch_size and shard_size must be positive".into());
        }
        if !(o.learning_rate > 0.0) || !(o.grad_clip >= 0.0) || !(0.0..=1.0).contains(&o.min_lr_ratio) {
            return fail("learning_rate must be positive, grad_clip nonnegative, min_lr_ratio in [0, 1]".into());
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || !(o.eps > 0.0) {
            return fail("Adam betas must lie in [0, 1) and eps must be positive".into());
        }
        if self.block_len == 0 {
            return fail("block_len must be positive".into());
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: TrainConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// SHA-256 of the canonical JSON form, recorded in checkpoints.
    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_vec(self).expect("config serializes");
        format!("{:x}", Sha256::digest(json))
    }
}
