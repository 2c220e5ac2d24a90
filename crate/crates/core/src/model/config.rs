use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Architecture hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub embed_dim: usize,
    pub n_heads: usize,
    /// Latent thought steps per query; 0 is the vanilla detector.
    pub n_thoughts: usize,
    pub max_positions: usize,
    pub mlp_ratio: usize,
}

impl ModelConfig {
    /// Default geometry (`d = 32`, 4 heads, MLP ratio 4) with the
    /// positional table sized `2T + C` for blocks of `block_len` symbols.
    pub fn for_block(n_layers: usize, n_thoughts: usize, block_len: usize) -> Self {
        ModelConfig {
            n_layers,
            embed_dim: 32,
            n_heads: 4,
            n_thoughts,
            max_positions: 2 * block_len + n_thoughts,
            mlp_ratio: 4,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.n_heads
    }

    pub fn hidden_dim(&self) -> usize {
        self.embed_dim * self.mlp_ratio
    }

    /// Number of latent steps actually run; the vanilla model behaves as
    /// a single step.
    pub fn chain_len(&self) -> usize {
        self.n_thoughts.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.embed_dim == 0 || self.n_heads == 0 || self.mlp_ratio == 0 {
            return fail("embed_dim, n_heads and mlp_ratio must be positive".into());
        }
        if self.embed_dim % self.n_heads != 0 {
            return fail(format!(
                "embed_dim {} is not divisible by n_heads {}",
                self.embed_dim, self.n_heads
            ));
        }
        if self.n_layers > 8 {
            return fail(format!("n_layers {} exceeds 8", self.n_layers));
        }
        if self.max_positions < 2 {
            return fail("max_positions must be at least 2".into());
        }
        Ok(())
    }

    /// Check that `block_len` blocks with all thought slots fit the
    /// positional table (`max_positions >= 2T + C`).
    pub fn validate_for_block(&self, block_len: usize) -> Result<()> {
        self.validate()?;
        let need = 2 * block_len + self.n_thoughts;
        if self.max_positions < need {
            return Err(Error::Config(format!(
                "max_positions {} is below 2T + C = {need}",
                self.max_positions
            )));
        }
        Ok(())
    }

    /// Exact number of scalar parameters:
    ///
    /// ```text
    /// input head      2d + d
    /// positions       P d
    /// per layer       2 (2d)            two layer norms
    ///               + 4 (d^2 + d)       Q, K, V, output projections
    ///               + (r d^2 + r d)     MLP up
    ///               + (r d^2 + d)       MLP down
    /// final norm      2d
    /// output head     2d + 2
    /// ```
    ///
    /// with `P = max_positions` and `r = mlp_ratio`.
    pub fn count_params(&self) -> usize {
        let d = self.embed_dim;
        let r = self.mlp_ratio;
        let per_layer = 4 * d + 4 * (d * d + d) + (r * d * d + r * d) + (r * d * d + d);
        3 * d + self.max_positions * d + self.n_layers * per_layer + 2 * d + 2 * d + 2
    }
}
