//! Shallow causal decoder with latent thought steps.
//!
//! Tokens are (I, Q) pairs mapped to `d` dimensions by the input head and
//! summed with a learned absolute positional embedding. `L` pre-norm
//! decoder layers (causal multi-head attention and a GELU MLP, each with a
//! residual connection) are followed by a final layer norm.
//!
//! The vanilla detector reads the final-norm state at the query token
//! through the output head. With `C` thought steps the final-norm state at
//! the last position is fed back as the next input embedding (it skips the
//! input head but receives the positional embedding of the next index),
//! `C - 1` times, and only the last state goes through the output head.
//! The first thought therefore equals the vanilla query embedding.

mod config;
pub mod graph;
pub mod infer;
mod params;

pub use config::ModelConfig;
pub use graph::{ChainOutput, Graph, PromptBatch};
pub use infer::{chain_cached, chain_uncached, forward_full, Decoder, KvCache};
pub use params::{ModelParams, Slot, INIT_STD};

use crate::channel::{CoherenceBlock, PromptSequence};
use crate::error::{Error, Result};
use crate::tensor::Real;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

/// How thought chains of several queries share one training pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChainMode {
    /// One independent sequence per query, recomputed at every step.
    Unrolled,
    /// One sequence with reserved thought slots and a block attention mask.
    #[default]
    Masked,
}

/// Latent thoughts of one query, in step order.
#[derive(Clone, Debug, PartialEq)]
pub struct ThoughtChain<F> {
    pub embeddings: Vec<Vec<F>>,
    pub query_index: usize,
}

fn to_complex<F: Real>(o: [F; 2]) -> Complex64 {
    Complex64::new(o[0].as_f64(), o[1].as_f64())
}

fn iq<F: Real>(z: [f64; 2]) -> [F; 2] {
    [F::of(z[0]), F::of(z[1])]
}

/// Fill `cache` with `tokens[..end]`.
fn prefill<F: Real>(dec: &mut Decoder<'_, F>, cache: &mut KvCache<F>, prompt: &PromptSequence, end: usize) -> Result<()> {
    for pos in cache.len()..end {
        let e = dec.embed_token(iq(prompt.tokens[pos].iq));
        dec.step(cache, &e, pos)?;
    }
    Ok(())
}

/// Thought chains for every query of `prompt` via cached decoding.
pub fn thought_chains<F: Real>(params: &ModelParams<F>, prompt: &PromptSequence, n_steps: usize) -> Result<Vec<ThoughtChain<F>>> {
    if n_steps == 0 {
        return Err(Error::Config("thought chain needs at least one step".into()));
    }
    let last = prompt.query_positions.iter().copied().max().unwrap_or(0);
    let need = prompt.len().max(last + n_steps);
    if need > params.config().max_positions {
        return Err(Error::Overlength {
            len: need,
            max: params.config().max_positions,
        });
    }
    let mut dec = Decoder::new(params);
    let mut cache = KvCache::for_params(params);
    let mut out = Vec::with_capacity(prompt.query_positions.len());
    for &qp in &prompt.query_positions {
        cache.truncate(qp.min(cache.len()));
        prefill(&mut dec, &mut cache, prompt, qp)?;
        let embeddings = chain_cached(&mut dec, &mut cache, iq(prompt.tokens[qp].iq), n_steps)?;
        out.push(ThoughtChain {
            embeddings,
            query_index: qp,
        });
    }
    Ok(out)
}

/// Vanilla soft estimate at every query position.
pub fn forward_vanilla<F: Real>(params: &ModelParams<F>, prompt: &PromptSequence) -> Result<Vec<Complex64>> {
    let chains = thought_chains(params, prompt, 1)?;
    let dec = Decoder::new(params);
    Ok(chains
        .iter()
        .map(|c| to_complex(dec.output_head(&c.embeddings[0])))
        .collect())
}

/// Estimate from the last of `n_thoughts` latent steps at every query.
pub fn forward_choose<F: Real>(
    params: &ModelParams<F>,
    prompt: &PromptSequence,
    n_thoughts: usize,
) -> Result<(Vec<Complex64>, Vec<ThoughtChain<F>>)> {
    let chains = thought_chains(params, prompt, n_thoughts)?;
    let dec = Decoder::new(params);
    let preds = chains
        .iter()
        .map(|c| to_complex(dec.output_head(c.embeddings.last().unwrap())))
        .collect();
    Ok((preds, chains))
}

/// Output head applied to every intermediate thought: `[query][step]`.
pub fn unfold_thoughts<F: Real>(params: &ModelParams<F>, prompt: &PromptSequence, n_thoughts: usize) -> Result<Vec<Vec<Complex64>>> {
    let chains = thought_chains(params, prompt, n_thoughts)?;
    let dec = Decoder::new(params);
    Ok(chains
        .iter()
        .map(|c| c.embeddings.iter().map(|e| to_complex(dec.output_head(e))).collect())
        .collect())
}

/// One incremental decoder pass; see [`Decoder::step`].
pub fn step_with_cache<F: Real>(
    params: &ModelParams<F>,
    cache: &mut KvCache<F>,
    embedding: &[F],
    position: usize,
) -> Result<Vec<F>> {
    Decoder::new(params).step(cache, embedding, position).map(<[F]>::to_vec)
}

/// Soft estimates per pilot count for one coherence block.
///
/// `out[i][j][t - k - 1]` is the estimate of `x_t` from thought `j + 1`
/// with `k = ks[i]` pilots, for every `t = k+1..=T`.
pub struct BlockDetector<'p, F: Real> {
    dec: Decoder<'p, F>,
    cache: KvCache<F>,
    cached: bool,
    steps: usize,
}

impl<'p, F: Real> BlockDetector<'p, F> {
    pub fn new(params: &'p ModelParams<F>, cached: bool) -> Self {
        BlockDetector {
            dec: Decoder::new(params),
            cache: KvCache::for_params(params),
            cached,
            steps: params.config().chain_len(),
        }
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn detect(&mut self, block: &CoherenceBlock, ks: &[usize]) -> Result<Vec<Vec<Vec<Complex64>>>> {
        let len = block.len();
        let mut out = Vec::with_capacity(ks.len());
        for &k in ks {
            if k >= len {
                return Err(Error::Prompt(format!("pilot count {k} must be below T={len}")));
            }
            let mut per_step = vec![Vec::with_capacity(len - k); self.steps];
            if self.cached {
                // pilot pairs are a shared prefix for every query with this k
                self.cache.truncate(2 * k);
                for i in self.cache.len() / 2..k {
                    for (j, z) in [block.y[i], block.x[i]].into_iter().enumerate() {
                        let e = self.dec.embed_token([F::of(z.re), F::of(z.im)]);
                        self.dec.step(&mut self.cache, &e, 2 * i + j)?;
                    }
                }
                for t in k..len {
                    let q = [F::of(block.y[t].re), F::of(block.y[t].im)];
                    let chain = chain_cached(&mut self.dec, &mut self.cache, q, self.steps)?;
                    for (j, e) in chain.iter().enumerate() {
                        per_step[j].push(to_complex(self.dec.output_head(e)));
                    }
                }
            } else {
                let params = self.dec.params();
                for t in k..len {
                    let mut context = Vec::with_capacity(2 * k * params.config().embed_dim);
                    for i in 0..k {
                        context.extend(self.dec.embed_token([F::of(block.y[i].re), F::of(block.y[i].im)]));
                        context.extend(self.dec.embed_token([F::of(block.x[i].re), F::of(block.x[i].im)]));
                    }
                    let q = self.dec.embed_token([F::of(block.y[t].re), F::of(block.y[t].im)]);
                    let chain = chain_uncached(params, &context, &q, self.steps)?;
                    for (j, e) in chain.iter().enumerate() {
                        per_step[j].push(to_complex(self.dec.output_head(e)));
                    }
                }
            }
            out.push(per_step);
        }
        self.cache.truncate(0);
        Ok(out)
    }
}
