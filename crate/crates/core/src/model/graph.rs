//! Differentiable forward passes recorded on a [`Tape`].
//!
//! Two interchangeable layouts produce the latent thought chains of a
//! batch of full training prompts:
//!
//! - [`ChainMode::Unrolled`] runs one independent causal sequence per query
//!   position, re-running the backbone from scratch at every thought step.
//! - [`ChainMode::Masked`] lays out the prompt once, followed by one
//!   segment of thought slots per step. A slot of query `t` attends to
//!   prompt tokens up to and including `y_t` and to earlier slots of its
//!   own chain; no prompt token attends to any slot. Keys and values of
//!   already processed segments are reused, so every token passes the
//!   backbone exactly once.

use super::params::Slot;
use super::{ChainMode, ModelConfig, ModelParams};
use crate::channel::{CoherenceBlock, PromptMode, PromptSequence};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Tensor, Var};

/// Prompts sharing one layout, flattened for batched evaluation.
#[derive(Clone, Debug)]
pub struct PromptBatch<F> {
    pub batch: usize,
    pub seq_len: usize,
    /// `[batch, seq_len, 2]` (I, Q) values.
    pub iq: Vec<F>,
    pub query_positions: Vec<usize>,
    /// `[batch, queries, 2]` transmitted symbols, when known.
    pub targets: Option<Vec<F>>,
}

impl<F: Real> PromptBatch<F> {
    pub fn from_prompts(prompts: &[PromptSequence]) -> Result<Self> {
        let first = prompts
            .first()
            .ok_or_else(|| Error::Prompt("empty batch".into()))?;
        let mut iq = Vec::with_capacity(prompts.len() * first.len() * 2);
        for p in prompts {
            if p.len() != first.len() || p.query_positions != first.query_positions {
                return Err(Error::Prompt("prompts in a batch must share one layout".into()));
            }
            for t in &p.tokens {
                iq.push(F::of(t.iq[0]));
                iq.push(F::of(t.iq[1]));
            }
        }
        Ok(PromptBatch {
            batch: prompts.len(),
            seq_len: first.len(),
            iq,
            query_positions: first.query_positions.clone(),
            targets: None,
        })
    }

    /// Full `(y_1, x_1, ..., y_T, x_T)` prompts with every `x_t` as target.
    pub fn training(blocks: &[CoherenceBlock]) -> Result<Self> {
        let prompts = blocks
            .iter()
            .map(|b| PromptSequence::assemble(b, PromptMode::TrainFull))
            .collect::<Result<Vec<_>>>()?;
        let mut batch = Self::from_prompts(&prompts)?;
        let targets = blocks
            .iter()
            .flat_map(|b| b.x.iter().flat_map(|x| [F::of(x.re), F::of(x.im)]))
            .collect();
        batch.targets = Some(targets);
        Ok(batch)
    }

    pub fn n_queries(&self) -> usize {
        self.query_positions.len()
    }
}

/// Output of a thought-chain forward pass.
pub struct ChainOutput {
    /// `[batch * queries, 2]`, from the last thought.
    pub predictions: Var,
    /// One `[batch * queries, d]` tensor per step `j = 1..=C`.
    pub thoughts: Vec<Var>,
}

#[derive(Default)]
struct LayerKv {
    keys: Vec<Var>,
    values: Vec<Var>,
}

/// Model parameters placed on a tape as trainable leaves.
pub struct Graph<'t, F: Real> {
    tape: &'t Tape<F>,
    vars: Vec<Var>,
    cfg: ModelConfig,
}

fn mask<F: Real>(tape: &Tape<F>, rows: usize, cols: usize, allowed: impl Fn(usize, usize) -> bool) -> Var {
    let mut data = vec![F::neg_infinity(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            if allowed(r, c) {
                data[r * cols + c] = F::zero();
            }
        }
    }
    tape.constant(Tensor::new(&[rows, cols], data).expect("mask shape"))
}

impl<'t, F: Real> Graph<'t, F> {
    pub fn new(tape: &'t Tape<F>, params: &ModelParams<F>) -> Self {
        let vars = params.tensors().iter().map(|t| tape.param(t.clone())).collect();
        Graph {
            tape,
            vars,
            cfg: *params.config(),
        }
    }

    pub fn param_vars(&self) -> &[Var] {
        &self.vars
    }

    fn v(&self, slot: Slot) -> Var {
        self.vars[slot.index(self.cfg.n_layers)]
    }

    fn check_position(&self, max_pos: usize) -> Result<()> {
        if max_pos >= self.cfg.max_positions {
            return Err(Error::Overlength {
                len: max_pos + 1,
                max: self.cfg.max_positions,
            });
        }
        Ok(())
    }

    /// Positional rows for `positions`, repeated for every sequence.
    fn positions(&self, batch: usize, positions: &[usize]) -> Result<Var> {
        let rows: Vec<usize> = (0..batch).flat_map(|_| positions.iter().copied()).collect();
        self.tape.gather_rows(self.v(Slot::Positions), &rows)
    }

    /// Input head plus positional encoding for every token: `[B * n, d]`.
    fn embed(&self, b: &PromptBatch<F>) -> Result<Var> {
        self.check_position(b.seq_len - 1)?;
        let tape = self.tape;
        let tokens = tape.constant(Tensor::new(&[b.batch * b.seq_len, 2], b.iq.clone())?);
        let e = tape.matmul(tokens, self.v(Slot::InputW))?;
        let e = tape.add_bias(e, self.v(Slot::InputB))?;
        let pos: Vec<usize> = (0..b.seq_len).collect();
        tape.add(e, self.positions(b.batch, &pos)?)
    }

    fn linear(&self, x: Var, w: Slot, bias: Slot) -> Result<Var> {
        let y = self.tape.matmul(x, self.v(w))?;
        self.tape.add_bias(y, self.v(bias))
    }

    /// Pre-norm decoder layers over one segment `x: [batch * n, d]`.
    ///
    /// The segment's keys and values are appended to `caches`; `mask` is
    /// `[n, keys]` over the concatenation of all cached segments.
    fn layers(&self, mut x: Var, batch: usize, n: usize, mask: Var, caches: &mut [LayerKv]) -> Result<Var> {
        let tape = self.tape;
        let heads = self.cfg.n_heads;
        let inv_sqrt = F::of(1.0 / (self.cfg.head_dim() as f64).sqrt());
        for (l, kv) in caches.iter_mut().enumerate() {
            let h = tape.layer_norm(x, self.v(Slot::Ln1G(l)), self.v(Slot::Ln1B(l)))?;
            let q = self.linear(h, Slot::Wq(l), Slot::Bq(l))?;
            let k = self.linear(h, Slot::Wk(l), Slot::Bk(l))?;
            let v = self.linear(h, Slot::Wv(l), Slot::Bv(l))?;
            let q = tape.scale(tape.split_heads(q, batch, n, heads)?, inv_sqrt);
            kv.keys.push(tape.split_heads(k, batch, n, heads)?);
            kv.values.push(tape.split_heads(v, batch, n, heads)?);
            let keys = if kv.keys.len() == 1 { kv.keys[0] } else { tape.concat(&kv.keys)? };
            let values = if kv.values.len() == 1 { kv.values[0] } else { tape.concat(&kv.values)? };
            let scores = tape.batch_matmul(q, keys, true)?;
            let attn = tape.masked_softmax(scores, mask)?;
            let ctx = tape.batch_matmul(attn, values, false)?;
            let ctx = tape.merge_heads(ctx, batch, heads)?;
            x = tape.add(x, self.linear(ctx, Slot::Wo(l), Slot::Bo(l))?)?;

            let h = tape.layer_norm(x, self.v(Slot::Ln2G(l)), self.v(Slot::Ln2B(l)))?;
            let up = tape.gelu(self.linear(h, Slot::W1(l), Slot::B1(l))?);
            x = tape.add(x, self.linear(up, Slot::W2(l), Slot::B2(l))?)?;
        }
        tape.layer_norm(x, self.v(Slot::LnfG), self.v(Slot::LnfB))
    }

    fn fresh_caches(&self) -> Vec<LayerKv> {
        (0..self.cfg.n_layers).map(|_| LayerKv::default()).collect()
    }

    /// Final-norm hidden states of a plain causal pass: `[B * n, d]`.
    pub fn hidden(&self, b: &PromptBatch<F>) -> Result<Var> {
        let x = self.embed(b)?;
        let m = mask(self.tape, b.seq_len, b.seq_len, |r, c| c <= r);
        self.layers(x, b.batch, b.seq_len, m, &mut self.fresh_caches())
    }

    pub fn output_head(&self, h: Var) -> Result<Var> {
        self.linear(h, Slot::OutW, Slot::OutB)
    }

    fn query_rows(&self, b: &PromptBatch<F>) -> Vec<usize> {
        (0..b.batch)
            .flat_map(|s| b.query_positions.iter().map(move |&q| s * b.seq_len + q))
            .collect()
    }

    /// Predictions at every query position, `[B * queries, 2]`.
    pub fn vanilla(&self, b: &PromptBatch<F>) -> Result<Var> {
        let h = self.hidden(b)?;
        let h = self.tape.gather_rows(h, &self.query_rows(b))?;
        self.output_head(h)
    }

    /// Run `n_thoughts` latent steps at every query position.
    pub fn choose(&self, b: &PromptBatch<F>, n_thoughts: usize, mode: ChainMode) -> Result<ChainOutput> {
        if n_thoughts == 0 {
            return Err(Error::Config("thought chain needs at least one step".into()));
        }
        let last_query = *b.query_positions.iter().max().ok_or_else(|| Error::Prompt("no query".into()))?;
        self.check_position((b.seq_len - 1).max(last_query + n_thoughts - 1))?;
        let thoughts = match mode {
            ChainMode::Masked => self.chain_masked(b, n_thoughts)?,
            ChainMode::Unrolled => self.chain_unrolled(b, n_thoughts)?,
        };
        let predictions = self.output_head(*thoughts.last().unwrap())?;
        Ok(ChainOutput {
            predictions,
            thoughts,
        })
    }

    /// Output head applied to every thought: `C` tensors of `[B * queries, 2]`.
    pub fn unfold(&self, b: &PromptBatch<F>, n_thoughts: usize, mode: ChainMode) -> Result<Vec<Var>> {
        let out = self.choose(b, n_thoughts, mode)?;
        out.thoughts.iter().map(|&t| self.output_head(t)).collect()
    }

    fn chain_masked(&self, b: &PromptBatch<F>, n_thoughts: usize) -> Result<Vec<Var>> {
        let tape = self.tape;
        let (n0, nq) = (b.seq_len, b.n_queries());
        let qpos = &b.query_positions;
        let mut caches = self.fresh_caches();

        let base = self.embed(b)?;
        let m = mask(tape, n0, n0, |r, c| c <= r);
        let hidden = self.layers(base, b.batch, n0, m, &mut caches)?;
        let mut thoughts = vec![tape.gather_rows(hidden, &self.query_rows(b))?];

        for step in 1..n_thoughts {
            let pos: Vec<usize> = qpos.iter().map(|&p| p + step).collect();
            let x = tape.add(*thoughts.last().unwrap(), self.positions(b.batch, &pos)?)?;
            let keys = n0 + step * nq;
            let m = mask(tape, nq, keys, |q, c| {
                if c < n0 {
                    c <= qpos[q]
                } else {
                    (c - n0) % nq == q
                }
            });
            thoughts.push(self.layers(x, b.batch, nq, m, &mut caches)?);
        }
        Ok(thoughts)
    }

    fn chain_unrolled(&self, b: &PromptBatch<F>, n_thoughts: usize) -> Result<Vec<Var>> {
        let tape = self.tape;
        let (bs, n0, d) = (b.batch, b.seq_len, self.cfg.embed_dim);
        let embedded = self.embed(b)?;
        // per_step[j][q] is thought j+1 of query q, shape [B, d]
        let mut per_step: Vec<Vec<Var>> = vec![Vec::new(); n_thoughts];
        for &qp in &b.query_positions {
            let ctx_rows: Vec<usize> = (0..bs).flat_map(|s| (0..=qp).map(move |i| s * n0 + i)).collect();
            let ctx = tape.gather_rows(embedded, &ctx_rows)?;
            let ctx = tape.reshape(ctx, &[bs, qp + 1, d])?;
            let mut chain: Vec<Var> = Vec::new();
            for step in 0..n_thoughts {
                let mut parts = vec![ctx];
                for (s, &t) in chain.iter().enumerate() {
                    let x = tape.add(t, self.positions(bs, &[qp + 1 + s])?)?;
                    parts.push(tape.reshape(x, &[bs, 1, d])?);
                }
                let n = qp + 1 + step;
                let seq = if parts.len() == 1 { ctx } else { tape.concat(&parts)? };
                let seq = tape.reshape(seq, &[bs * n, d])?;
                let m = mask(tape, n, n, |r, c| c <= r);
                let h = self.layers(seq, bs, n, m, &mut self.fresh_caches())?;
                let last: Vec<usize> = (0..bs).map(|s| s * n + n - 1).collect();
                let t = tape.gather_rows(h, &last)?;
                per_step[step].push(t);
                chain.push(t);
            }
        }
        let nq = b.n_queries();
        per_step
            .into_iter()
            .map(|qs| {
                let parts = qs
                    .into_iter()
                    .map(|t| tape.reshape(t, &[bs, 1, d]))
                    .collect::<Result<Vec<_>>>()?;
                let all = tape.concat(&parts)?;
                tape.reshape(all, &[bs * nq, d])
            })
            .collect()
    }

    /// Sum over query positions of the squared complex error, averaged over
    /// the batch.
    pub fn loss(&self, predictions: Var, b: &PromptBatch<F>) -> Result<Var> {
        let targets = b
            .targets
            .clone()
            .ok_or_else(|| Error::Prompt("batch has no targets".into()))?;
        let t = self.tape.constant(Tensor::new(&[b.batch * b.n_queries(), 2], targets)?);
        let diff = self.tape.sub(predictions, t)?;
        let sq = self.tape.sum_squares(diff)?;
        Ok(self.tape.scale(sq, F::of(1.0 / b.batch as f64)))
    }
}
