//! Tape-free inference: incremental decoding with a key/value cache and a
//! plain whole-sequence pass used when caching is disabled.

use super::params::Slot;
use super::ModelParams;
use crate::error::{Error, Result};
use crate::tensor::kernels::{dot, gemm_nn, vecmat};
use crate::tensor::{gelu, layer_norm, masked_softmax, Real, LAYER_NORM_EPS};

/// Per-layer keys and values of every processed position.
#[derive(Clone, Debug)]
pub struct KvCache<F> {
    dim: usize,
    keys: Vec<Vec<F>>,
    values: Vec<Vec<F>>,
    len: usize,
}

impl<F: Real> KvCache<F> {
    pub fn new(n_layers: usize, dim: usize) -> Self {
        KvCache {
            dim,
            keys: vec![Vec::new(); n_layers],
            values: vec![Vec::new(); n_layers],
            len: 0,
        }
    }

    pub fn for_params(params: &ModelParams<F>) -> Self {
        let cfg = params.config();
        Self::new(cfg.n_layers, cfg.embed_dim)
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Key row `pos` of layer `layer`.
    pub fn key(&self, layer: usize, pos: usize) -> &[F] {
        &self.keys[layer][pos * self.dim..(pos + 1) * self.dim]
    }

    pub fn value(&self, layer: usize, pos: usize) -> &[F] {
        &self.values[layer][pos * self.dim..(pos + 1) * self.dim]
    }

    /// Drop every position from `len` on. Retained rows are untouched.
    pub fn truncate(&mut self, len: usize) {
        if len >= self.len {
            return;
        }
        for (k, v) in self.keys.iter_mut().zip(&mut self.values) {
            k.truncate(len * self.dim);
            v.truncate(len * self.dim);
        }
        self.len = len;
    }
}

/// Reusable buffers for single-token decoding.
pub struct Decoder<'p, F: Real> {
    params: &'p ModelParams<F>,
    x: Vec<F>,
    h: Vec<F>,
    q: Vec<F>,
    k: Vec<F>,
    v: Vec<F>,
    ctx: Vec<F>,
    up: Vec<F>,
    scores: Vec<F>,
    probs: Vec<F>,
    out: Vec<F>,
}

impl<'p, F: Real> Decoder<'p, F> {
    pub fn new(params: &'p ModelParams<F>) -> Self {
        let cfg = params.config();
        let d = cfg.embed_dim;
        Decoder {
            params,
            x: vec![F::zero(); d],
            h: vec![F::zero(); d],
            q: vec![F::zero(); d],
            k: vec![F::zero(); d],
            v: vec![F::zero(); d],
            ctx: vec![F::zero(); d],
            up: vec![F::zero(); cfg.hidden_dim()],
            scores: Vec::with_capacity(cfg.max_positions),
            probs: Vec::with_capacity(cfg.max_positions),
            out: vec![F::zero(); d],
        }
    }

    pub fn params(&self) -> &'p ModelParams<F> {
        self.params
    }

    /// Input head applied to one (I, Q) token, without position.
    pub fn embed_token(&self, iq: [F; 2]) -> Vec<F> {
        let p = self.params;
        let w = p.data(Slot::InputW);
        let d = p.config().embed_dim;
        let mut e = p.data(Slot::InputB).to_vec();
        for i in 0..d {
            e[i] += iq[0] * w[i] + iq[1] * w[d + i];
        }
        e
    }

    /// Output head applied to a final-norm hidden state.
    pub fn output_head(&self, hidden: &[F]) -> [F; 2] {
        let w = self.params.data(Slot::OutW);
        let b = self.params.data(Slot::OutB);
        let mut o = [b[0], b[1]];
        for (i, &hv) in hidden.iter().enumerate() {
            o[0] += hv * w[2 * i];
            o[1] += hv * w[2 * i + 1];
        }
        o
    }

    /// Process one embedding at `position == cache.len()`, appending its
    /// keys and values, and return the final-norm hidden state.
    pub fn step(&mut self, cache: &mut KvCache<F>, embedding: &[F], position: usize) -> Result<&[F]> {
        let p = self.params;
        let cfg = *p.config();
        let d = cfg.embed_dim;
        if position != cache.len {
            return Err(Error::CachePosition {
                expected: cache.len,
                got: position,
            });
        }
        if position >= cfg.max_positions {
            return Err(Error::Overlength {
                len: position + 1,
                max: cfg.max_positions,
            });
        }
        if embedding.len() != d {
            return Err(Error::Shape {
                op: "step",
                lhs: vec![d],
                rhs: vec![embedding.len()],
            });
        }
        let pos = &p.data(Slot::Positions)[position * d..(position + 1) * d];
        for i in 0..d {
            self.x[i] = embedding[i] + pos[i];
        }
        let eps = F::of(LAYER_NORM_EPS);
        let heads = cfg.n_heads;
        let dh = cfg.head_dim();
        let scale = F::of(1.0 / (dh as f64).sqrt());
        let n_keys = position + 1;

        for l in 0..cfg.n_layers {
            layer_norm(&self.x, p.data(Slot::Ln1G(l)), p.data(Slot::Ln1B(l)), eps, &mut self.h);
            affine(&self.h, p.data(Slot::Wq(l)), p.data(Slot::Bq(l)), &mut self.q);
            affine(&self.h, p.data(Slot::Wk(l)), p.data(Slot::Bk(l)), &mut self.k);
            affine(&self.h, p.data(Slot::Wv(l)), p.data(Slot::Bv(l)), &mut self.v);
            cache.keys[l].extend_from_slice(&self.k);
            cache.values[l].extend_from_slice(&self.v);

            let keys = &cache.keys[l];
            let values = &cache.values[l];
            for hd in 0..heads {
                let qh = &self.q[hd * dh..(hd + 1) * dh];
                self.scores.clear();
                for j in 0..n_keys {
                    self.scores.push(dot(qh, &keys[j * d + hd * dh..j * d + (hd + 1) * dh]) * scale);
                }
                let mut max = F::neg_infinity();
                for &s in &self.scores {
                    max = max.max(s);
                }
                let mut total = F::zero();
                self.probs.clear();
                for &s in &self.scores {
                    let e = (s - max).exp();
                    total += e;
                    self.probs.push(e);
                }
                let inv = total.recip();
                let ctx = &mut self.ctx[hd * dh..(hd + 1) * dh];
                ctx.iter_mut().for_each(|c| *c = F::zero());
                for (j, &pr) in self.probs.iter().enumerate() {
                    let w = pr * inv;
                    for (c, &vv) in ctx.iter_mut().zip(&values[j * d + hd * dh..j * d + (hd + 1) * dh]) {
                        *c += w * vv;
                    }
                }
            }
            affine(&self.ctx, p.data(Slot::Wo(l)), p.data(Slot::Bo(l)), &mut self.out);
            for i in 0..d {
                self.x[i] += self.out[i];
            }

            layer_norm(&self.x, p.data(Slot::Ln2G(l)), p.data(Slot::Ln2B(l)), eps, &mut self.h);
            affine(&self.h, p.data(Slot::W1(l)), p.data(Slot::B1(l)), &mut self.up);
            for u in self.up.iter_mut() {
                *u = gelu(*u);
            }
            affine(&self.up, p.data(Slot::W2(l)), p.data(Slot::B2(l)), &mut self.out);
            for i in 0..d {
                self.x[i] += self.out[i];
            }
        }
        cache.len += 1;
        layer_norm(&self.x, p.data(Slot::LnfG), p.data(Slot::LnfB), eps, &mut self.h);
        Ok(&self.h)
    }
}

fn affine<F: Real>(x: &[F], w: &[F], b: &[F], y: &mut [F]) {
    y.copy_from_slice(b);
    vecmat(x, w, y);
}

/// Whole-sequence causal pass without a cache: `embeddings` is `[n, d]`
/// (positional encoding not yet added) and the result holds the
/// final-norm hidden state of every position.
pub fn forward_full<F: Real>(params: &ModelParams<F>, embeddings: &[F]) -> Result<Vec<F>> {
    let cfg = *params.config();
    let d = cfg.embed_dim;
    let n = embeddings.len() / d;
    if n == 0 || embeddings.len() % d != 0 {
        return Err(Error::Shape {
            op: "forward_full",
            lhs: vec![embeddings.len()],
            rhs: vec![d],
        });
    }
    if n > cfg.max_positions {
        return Err(Error::Overlength {
            len: n,
            max: cfg.max_positions,
        });
    }
    let p = params;
    let eps = F::of(LAYER_NORM_EPS);
    let (heads, dh, hid) = (cfg.n_heads, cfg.head_dim(), cfg.hidden_dim());
    let scale = F::of(1.0 / (dh as f64).sqrt());

    let mut x = embeddings.to_vec();
    for (xi, &pi) in x.iter_mut().zip(&p.data(Slot::Positions)[..n * d]) {
        *xi += pi;
    }
    let mut mask = vec![F::neg_infinity(); n * n];
    for r in 0..n {
        for c in 0..=r {
            mask[r * n + c] = F::zero();
        }
    }
    let mut h = vec![F::zero(); n * d];
    let dense = |input: &[F], w: Slot, b: Slot, cols: usize| {
        let bias = p.data(b);
        let mut out: Vec<F> = (0..n).flat_map(|_| bias.iter().copied()).collect();
        gemm_nn(input, p.data(w), &mut out, n, input.len() / n, cols);
        out
    };
    for l in 0..cfg.n_layers {
        layer_norm(&x, p.data(Slot::Ln1G(l)), p.data(Slot::Ln1B(l)), eps, &mut h);
        let q = dense(&h, Slot::Wq(l), Slot::Bq(l), d);
        let k = dense(&h, Slot::Wk(l), Slot::Bk(l), d);
        let v = dense(&h, Slot::Wv(l), Slot::Bv(l), d);
        let mut ctx = vec![F::zero(); n * d];
        let mut scores = vec![F::zero(); n * n];
        let mut probs = vec![F::zero(); n * n];
        for hd in 0..heads {
            for r in 0..n {
                for c in 0..n {
                    scores[r * n + c] = dot(&q[r * d + hd * dh..][..dh], &k[c * d + hd * dh..][..dh]) * scale;
                }
            }
            masked_softmax(&scores, &mask, n, &mut probs)?;
            for r in 0..n {
                for c in 0..=r {
                    let w = probs[r * n + c];
                    for e in 0..dh {
                        ctx[r * d + hd * dh + e] += w * v[c * d + hd * dh + e];
                    }
                }
            }
        }
        let o = dense(&ctx, Slot::Wo(l), Slot::Bo(l), d);
        x.iter_mut().zip(&o).for_each(|(a, &b)| *a += b);

        layer_norm(&x, p.data(Slot::Ln2G(l)), p.data(Slot::Ln2B(l)), eps, &mut h);
        let mut up = dense(&h, Slot::W1(l), Slot::B1(l), hid);
        up.iter_mut().for_each(|u| *u = gelu(*u));
        let o = dense(&up, Slot::W2(l), Slot::B2(l), d);
        x.iter_mut().zip(&o).for_each(|(a, &b)| *a += b);
    }
    layer_norm(&x, p.data(Slot::LnfG), p.data(Slot::LnfB), eps, &mut h);
    Ok(h)
}

/// Latent thought chain of one query whose context (pilot tokens, when any)
/// is already in `cache`. The query token goes in at `cache.len()`; the
/// cache is restored to its original length on return.
///
/// Returns `C` thoughts (one for the vanilla model), each of length `d`.
pub fn chain_cached<F: Real>(
    dec: &mut Decoder<'_, F>,
    cache: &mut KvCache<F>,
    query_iq: [F; 2],
    n_steps: usize,
) -> Result<Vec<Vec<F>>> {
    let mark = cache.len();
    let emb = dec.embed_token(query_iq);
    let mut thoughts = Vec::with_capacity(n_steps);
    let first = dec.step(cache, &emb, mark);
    let first = match first {
        Ok(h) => h.to_vec(),
        Err(e) => {
            cache.truncate(mark);
            return Err(e);
        }
    };
    thoughts.push(first);
    for j in 1..n_steps {
        let next = dec.step(cache, &thoughts[j - 1].clone(), mark + j);
        match next {
            Ok(h) => thoughts.push(h.to_vec()),
            Err(e) => {
                cache.truncate(mark);
                return Err(e);
            }
        }
    }
    cache.truncate(mark);
    Ok(thoughts)
}

/// Same chain as [`chain_cached`], recomputing the whole sequence with
/// [`forward_full`] at every step. `context` holds embeddings (input head
/// only) of the tokens preceding the query.
pub fn chain_uncached<F: Real>(
    params: &ModelParams<F>,
    context: &[F],
    query_embedding: &[F],
    n_steps: usize,
) -> Result<Vec<Vec<F>>> {
    let d = params.config().embed_dim;
    let mut seq = context.to_vec();
    seq.extend_from_slice(query_embedding);
    let mut thoughts: Vec<Vec<F>> = Vec::with_capacity(n_steps);
    for _ in 0..n_steps {
        if let Some(t) = thoughts.last() {
            seq.extend_from_slice(t);
        }
        let h = forward_full(params, &seq)?;
        thoughts.push(h[h.len() - d..].to_vec());
    }
    Ok(thoughts)
}
