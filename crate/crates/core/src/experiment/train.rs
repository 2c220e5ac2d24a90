use super::checkpoint::{Checkpoint, Provenance};
use super::config::TrainConfig;
use crate::channel::{CoherenceBlock, Constellation, FadingTask};
use crate::error::{Error, Result};
use crate::model::{Graph, ModelParams, PromptBatch};
use crate::rng::{Purpose, Streams};
use crate::tensor::Tape;
use rayon::prelude::*;

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    t: i32,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(params: &ModelParams<f32>, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Vec<f32>> = params.tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
        Adam {
            m: zeros.clone(),
            v: zeros,
            t: 0,
            beta1,
            beta2,
            eps,
        }
    }

    pub fn step(&mut self, params: &mut ModelParams<f32>, grads: &[Vec<f32>], lr: f64) {
        self.t += 1;
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let step = (lr * c2.sqrt() / c1) as f32;
        let eps = (self.eps * c2.sqrt()) as f32;
        for (((p, g), m), v) in params.tensors_mut().iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= step * *m / (v.sqrt() + eps);
            }
        }
    }
}

/// Blocks of training step `step`; each sequence has its own stream so the
/// batch does not depend on sharding or thread count.
pub fn training_batch(cfg: &TrainConfig, constellation: &Constellation, step: usize) -> Vec<CoherenceBlock> {
    let streams = Streams::new(cfg.seed);
    let b = cfg.optim.batch_size;
    (0..b)
        .map(|i| {
            let mut rng = streams.stream(Purpose::Train, (step * b + i) as u64);
            let task = FadingTask::sample(&mut rng, cfg.snr_range());
            CoherenceBlock::simulate(task, cfg.block_len, constellation, &mut rng)
        })
        .collect()
}

/// Batch loss (sum over queries, mean over sequences) and its gradient
/// with respect to every parameter tensor.
pub fn loss_and_grad(
    params: &ModelParams<f32>,
    blocks: &[CoherenceBlock],
    cfg: &TrainConfig,
) -> Result<(f64, Vec<Vec<f32>>)> {
    let total = blocks.len() as f64;
    let shards: Vec<Result<(f64, Vec<Vec<f32>>)>> = blocks
        .par_chunks(cfg.shard_size)
        .map(|shard| {
            let batch = PromptBatch::<f32>::training(shard)?;
            let tape = Tape::new();
            let g = Graph::new(&tape, params);
            let preds = match params.config().n_thoughts {
                0 => g.vanilla(&batch)?,
                c => g.choose(&batch, c, cfg.chain_mode)?.predictions,
            };
            let loss = g.loss(preds, &batch)?;
            let w = shard.len() as f64 / total;
            let value = tape.value(loss)[0] as f64 * w;
            let mut grads = tape.backward(loss)?;
            let gs = g
                .param_vars()
                .iter()
                .map(|&v| {
                    let mut gv = grads.take(v).unwrap_or_else(|| vec![0.0; tape.value(v).len()]);
                    gv.iter_mut().for_each(|x| *x *= w as f32);
                    gv
                })
                .collect();
            Ok((value, gs))
        })
        .collect();
    let mut shards = shards.into_iter();
    let (mut loss, mut grads) = shards.next().expect("non-empty batch")?;
    for s in shards {
        let (l, g) = s?;
        loss += l;
        for (acc, gi) in grads.iter_mut().zip(g) {
            acc.iter_mut().zip(gi).for_each(|(a, b)| *a += b);
        }
    }
    Ok((loss, grads))
}

/// Scale `grads` so their global L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm(grads: &mut [Vec<f32>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .map(|&g| (g as f64) * (g as f64))
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = (max_norm / norm) as f32;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub lr: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub history: Vec<StepRecord>,
}

impl TrainOutcome {
    /// Mean loss over the last `n` steps.
    pub fn tail_loss(&self, n: usize) -> f64 {
        let tail = &self.history[self.history.len().saturating_sub(n)..];
        tail.iter().map(|r| r.loss).sum::<f64>() / tail.len() as f64
    }
}

/// Train from a fresh initialization. `observe` sees every step.
pub fn train(cfg: &TrainConfig, observe: &mut dyn FnMut(&StepRecord)) -> Result<TrainOutcome> {
    cfg.validate()?;
    let streams = Streams::new(cfg.seed);
    let params = ModelParams::<f32>::init(cfg.model, &mut streams.stream(Purpose::Init, 0))?;
    train_from(cfg, params, observe)
}

/// Continue optimizing `params` (optimizer state starts fresh).
pub fn train_from(
    cfg: &TrainConfig,
    mut params: ModelParams<f32>,
    observe: &mut dyn FnMut(&StepRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let constellation = Constellation::new(cfg.modulation)?;
    let o = &cfg.optim;
    let mut adam = Adam::new(&params, o.beta1, o.beta2, o.eps);
    let mut history = Vec::with_capacity(o.steps);
    let hash = cfg.hash();
    let snapshot = |params: &ModelParams<f32>, history: &[StepRecord]| {
        let n = history.len().min(cfg.log_every.max(1));
        let tail = &history[history.len() - n..];
        let provenance = Provenance {
            config_hash: hash.clone(),
            step: history.len(),
            final_loss: tail.iter().map(|r| r.loss).sum::<f64>() / n.max(1) as f64,
            modulation: cfg.modulation,
            snr_range_db: cfg.snr_range(),
        };
        Checkpoint::new(cfg.name.clone(), params.clone(), Some(provenance))
    };
    for step in 0..o.steps {
        let blocks = training_batch(cfg, &constellation, step);
        let (loss, mut grads) = loss_and_grad(&params, &blocks, cfg)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step, loss });
        }
        let grad_norm = clip_grad_norm(&mut grads, o.grad_clip);
        let lr = o.lr_at(step);
        adam.step(&mut params, &grads, lr);
        let rec = StepRecord {
            step,
            loss,
            grad_norm,
            lr,
        };
        observe(&rec);
        history.push(rec);
        if let Some(dir) = &cfg.checkpoint_dir {
            if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 && step + 1 < o.steps {
                snapshot(&params, &history).save(dir)?;
            }
        }
    }
    let checkpoint = snapshot(&params, &history);
    if let Some(dir) = &cfg.checkpoint_dir {
        checkpoint.save(dir)?;
    }
    Ok(TrainOutcome { checkpoint, history })
}
