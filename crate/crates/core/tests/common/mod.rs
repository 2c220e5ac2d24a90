#![allow(dead_code)]

use choose::channel::{CoherenceBlock, Constellation, FadingTask};
use choose::model::{ModelConfig, ModelParams};
use choose::rng::{Purpose, Streams};
use choose::tensor::Real;

pub const T: usize = 11;

pub fn params<F: Real>(layers: usize, thoughts: usize, std: f64, seed: u64) -> ModelParams<F> {
    let cfg = ModelConfig::for_block(layers, thoughts, T);
    ModelParams::init_with_std(cfg, std, &mut Streams::new(seed).stream(Purpose::Test, 0)).unwrap()
}

pub fn blocks(order: usize, snr_db: f64, n: usize, len: usize, seed: u64) -> Vec<CoherenceBlock> {
    let c = Constellation::new(order).unwrap();
    let mut rng = Streams::new(seed).stream(Purpose::Test, 1);
    (0..n)
        .map(|_| {
            let task = FadingTask::sample(&mut rng, [snr_db, snr_db]);
            CoherenceBlock::simulate(task, len, &c, &mut rng)
        })
        .collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// `max |a - b| / max(max |b|, 1)`.
pub fn rel_diff(a: &[f64], b: &[f64]) -> f64 {
    let scale = b.iter().map(|v| v.abs()).fold(1.0, f64::max);
    max_abs_diff(a, b) / scale
}

/// Worst relative gradient error of the training loss of a CHOOSE chain,
/// over every parameter coordinate.
pub fn choose_grad_error(
    params: &ModelParams<f64>,
    blocks: &[CoherenceBlock],
    thoughts: usize,
    mode: choose::model::ChainMode,
) -> f64 {
    use choose::model::{Graph, PromptBatch};
    use choose::tensor::{grad_check, Tape, Tensor};
    let cfg = *params.config();
    let batch = PromptBatch::<f64>::training(blocks).unwrap();
    let mut f = |xs: &[Tensor<f64>]| {
        let p = ModelParams::from_tensors(cfg, xs.to_vec()).unwrap();
        let tape = Tape::new();
        let g = Graph::new(&tape, &p);
        let out = g.choose(&batch, thoughts, mode).unwrap();
        let loss = g.loss(out.predictions, &batch).unwrap();
        let value = tape.value(loss)[0];
        let mut grads = tape.backward(loss).unwrap();
        let gs = g.param_vars().iter().map(|&v| grads.take(v).unwrap_or_else(|| vec![0.0; tape.value(v).len()])).collect();
        (value, gs)
    };
    grad_check(&mut f, params.tensors())
}
