use super::ModelConfig;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Real, Tensor};
use rand_distr::{Distribution, Normal};

pub const INIT_STD: f64 = 0.02;

const PER_LAYER: usize = 16;
const HEAD: usize = 3;

/// Index of a tensor inside [`ModelParams`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Slot {
    InputW,
    InputB,
    Positions,
    Ln1G(usize),
    Ln1B(usize),
    Wq(usize),
    Bq(usize),
    Wk(usize),
    Bk(usize),
    Wv(usize),
    Bv(usize),
    Wo(usize),
    Bo(usize),
    Ln2G(usize),
    Ln2B(usize),
    W1(usize),
    B1(usize),
    W2(usize),
    B2(usize),
    LnfG,
    LnfB,
    OutW,
    OutB,
}

impl Slot {
    pub fn index(self, n_layers: usize) -> usize {
        use Slot::*;
        let layer = |l: usize, o: usize| HEAD + PER_LAYER * l + o;
        let tail = HEAD + PER_LAYER * n_layers;
        match self {
            InputW => 0,
            InputB => 1,
            Positions => 2,
            Ln1G(l) => layer(l, 0),
            Ln1B(l) => layer(l, 1),
            Wq(l) => layer(l, 2),
            Bq(l) => layer(l, 3),
            Wk(l) => layer(l, 4),
            Bk(l) => layer(l, 5),
            Wv(l) => layer(l, 6),
            Bv(l) => layer(l, 7),
            Wo(l) => layer(l, 8),
            Bo(l) => layer(l, 9),
            Ln2G(l) => layer(l, 10),
            Ln2B(l) => layer(l, 11),
            W1(l) => layer(l, 12),
            B1(l) => layer(l, 13),
            W2(l) => layer(l, 14),
            B2(l) => layer(l, 15),
            LnfG => tail,
            LnfB => tail + 1,
            OutW => tail + 2,
            OutB => tail + 3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Init {
    Normal,
    Zeros,
    Ones,
}

/// Every tensor in canonical order: name, shape and initializer.
fn layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let d = cfg.embed_dim;
    let h = cfg.hidden_dim();
    let mut out = vec![
        ("input_head.weight".to_string(), vec![2, d], Init::Normal),
        ("input_head.bias".to_string(), vec![d], Init::Zeros),
        ("positions".to_string(), vec![cfg.max_positions, d], Init::Normal),
    ];
    for l in 0..cfg.n_layers {
        let p = |s: &str| format!("layers.{l}.{s}");
        out.extend([
            (p("ln1.gain"), vec![d], Init::Ones),
            (p("ln1.bias"), vec![d], Init::Zeros),
            (p("attn.q.weight"), vec![d, d], Init::Normal),
            (p("attn.q.bias"), vec![d], Init::Zeros),
            (p("attn.k.weight"), vec![d, d], Init::Normal),
            (p("attn.k.bias"), vec![d], Init::Zeros),
            (p("attn.v.weight"), vec![d, d], Init::Normal),
            (p("attn.v.bias"), vec![d], Init::Zeros),
            (p("attn.out.weight"), vec![d, d], Init::Normal),
            (p("attn.out.bias"), vec![d], Init::Zeros),
            (p("ln2.gain"), vec![d], Init::Ones),
            (p("ln2.bias"), vec![d], Init::Zeros),
            (p("mlp.up.weight"), vec![d, h], Init::Normal),
            (p("mlp.up.bias"), vec![h], Init::Zeros),
            (p("mlp.down.weight"), vec![h, d], Init::Normal),
            (p("mlp.down.bias"), vec![d], Init::Zeros),
        ]);
    }
    out.extend([
        ("final_norm.gain".to_string(), vec![d], Init::Ones),
        ("final_norm.bias".to_string(), vec![d], Init::Zeros),
        ("output_head.weight".to_string(), vec![d, 2], Init::Normal),
        ("output_head.bias".to_string(), vec![2], Init::Zeros),
    ]);
    out
}

/// All learnable tensors of one model, in a fixed canonical order.
///
/// Weight matrices are stored `[in, out]` so a row of activations maps as
/// `x · W`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<F> {
    config: ModelConfig,
    names: Vec<String>,
    tensors: Vec<Tensor<F>>,
}

impl<F: Real> ModelParams<F> {
    /// Gaussian weights (std 0.02), zero biases, unit norm gains.
    pub fn init(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        Self::init_with_std(config, INIT_STD, rng)
    }

    pub fn init_with_std(config: ModelConfig, std: f64, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let normal = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (name, shape, init) in layout(&config) {
            let numel: usize = shape.iter().product();
            let data: Vec<F> = match init {
                Init::Normal => (0..numel).map(|_| F::of(normal.sample(rng))).collect(),
                Init::Zeros => vec![F::zero(); numel],
                Init::Ones => vec![F::one(); numel],
            };
            names.push(name);
            tensors.push(Tensor::new(&shape, data)?);
        }
        Ok(ModelParams {
            config,
            names,
            tensors,
        })
    }

    /// Rebuild from tensors given in canonical order; shapes are checked.
    pub fn from_tensors(config: ModelConfig, tensors: Vec<Tensor<F>>) -> Result<Self> {
        config.validate()?;
        let lay = layout(&config);
        if lay.len() != tensors.len() {
            return Err(Error::Config(format!(
                "expected {} tensors, got {}",
                lay.len(),
                tensors.len()
            )));
        }
        for ((name, shape, _), t) in lay.iter().zip(&tensors) {
            if t.shape() != shape.as_slice() {
                return Err(Error::Shape {
                    op: "load parameter",
                    lhs: shape.clone(),
                    rhs: t.shape().to_vec(),
                })
                .map_err(|e| Error::Config(format!("{name}: {e}")));
            }
        }
        Ok(ModelParams {
            config,
            names: lay.into_iter().map(|(n, _, _)| n).collect(),
            tensors,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<F>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<F>] {
        &mut self.tensors
    }

    pub fn get(&self, slot: Slot) -> &Tensor<F> {
        &self.tensors[slot.index(self.config.n_layers)]
    }

    pub fn data(&self, slot: Slot) -> &[F] {
        self.get(slot).data()
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Whether the tensor is a bias (or norm offset), i.e. zero at init.
    pub fn is_bias(&self, index: usize) -> bool {
        self.names[index].ends_with(".bias")
    }

    pub fn cast<G: Real>(&self) -> ModelParams<G> {
        ModelParams {
            config: self.config,
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }
}
