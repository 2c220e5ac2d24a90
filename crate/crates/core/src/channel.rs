//! SISO Rayleigh block-fading channel and prompt assembly.
//!
//! Within a coherence block of `T` symbols the receiver observes
//! `y_t = h x_t + z_t` with `h ~ CN(0, 1)` fixed over the block,
//! `x_t` uniform over a unit-power QAM constellation and
//! `z_t ~ CN(0, sigma2)`. The SNR is `1 / sigma2`.

use crate::error::{Error, Result};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// Square QAM constellation scaled to unit mean power.
///
/// Point `label = row * side + col` sits at
/// `((2 col - side + 1) + j (2 row - side + 1)) * scale`.
#[derive(Clone, Debug, PartialEq)]
pub struct Constellation {
    order: usize,
    side: usize,
    scale: f64,
    points: Vec<Complex64>,
}

impl Constellation {
    pub fn new(order: usize) -> Result<Self> {
        let side = match order {
            4 => 2,
            16 => 4,
            64 => 8,
            _ => return Err(Error::UnsupportedOrder(order)),
        };
        let levels: Vec<f64> = (0..side).map(|i| (2 * i) as f64 - (side - 1) as f64).collect();
        let raw: f64 = levels
            .iter()
            .flat_map(|&a| levels.iter().map(move |&b| a * a + b * b))
            .sum::<f64>()
            / order as f64;
        let scale = raw.sqrt().recip();
        let mut points = Vec::with_capacity(order);
        for &im in &levels {
            for &re in &levels {
                points.push(Complex64::new(re * scale, im * scale));
            }
        }
        Ok(Constellation {
            order,
            side,
            scale,
            points,
        })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn points(&self) -> &[Complex64] {
        &self.points
    }

    pub fn point(&self, label: usize) -> Complex64 {
        self.points[label]
    }

    /// Factor applied to the odd-integer grid.
    pub fn scale(&self) -> f64 {
        self.scale
    }

    /// Largest absolute coordinate of any point.
    pub fn max_coord(&self) -> f64 {
        (self.side - 1) as f64 * self.scale
    }

    pub fn mean_power(&self) -> f64 {
        self.points.iter().map(Complex64::norm_sqr).sum::<f64>() / self.order as f64
    }

    /// Label of the nearest point; ties go to the lowest label.
    pub fn project_nearest(&self, z: Complex64) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (i, p) in self.points.iter().enumerate() {
            let d = (z - p).norm_sqr();
            if d < best_d {
                best = i;
                best_d = d;
            }
        }
        best
    }

    pub fn sample_label<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        rng.random_range(0..self.order)
    }
}

/// Converts SNR in dB to noise variance, `10^(-snr_db / 10)`.
pub fn snr_db_to_sigma2(snr_db: f64) -> f64 {
    10f64.powf(-snr_db / 10.0)
}

/// One realization of the channel: coefficient and noise level.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FadingTask {
    pub h: Complex64,
    pub sigma2: f64,
}

impl FadingTask {
    pub fn new(h: Complex64, sigma2: f64) -> Result<Self> {
        if !(sigma2 >= 0.0) {
            return Err(Error::NoiseVariance(sigma2));
        }
        Ok(FadingTask { h, sigma2 })
    }

    pub fn snr_db(&self) -> f64 {
        -10.0 * self.sigma2.log10()
    }

    /// Draw `h ~ CN(0, 1)` and an SNR uniform over `[lo, hi]` dB.
    pub fn sample<R: Rng + ?Sized>(rng: &mut R, snr_range_db: [f64; 2]) -> Self {
        let [lo, hi] = snr_range_db;
        debug_assert!(lo <= hi);
        let h = complex_gaussian(rng, 1.0);
        let snr_db = if lo == hi { lo } else { rng.random_range(lo..=hi) };
        FadingTask {
            h,
            sigma2: snr_db_to_sigma2(snr_db),
        }
    }
}

/// Circularly-symmetric complex Gaussian with total variance `var`.
pub fn complex_gaussian<R: Rng + ?Sized>(rng: &mut R, var: f64) -> Complex64 {
    let s = (var / 2.0).sqrt();
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    Complex64::new(re * s, im * s)
}

/// `T` consecutive symbols sharing one channel realization.
#[derive(Clone, Debug, PartialEq)]
pub struct CoherenceBlock {
    pub task: FadingTask,
    pub labels: Vec<usize>,
    pub x: Vec<Complex64>,
    pub y: Vec<Complex64>,
}

impl CoherenceBlock {
    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    /// Simulate `len` symbols of `y_t = h x_t + z_t`.
    pub fn simulate<R: Rng + ?Sized>(
        task: FadingTask,
        len: usize,
        constellation: &Constellation,
        rng: &mut R,
    ) -> Self {
        assert!(len >= 1, "block length must be positive");
        let mut labels = Vec::with_capacity(len);
        let mut x = Vec::with_capacity(len);
        let mut y = Vec::with_capacity(len);
        for _ in 0..len {
            let label = constellation.sample_label(rng);
            let xt = constellation.point(label);
            let z = if task.sigma2 > 0.0 {
                complex_gaussian(rng, task.sigma2)
            } else {
                Complex64::new(0.0, 0.0)
            };
            labels.push(label);
            x.push(xt);
            y.push(task.h * xt + z);
        }
        CoherenceBlock { task, labels, x, y }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Role {
    Received,
    Transmitted,
}

/// One prompt token: a complex value split into (I, Q).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Token {
    pub role: Role,
    pub iq: [f64; 2],
}

impl Token {
    fn new(role: Role, z: Complex64) -> Self {
        Token {
            role,
            iq: [z.re, z.im],
        }
    }

    pub fn value(&self) -> Complex64 {
        Complex64::new(self.iq[0], self.iq[1])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PromptMode {
    /// `(y_1, x_1, ..., y_T, x_T)`, every received token is a query.
    TrainFull,
    /// `(y_1, x_1, ..., y_k, x_k, y_t)` with 1-based `t`; only the last
    /// token is a query.
    Eval { k: usize, t: usize },
}

/// Interleaved received/transmitted token sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptSequence {
    pub tokens: Vec<Token>,
    pub query_positions: Vec<usize>,
}

impl PromptSequence {
    pub fn assemble(block: &CoherenceBlock, mode: PromptMode) -> Result<Self> {
        let len = block.len();
        match mode {
            PromptMode::TrainFull => {
                let mut tokens = Vec::with_capacity(2 * len);
                for (&y, &x) in block.y.iter().zip(&block.x) {
                    tokens.push(Token::new(Role::Received, y));
                    tokens.push(Token::new(Role::Transmitted, x));
                }
                Ok(PromptSequence {
                    tokens,
                    query_positions: (0..len).map(|t| 2 * t).collect(),
                })
            }
            PromptMode::Eval { k, t } => {
                if !(k < t && t <= len) {
                    return Err(Error::Prompt(format!(
                        "evaluation needs 0 <= k < t <= T, got k={k}, t={t}, T={len}"
                    )));
                }
                let mut tokens = Vec::with_capacity(2 * k + 1);
                for i in 0..k {
                    tokens.push(Token::new(Role::Received, block.y[i]));
                    tokens.push(Token::new(Role::Transmitted, block.x[i]));
                }
                tokens.push(Token::new(Role::Received, block.y[t - 1]));
                Ok(PromptSequence {
                    tokens,
                    query_positions: vec![2 * k],
                })
            }
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn values(&self, role: Role) -> Vec<Complex64> {
        self.tokens
            .iter()
            .filter(|t| t.role == role)
            .map(Token::value)
            .collect()
    }
}
