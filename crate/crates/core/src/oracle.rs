//! Conditional-mean (MMSE) detector for the Rayleigh block-fading model.
//!
//! Given pilots `x_1..x_k`, observations `y_1..y_{k+1}` and a candidate `x`
//! for the query symbol, the stacked observation vector is zero-mean
//! complex Gaussian with covariance `C(x) = a · s s^H + sigma2 · I`, where
//! `s = (x_1, .., x_k, x)`. The posterior over candidates is the
//! normalized likelihood, and the estimate is the posterior mean.
//!
//! Because `C(x)` is a rank-one update of a scaled identity, its inverse
//! and determinant have closed forms, and the likelihood of every
//! candidate costs O(1) once the pilot sums are known.

use crate::channel::Constellation;
use crate::error::{Error, Result};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// Likelihood model used for the posterior.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Covariance {
    /// Circularly-symmetric complex Gaussian: `C = s s^H + sigma2 I`,
    /// density `exp(-y^H C^-1 y) / (pi^n det C)`. This is the exact law of
    /// `y = h s + z` with `h ~ CN(0, 1)`, `z ~ CN(0, sigma2 I)`.
    #[default]
    Circular,
    /// `C = s s^H / 2 + sigma2 I` with density
    /// `exp(-y^H C^-1 y / 2) / sqrt(det C)`.
    HalfOuter,
}

impl Covariance {
    fn outer_scale(self) -> f64 {
        match self {
            Covariance::Circular => 1.0,
            Covariance::HalfOuter => 0.5,
        }
    }

    /// Log-density up to a candidate-independent constant, given the
    /// quadratic form and log-determinant.
    fn log_density(self, quad: f64, logdet: f64, n: usize) -> f64 {
        match self {
            Covariance::Circular => -quad - logdet - n as f64 * PI.ln(),
            Covariance::HalfOuter => -0.5 * quad - 0.5 * logdet,
        }
    }
}

/// How `C(x)^-1` and `det C(x)` are evaluated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Solver {
    #[default]
    ShermanMorrison,
    /// Dense Cholesky factorization of the `(k+1) x (k+1)` matrix.
    Dense,
}

/// Observations for one query.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleInstance {
    pub pilots: Vec<Complex64>,
    /// `y_1..y_k` followed by the query observation.
    pub received: Vec<Complex64>,
    pub sigma2: f64,
}

impl OracleInstance {
    pub fn new(pilots: Vec<Complex64>, received: Vec<Complex64>, sigma2: f64) -> Result<Self> {
        if received.len() != pilots.len() + 1 {
            return Err(Error::Shape {
                op: "oracle instance",
                lhs: vec![pilots.len()],
                rhs: vec![received.len()],
            });
        }
        if !(sigma2 > 0.0) {
            return Err(Error::NoiseVariance(sigma2));
        }
        Ok(OracleInstance {
            pilots,
            received,
            sigma2,
        })
    }

    pub fn k(&self) -> usize {
        self.pilots.len()
    }

    fn stacked(&self, candidate: Complex64) -> Vec<Complex64> {
        let mut s = self.pilots.clone();
        s.push(candidate);
        s
    }
}

/// `y^H C^-1 y` and `ln det C` for `C = a s s^H + sigma2 I`, using
/// `C^-1 = (I - a s s^H / (sigma2 + a |s|^2)) / sigma2` and
/// `det C = sigma2^n (1 + a |s|^2 / sigma2)`.
pub fn sherman_morrison_solve(
    s: &[Complex64],
    y: &[Complex64],
    sigma2: f64,
    outer_scale: f64,
) -> Result<(f64, f64)> {
    if s.len() != y.len() {
        return Err(Error::Shape {
            op: "sherman_morrison_solve",
            lhs: vec![s.len()],
            rhs: vec![y.len()],
        });
    }
    if !(sigma2 > 0.0) {
        return Err(Error::NoiseVariance(sigma2));
    }
    let s_norm2: f64 = s.iter().map(Complex64::norm_sqr).sum();
    let y_norm2: f64 = y.iter().map(Complex64::norm_sqr).sum();
    let proj: Complex64 = s.iter().zip(y).map(|(a, b)| a.conj() * b).sum();
    Ok(rank_one_terms(s.len(), s_norm2, y_norm2, proj.norm_sqr(), sigma2, outer_scale))
}

fn rank_one_terms(n: usize, s_norm2: f64, y_norm2: f64, proj2: f64, sigma2: f64, a: f64) -> (f64, f64) {
    let quad = (y_norm2 - a * proj2 / (sigma2 + a * s_norm2)) / sigma2;
    let logdet = n as f64 * sigma2.ln() + (a * s_norm2 / sigma2).ln_1p();
    (quad, logdet)
}

/// Same quantities as [`sherman_morrison_solve`] through an explicit
/// Cholesky factorization `C = L L^H`.
pub fn dense_solve(s: &[Complex64], y: &[Complex64], sigma2: f64, outer_scale: f64) -> Result<(f64, f64)> {
    let n = s.len();
    if y.len() != n {
        return Err(Error::Shape {
            op: "dense_solve",
            lhs: vec![n],
            rhs: vec![y.len()],
        });
    }
    if !(sigma2 > 0.0) {
        return Err(Error::NoiseVariance(sigma2));
    }
    let mut c = vec![Complex64::new(0.0, 0.0); n * n];
    for i in 0..n {
        for j in 0..n {
            c[i * n + j] = outer_scale * s[i] * s[j].conj();
        }
        c[i * n + i] += sigma2;
    }
    let mut l = vec![Complex64::new(0.0, 0.0); n * n];
    for j in 0..n {
        let mut diag = c[j * n + j].re;
        for p in 0..j {
            diag -= l[j * n + p].norm_sqr();
        }
        let ljj = diag.sqrt();
        l[j * n + j] = Complex64::new(ljj, 0.0);
        for i in j + 1..n {
            let mut v = c[i * n + j];
            for p in 0..j {
                v -= l[i * n + p] * l[j * n + p].conj();
            }
            l[i * n + j] = v / ljj;
        }
    }
    // forward substitution L w = y, then y^H C^-1 y = |w|^2
    let mut w = vec![Complex64::new(0.0, 0.0); n];
    for i in 0..n {
        let mut v = y[i];
        for p in 0..i {
            v -= l[i * n + p] * w[p];
        }
        w[i] = v / l[i * n + i];
    }
    let quad = w.iter().map(Complex64::norm_sqr).sum();
    let logdet = 2.0 * (0..n).map(|i| l[i * n + i].re.ln()).sum::<f64>();
    Ok((quad, logdet))
}

/// Log-likelihood of `candidate` as the query symbol, up to a constant
/// shared by all candidates.
pub fn log_likelihood(
    instance: &OracleInstance,
    candidate: Complex64,
    covariance: Covariance,
    solver: Solver,
) -> Result<f64> {
    let s = instance.stacked(candidate);
    let a = covariance.outer_scale();
    let (quad, logdet) = match solver {
        Solver::ShermanMorrison => sherman_morrison_solve(&s, &instance.received, instance.sigma2, a)?,
        Solver::Dense => dense_solve(&s, &instance.received, instance.sigma2, a)?,
    };
    Ok(covariance.log_density(quad, logdet, s.len()))
}

/// Posterior over the constellation for one query.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorTable {
    pub log_likelihoods: Vec<f64>,
    pub probabilities: Vec<f64>,
}

impl PosteriorTable {
    fn from_log_likelihoods(log_likelihoods: Vec<f64>) -> Self {
        let max = log_likelihoods.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut probabilities: Vec<f64> = log_likelihoods.iter().map(|&l| (l - max).exp()).collect();
        let total: f64 = probabilities.iter().sum();
        probabilities.iter_mut().for_each(|p| *p /= total);
        PosteriorTable {
            log_likelihoods,
            probabilities,
        }
    }

    /// `sum_x x P(x)`.
    pub fn mean(&self, constellation: &Constellation) -> Complex64 {
        constellation
            .points()
            .iter()
            .zip(&self.probabilities)
            .map(|(x, &p)| x * p)
            .sum()
    }
}

/// Conditional-mean detector over a fixed constellation.
#[derive(Clone, Debug)]
pub struct MmseOracle {
    constellation: Constellation,
    covariance: Covariance,
    solver: Solver,
}

impl MmseOracle {
    pub fn new(constellation: Constellation, covariance: Covariance) -> Self {
        MmseOracle {
            constellation,
            covariance,
            solver: Solver::ShermanMorrison,
        }
    }

    pub fn with_solver(mut self, solver: Solver) -> Self {
        self.solver = solver;
        self
    }

    pub fn constellation(&self) -> &Constellation {
        &self.constellation
    }

    pub fn covariance(&self) -> Covariance {
        self.covariance
    }

    pub fn posterior(&self, instance: &OracleInstance) -> Result<PosteriorTable> {
        let lls = match self.solver {
            Solver::Dense => self
                .constellation
                .points()
                .iter()
                .map(|&x| log_likelihood(instance, x, self.covariance, Solver::Dense))
                .collect::<Result<Vec<_>>>()?,
            Solver::ShermanMorrison => self.fast_log_likelihoods(instance)?,
        };
        Ok(PosteriorTable::from_log_likelihoods(lls))
    }

    /// Pilot sums are shared by every candidate, so each candidate only
    /// adds its own term to `|s|^2` and `s^H y`.
    fn fast_log_likelihoods(&self, inst: &OracleInstance) -> Result<Vec<f64>> {
        if !(inst.sigma2 > 0.0) {
            return Err(Error::NoiseVariance(inst.sigma2));
        }
        let k = inst.k();
        let pilot_norm2: f64 = inst.pilots.iter().map(Complex64::norm_sqr).sum();
        let y_norm2: f64 = inst.received.iter().map(Complex64::norm_sqr).sum();
        let pilot_proj: Complex64 = inst
            .pilots
            .iter()
            .zip(&inst.received)
            .map(|(x, y)| x.conj() * y)
            .sum();
        let yq = inst.received[k];
        let a = self.covariance.outer_scale();
        Ok(self
            .constellation
            .points()
            .iter()
            .map(|x| {
                let proj = pilot_proj + x.conj() * yq;
                let (quad, logdet) =
                    rank_one_terms(k + 1, pilot_norm2 + x.norm_sqr(), y_norm2, proj.norm_sqr(), inst.sigma2, a);
                self.covariance.log_density(quad, logdet, k + 1)
            })
            .collect())
    }

    pub fn mmse_estimate(&self, instance: &OracleInstance) -> Result<Complex64> {
        Ok(self.posterior(instance)?.mean(&self.constellation))
    }
}
