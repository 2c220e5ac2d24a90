use super::checkpoint::Checkpoint;
use crate::channel::{CoherenceBlock, Constellation, FadingTask};
use crate::error::{Error, Result};
use crate::model::{BlockDetector, ModelParams};
use crate::oracle::{Covariance, MmseOracle, OracleInstance};
use crate::rng::{Purpose, Streams};
use num_complex::Complex64;
use rand::{Rng as _, SeedableRng};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Two-sided 95% standard normal quantile.
pub const Z95: f64 = 1.959_963_984_540_054;

/// Soft symbol estimates for coherence blocks.
pub trait Detector: Sync {
    /// Estimates produced per query (thought steps for a chain model).
    fn steps(&self) -> usize;
    /// Per-worker state; sessions are never shared between threads.
    fn session(&self) -> Box<dyn DetectorSession + '_>;
}

pub trait DetectorSession {
    /// `out[i][j][t - k - 1]`: estimate of `x_t` at step `j` from
    /// `k = ks[i]` pilots, for `t = k+1..=T`.
    fn detect(&mut self, block: &CoherenceBlock, ks: &[usize]) -> Result<Vec<Vec<Vec<Complex64>>>>;
}

/// A trained model, decoded with or without the key/value cache.
pub struct ModelDetector<'p> {
    pub params: &'p ModelParams<f32>,
    pub cached: bool,
}

impl Detector for ModelDetector<'_> {
    fn steps(&self) -> usize {
        self.params.config().chain_len()
    }

    fn session(&self) -> Box<dyn DetectorSession + '_> {
        Box::new(BlockDetector::new(self.params, self.cached))
    }
}

impl DetectorSession for BlockDetector<'_, f32> {
    fn detect(&mut self, block: &CoherenceBlock, ks: &[usize]) -> Result<Vec<Vec<Vec<Complex64>>>> {
        BlockDetector::detect(self, block, ks)
    }
}

fn per_query(
    block: &CoherenceBlock,
    ks: &[usize],
    mut f: impl FnMut(usize, usize) -> Result<Complex64>,
) -> Result<Vec<Vec<Vec<Complex64>>>> {
    ks.iter()
        .map(|&k| {
            if k >= block.len() {
                return Err(Error::Prompt(format!("pilot count {k} must be below T={}", block.len())));
            }
            Ok(vec![(k..block.len()).map(|t| f(k, t)).collect::<Result<Vec<_>>>()?])
        })
        .collect()
}

/// Conditional-mean estimates from the exact posterior.
pub struct OracleDetector {
    pub oracle: MmseOracle,
}

impl Detector for OracleDetector {
    fn steps(&self) -> usize {
        1
    }

    fn session(&self) -> Box<dyn DetectorSession + '_> {
        Box::new(self)
    }
}

impl DetectorSession for &OracleDetector {
    fn detect(&mut self, block: &CoherenceBlock, ks: &[usize]) -> Result<Vec<Vec<Vec<Complex64>>>> {
        per_query(block, ks, |k, t| {
            let mut received = block.y[..k].to_vec();
            received.push(block.y[t]);
            let inst = OracleInstance::new(block.x[..k].to_vec(), received, block.task.sigma2)?;
            self.oracle.mmse_estimate(&inst)
        })
    }
}

/// Returns the transmitted symbols.
pub struct GenieDetector;

impl Detector for GenieDetector {
    fn steps(&self) -> usize {
        1
    }

    fn session(&self) -> Box<dyn DetectorSession + '_> {
        Box::new(GenieDetector)
    }
}

impl DetectorSession for GenieDetector {
    fn detect(&mut self, block: &CoherenceBlock, ks: &[usize]) -> Result<Vec<Vec<Vec<Complex64>>>> {
        per_query(block, ks, |_, t| Ok(block.x[t]))
    }
}

/// Guesses a uniformly random constellation point, seeded by the block so
/// results do not depend on scheduling.
pub struct RandomGuesser {
    pub constellation: Constellation,
}

impl Detector for RandomGuesser {
    fn steps(&self) -> usize {
        1
    }

    fn session(&self) -> Box<dyn DetectorSession + '_> {
        Box::new(self)
    }
}

impl DetectorSession for &RandomGuesser {
    fn detect(&mut self, block: &CoherenceBlock, ks: &[usize]) -> Result<Vec<Vec<Vec<Complex64>>>> {
        let seed = block.y[0].re.to_bits() ^ block.y[0].im.to_bits().rotate_left(32);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let order = self.constellation.order();
        per_query(block, ks, |_, _| Ok(self.constellation.point(rng.random_range(0..order))))
    }
}

/// Test-set definition shared by every detector, so that model and oracle
/// runs see identical tasks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSpec {
    pub modulation: usize,
    pub snr_db: f64,
    pub n_tasks: usize,
    pub ks: Vec<usize>,
    pub block_len: usize,
    pub seed: u64,
}

impl EvalSpec {
    pub fn new(modulation: usize, snr_db: f64, n_tasks: usize, ks: Vec<usize>, seed: u64) -> Self {
        EvalSpec {
            modulation,
            snr_db,
            n_tasks,
            ks,
            block_len: 11,
            seed,
        }
    }

    fn validate(&self) -> Result<Constellation> {
        let c = Constellation::new(self.modulation)?;
        if self.n_tasks == 0 || self.ks.is_empty() {
            return Err(Error::Config("evaluation needs at least one task and one pilot count".into()));
        }
        if let Some(&k) = self.ks.iter().find(|&&k| k >= self.block_len) {
            return Err(Error::Config(format!("pilot count {k} must be below T={}", self.block_len)));
        }
        if !self.snr_db.is_finite() {
            return Err(Error::Config(format!("invalid snr_db {}", self.snr_db)));
        }
        Ok(c)
    }

    /// Test block `index`, regenerated from its own stream.
    pub fn task(&self, constellation: &Constellation, index: usize) -> CoherenceBlock {
        let mut rng = Streams::new(self.seed).stream(Purpose::Eval, index as u64);
        let task = FadingTask::sample(&mut rng, [self.snr_db, self.snr_db]);
        CoherenceBlock::simulate(task, self.block_len, constellation, &mut rng)
    }
}

/// Identity of the evaluated detector, carried into reports and CSV rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorInfo {
    pub model_id: String,
    pub layers: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub n_thoughts: usize,
}

impl DetectorInfo {
    pub fn oracle() -> Self {
        DetectorInfo {
            model_id: "oracle".into(),
            layers: 0,
            embed_dim: 0,
            heads: 0,
            n_thoughts: 0,
        }
    }

    pub fn of_checkpoint(ck: &Checkpoint) -> Self {
        let c = ck.params.config();
        DetectorInfo {
            model_id: ck.model_id().to_string(),
            layers: c.n_layers,
            embed_dim: c.embed_dim,
            heads: c.n_heads,
            n_thoughts: c.n_thoughts,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
struct Acc {
    mse: f64,
    mse2: f64,
    ser: f64,
    errors: u64,
    queries: u64,
    tasks: u64,
}

impl Acc {
    fn merge(&mut self, o: &Acc) {
        self.mse += o.mse;
        self.mse2 += o.mse2;
        self.ser += o.ser;
        self.errors += o.errors;
        self.queries += o.queries;
        self.tasks += o.tasks;
    }
}

/// Metrics of one (step, k) cell.
///
/// Queries of one block share a channel draw, so intervals treat each task
/// (the per-block mean) as one sample: a normal interval for MSE and a
/// Wilson interval with `n = tasks` for SER.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KStats {
    pub k: usize,
    pub mse: f64,
    pub mse_ci95: f64,
    pub ser: f64,
    pub ser_lo: f64,
    pub ser_hi: f64,
    pub tasks: u64,
    pub queries: u64,
    pub errors: u64,
}

impl KStats {
    fn from_acc(k: usize, a: &Acc) -> Self {
        let n = a.tasks as f64;
        let mse = a.mse / n;
        let var = if a.tasks > 1 {
            ((a.mse2 - n * mse * mse) / (n - 1.0)).max(0.0)
        } else {
            0.0
        };
        let ser = a.ser / n;
        let (ser_lo, ser_hi) = wilson(ser, n);
        KStats {
            k,
            mse,
            mse_ci95: Z95 * (var / n).sqrt(),
            ser,
            ser_lo,
            ser_hi,
            tasks: a.tasks,
            queries: a.queries,
            errors: a.errors,
        }
    }

    /// Half-width of the SER interval.
    pub fn ser_ci95(&self) -> f64 {
        0.5 * (self.ser_hi - self.ser_lo)
    }
}

/// 95% Wilson score interval for proportion `p` over `n` trials.
pub fn wilson(p: f64, n: f64) -> (f64, f64) {
    let z2 = Z95 * Z95;
    let denom = 1.0 + z2 / n;
    let center = (p + z2 / (2.0 * n)) / denom;
    let half = Z95 * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / denom;
    ((center - half).max(0.0), (center + half).min(1.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub info: DetectorInfo,
    pub spec: EvalSpec,
    /// `steps[j][i]`: step `j + 1`, pilot count `spec.ks[i]`.
    pub steps: Vec<Vec<KStats>>,
}

impl EvalReport {
    /// Metrics of the detector's final output.
    pub fn final_step(&self) -> &[KStats] {
        self.steps.last().expect("at least one step")
    }

    pub fn at(&self, k: usize) -> Option<&KStats> {
        self.final_step().iter().find(|s| s.k == k)
    }
}

const CHUNK: usize = 256;

/// Run `detector` over the test set of `spec`. Tasks are spread over the
/// rayon pool in fixed chunks and combined in chunk order, so the report
/// does not depend on the thread count.
pub fn evaluate(detector: &dyn Detector, info: DetectorInfo, spec: &EvalSpec) -> Result<EvalReport> {
    let constellation = spec.validate()?;
    let steps = detector.steps();
    let nk = spec.ks.len();
    let chunks: Vec<Result<Vec<Acc>>> = (0..spec.n_tasks.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut session = detector.session();
            let mut acc = vec![Acc::default(); steps * nk];
            for i in c * CHUNK..((c + 1) * CHUNK).min(spec.n_tasks) {
                let block = spec.task(&constellation, i);
                let out = session.detect(&block, &spec.ks)?;
                for (ki, &k) in spec.ks.iter().enumerate() {
                    for (j, est) in out[ki].iter().enumerate() {
                        let mut se = 0.0;
                        let mut errors = 0u64;
                        for (q, z) in est.iter().enumerate() {
                            let t = k + q;
                            se += (block.x[t] - z).norm_sqr();
                            errors += u64::from(constellation.project_nearest(*z) != block.labels[t]);
                        }
                        let nq = est.len() as f64;
                        let a = &mut acc[j * nk + ki];
                        a.mse += se / nq;
                        a.mse2 += (se / nq) * (se / nq);
                        a.ser += errors as f64 / nq;
                        a.errors += errors;
                        a.queries += est.len() as u64;
                        a.tasks += 1;
                    }
                }
            }
            Ok(acc)
        })
        .collect();
    let mut total = vec![Acc::default(); steps * nk];
    for chunk in chunks {
        for (t, a) in total.iter_mut().zip(&chunk?) {
            t.merge(a);
        }
    }
    let steps = (0..steps)
        .map(|j| {
            spec.ks
                .iter()
                .enumerate()
                .map(|(ki, &k)| KStats::from_acc(k, &total[j * nk + ki]))
                .collect()
        })
        .collect();
    Ok(EvalReport {
        info,
        spec: spec.clone(),
        steps,
    })
}

pub fn evaluate_checkpoint(ck: &Checkpoint, spec: &EvalSpec) -> Result<EvalReport> {
    let det = ModelDetector {
        params: &ck.params,
        cached: true,
    };
    evaluate(&det, DetectorInfo::of_checkpoint(ck), spec)
}

pub fn evaluate_oracle(spec: &EvalSpec, covariance: Covariance) -> Result<EvalReport> {
    let det = OracleDetector {
        oracle: MmseOracle::new(Constellation::new(spec.modulation)?, covariance),
    };
    evaluate(&det, DetectorInfo::oracle(), spec)
}
