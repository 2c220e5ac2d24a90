use super::checkpoint::Checkpoint;
use super::eval::{DetectorInfo, DetectorSession, EvalSpec};
use super::metrics::MetricsRow;
use crate::channel::Constellation;
use crate::error::Result;
use crate::model::BlockDetector;
use serde::{Deserialize, Serialize};
use std::time::Instant;

/// Parameter count and end-to-end inference time over a test set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub info: DetectorInfo,
    pub params: usize,
    pub n_tasks: usize,
    /// Median seconds over the timed repetitions.
    pub cached_s: f64,
    pub uncached_s: f64,
    pub cached_runs: Vec<f64>,
    pub uncached_runs: Vec<f64>,
}

impl BenchReport {
    pub fn rows(&self, modulation: usize, snr_db: f64) -> Vec<MetricsRow> {
        let base = MetricsRow::new(&self.info, modulation, snr_db);
        let n = self.n_tasks as u64;
        [
            ("params", self.params as f64),
            ("time_cached_s", self.cached_s),
            ("time_uncached_s", self.uncached_s),
        ]
        .into_iter()
        .map(|(m, v)| MetricsRow {
            metric: m.into(),
            value: v,
            n,
            ..base.clone()
        })
        .collect()
    }
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Seconds to detect every query of `blocks` at every pilot count, on the
/// calling thread.
pub fn time_detection(ck: &Checkpoint, blocks: &[crate::channel::CoherenceBlock], ks: &[usize], cached: bool) -> Result<f64> {
    let mut det = BlockDetector::new(&ck.params, cached);
    let start = Instant::now();
    for b in blocks {
        std::hint::black_box(DetectorSession::detect(&mut det, b, ks)?);
    }
    Ok(start.elapsed().as_secs_f64())
}

/// Time the whole test set with and without the cache: one untimed warmup
/// pass each, then the median of `reps` passes.
pub fn bench(ck: &Checkpoint, spec: &EvalSpec, reps: usize) -> Result<BenchReport> {
    let constellation = Constellation::new(spec.modulation)?;
    let blocks: Vec<_> = (0..spec.n_tasks).map(|i| spec.task(&constellation, i)).collect();
    let mut runs = [Vec::new(), Vec::new()];
    for (slot, cached) in [(0, true), (1, false)] {
        time_detection(ck, &blocks, &spec.ks, cached)?;
        for _ in 0..reps.max(1) {
            runs[slot].push(time_detection(ck, &blocks, &spec.ks, cached)?);
        }
    }
    let [cached_runs, uncached_runs] = runs;
    Ok(BenchReport {
        info: DetectorInfo::of_checkpoint(ck),
        params: ck.params.num_params(),
        n_tasks: spec.n_tasks,
        cached_s: median(&cached_runs),
        uncached_s: median(&uncached_runs),
        cached_runs,
        uncached_runs,
    })
}
