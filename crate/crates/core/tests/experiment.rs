mod common;

use choose::channel::{CoherenceBlock, Constellation};
use choose::experiment::{
    bench, clip_grad_norm, evaluate, evaluate_checkpoint, evaluate_oracle, train, train_from, write_rows, Checkpoint,
    Detector, DetectorInfo, DetectorSession, EvalSpec, GenieDetector, MetricsRow, ModelDetector, RandomGuesser,
    TrainConfig,
};
use choose::model::{ModelConfig, ModelParams};
use choose::oracle::Covariance;
use choose::Error;
use num_complex::Complex64;

fn info(name: &str) -> DetectorInfo {
    DetectorInfo {
        model_id: name.into(),
        layers: 0,
        embed_dim: 0,
        heads: 0,
        n_thoughts: 0,
    }
}

fn all_k() -> Vec<usize> {
    (0..11).collect()
}

/// Adds a fixed offset to the true symbol.
struct Shifted(Complex64);

impl Detector for Shifted {
    fn steps(&self) -> usize {
        1
    }
    fn session(&self) -> Box<dyn DetectorSession + '_> {
        Box::new(Shifted(self.0))
    }
}

impl DetectorSession for Shifted {
    fn detect(&mut self, b: &CoherenceBlock, ks: &[usize]) -> choose::Result<Vec<Vec<Vec<Complex64>>>> {
        Ok(ks.iter().map(|&k| vec![(k..b.len()).map(|t| b.x[t] + self.0).collect()]).collect())
    }
}

#[test]
fn perfect_predictor_scores_zero() {
    let r = evaluate(&GenieDetector, info("genie"), &EvalSpec::new(16, 30.0, 500, all_k(), 1)).unwrap();
    for s in r.final_step() {
        assert_eq!((s.mse, s.ser, s.errors), (0.0, 0.0, 0));
        assert_eq!(s.tasks, 500);
        assert_eq!(s.queries, 500 * (11 - s.k) as u64);
    }
}

#[test]
fn uniform_guesser_misses_fifteen_of_sixteen() {
    let det = RandomGuesser {
        constellation: Constellation::new(16).unwrap(),
    };
    let r = evaluate(&det, info("random"), &EvalSpec::new(16, 30.0, 4000, all_k(), 2)).unwrap();
    for s in r.final_step() {
        assert!(s.ser_lo <= 15.0 / 16.0 && 15.0 / 16.0 <= s.ser_hi, "{s:?}");
        // independent unit-power symbols: E|x - x'|^2 = 2
        assert!((s.mse - 2.0).abs() <= s.mse_ci95 + 0.01, "{s:?}");
    }
}

#[test]
fn known_offset_gives_known_metrics() {
    let scale = Constellation::new(16).unwrap().scale();
    let spec = EvalSpec::new(16, 30.0, 3000, all_k(), 3);
    let small = evaluate(&Shifted(Complex64::new(0.5 * scale, 0.0)), info("s"), &spec).unwrap();
    for s in small.final_step() {
        assert!((s.mse - 0.025).abs() < 1e-12);
        assert_eq!(s.ser, 0.0);
    }
    // a shift of 1.5 spacing halves moves every column but the last one
    let large = evaluate(&Shifted(Complex64::new(1.5 * scale, 0.0)), info("l"), &spec).unwrap();
    for s in large.final_step() {
        assert!((s.mse - 0.225).abs() < 1e-12);
        assert!(s.ser_lo <= 0.75 && 0.75 <= s.ser_hi, "{s:?}");
    }
}

#[test]
fn wilson_interval_properties() {
    use choose::experiment::wilson;
    let (lo, hi) = wilson(0.0, 100.0);
    assert!(lo.abs() < 1e-12);
    assert!(hi > 0.0 && hi < 0.05);
    let (lo, hi) = wilson(0.5, 1e6);
    assert!((0.5 - lo - 0.00098).abs() < 1e-5 && (hi - 0.5 - 0.00098).abs() < 1e-5);
}

#[test]
fn untrained_model_predicts_near_zero() {
    let ck = Checkpoint::new("init", common::params::<f32>(1, 4, 0.02, 4), None);
    let r = evaluate_checkpoint(&ck, &EvalSpec::new(16, 30.0, 1000, all_k(), 4)).unwrap();
    for s in r.final_step() {
        assert!((0.9..=1.1).contains(&s.mse), "{s:?}");
    }
    assert_eq!(r.steps.len(), 4);
}

#[test]
fn reports_do_not_depend_on_thread_count() {
    let ck = Checkpoint::new("m", common::params::<f32>(2, 2, 0.1, 5), None);
    let spec = EvalSpec::new(16, 30.0, 700, vec![0, 3, 10], 5);
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| evaluate_checkpoint(&ck, &spec).unwrap())
    };
    assert_eq!(run(1), run(3));
}

#[test]
fn checkpoint_round_trip_reproduces_report() {
    let dir = tempfile::tempdir().unwrap();
    let ck = Checkpoint::new("m", common::params::<f32>(1, 3, 0.1, 6), None);
    ck.save(dir.path()).unwrap();
    let back = Checkpoint::load(dir.path()).unwrap();
    let spec = EvalSpec::new(64, 40.0, 300, all_k(), 6);
    assert_eq!(evaluate_checkpoint(&ck, &spec).unwrap(), evaluate_checkpoint(&back, &spec).unwrap());
}

#[test]
fn last_unfolded_step_equals_evaluation() {
    let ck = Checkpoint::new("m", common::params::<f32>(1, 4, 0.1, 7), None);
    let spec = EvalSpec::new(16, 30.0, 300, all_k(), 7);
    let r = evaluate_checkpoint(&ck, &spec).unwrap();
    let steps = r.step_rows();
    let last: Vec<MetricsRow> = steps
        .iter()
        .filter(|row| row.metric.ends_with("_step4"))
        .map(|row| MetricsRow {
            metric: row.metric.trim_end_matches("_step4").to_string(),
            ..row.clone()
        })
        .collect();
    assert_eq!(last, r.rows());
    // uncached decoding gives the same numbers up to rounding
    let det = ModelDetector {
        params: &ck.params,
        cached: false,
    };
    let u = evaluate(&det, DetectorInfo::of_checkpoint(&ck), &spec).unwrap();
    for (a, b) in u.final_step().iter().zip(r.final_step()) {
        assert!((a.mse - b.mse).abs() < 1e-6);
    }
}

#[test]
fn csv_golden() {
    let row = MetricsRow {
        model_id: "L1-C4".into(),
        layers: 1,
        embed_dim: 32,
        heads: 4,
        c: 4,
        modulation: 16,
        snr_db: 30.0,
        k: Some(5),
        metric: "ser".into(),
        value: 0.0125,
        ci95: Some(0.0005),
        n: 100000,
    };
    let bench = MetricsRow {
        k: None,
        metric: "params".into(),
        value: 14658.0,
        ci95: None,
        ..row.clone()
    };
    let mut buf = Vec::new();
    write_rows(&mut buf, &[row, bench]).unwrap();
    assert_eq!(
        String::from_utf8(buf).unwrap(),
        "model_id,layers,embed_dim,heads,C,modulation,snr_db,k,metric,value,ci95,n\n\
         L1-C4,1,32,4,4,16,30.0,5,ser,0.0125,0.0005,100000\n\
         L1-C4,1,32,4,4,16,30.0,,params,14658.0,,100000\n"
    );
}

#[test]
fn csv_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let r = evaluate_oracle(&EvalSpec::new(16, 30.0, 200, vec![0, 5], 8), Covariance::Circular).unwrap();
    let path = dir.path().join("sub/o.csv");
    choose::experiment::write_csv(&path, &r.rows()).unwrap();
    assert_eq!(choose::experiment::read_csv(&path).unwrap(), r.rows());
}

#[test]
fn oracle_improves_with_pilots_and_beats_models() {
    let spec = EvalSpec::new(16, 30.0, 10_000, all_k(), 9);
    let oracle = evaluate_oracle(&spec, Covariance::Circular).unwrap();
    let s = oracle.final_step();
    for w in s.windows(2) {
        assert!(w[1].mse <= w[0].mse + w[0].mse_ci95 + w[1].mse_ci95, "{w:?}");
    }
    assert!(s[10].ser < 1e-2, "{:?}", s[10]);
    // without pilots the phase is unknown and the conditional mean is 0
    assert!((s[0].mse - 1.0).abs() < 0.02, "{:?}", s[0]);
    let ck = Checkpoint::new("init", common::params::<f32>(1, 4, 0.02, 9), None);
    let model = evaluate_checkpoint(&ck, &spec).unwrap();
    for (o, m) in s.iter().zip(model.final_step()) {
        assert!(o.mse <= m.mse + o.mse_ci95 + m.mse_ci95);
    }
}

#[test]
fn invalid_specs_are_rejected() {
    assert!(evaluate(&GenieDetector, info("g"), &EvalSpec::new(16, 30.0, 10, vec![11], 0)).is_err());
    assert!(evaluate(&GenieDetector, info("g"), &EvalSpec::new(8, 30.0, 10, vec![1], 0)).is_err());
    assert!(evaluate(&GenieDetector, info("g"), &EvalSpec::new(16, 30.0, 0, vec![1], 0)).is_err());
}

fn small_config(steps: usize) -> TrainConfig {
    let mut cfg = TrainConfig::new("t", ModelConfig::for_block(1, 4, 11), 16);
    cfg.optim.steps = steps;
    cfg.optim.batch_size = 32;
    cfg.optim.learning_rate = 1e-3;
    cfg.optim.warmup_steps = 50;
    cfg.seed = 11;
    cfg
}

#[test]
fn initial_loss_matches_symbol_power() {
    let mut first = None;
    train(&small_config(1), &mut |r| first = Some(r.loss)).unwrap();
    // loss sums T = 11 queries of E|x|^2 = 1 plus a small output power
    let per_query = first.unwrap() / 11.0;
    assert!((0.9..=1.3).contains(&per_query), "{per_query}");
}

#[test]
fn training_halves_the_loss() {
    let mut cfg = small_config(1500);
    cfg.model = ModelConfig::for_block(1, 0, 11);
    cfg.optim.batch_size = 64;
    cfg.optim.schedule = choose::experiment::Schedule::Cosine;
    let out = train(&cfg, &mut |_| {}).unwrap();
    let start = out.history[..20].iter().map(|r| r.loss).sum::<f64>() / 20.0;
    let end = out.tail_loss(50);
    assert!(end <= 0.5 * start, "{start} -> {end}");
}

#[test]
fn training_is_deterministic_and_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(30);
    cfg.checkpoint_dir = Some(dir.path().to_path_buf());
    cfg.checkpoint_every = 10;
    let a = train(&cfg, &mut |_| {}).unwrap();
    let b = train(&small_config(30), &mut |_| {}).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(a.checkpoint.params, b.checkpoint.params);
    let saved = Checkpoint::load(dir.path()).unwrap();
    assert_eq!(saved, a.checkpoint);
    let prov = saved.manifest.provenance.unwrap();
    assert_eq!(prov.step, 30);
    assert_eq!(prov.config_hash, cfg.hash());
}

#[test]
fn non_finite_loss_aborts() {
    let cfg = small_config(5);
    let mut params = ModelParams::<f32>::init(cfg.model, &mut choose::rng::Streams::new(0).stream(choose::rng::Purpose::Init, 0)).unwrap();
    let out_bias = choose::model::Slot::OutB.index(cfg.model.n_layers);
    params.tensors_mut()[out_bias].data_mut()[0] = f32::NAN;
    let r = train_from(&cfg, params, &mut |_| {});
    assert!(matches!(r, Err(Error::NonFiniteLoss { step: 0, .. })), "{r:?}");
}

#[test]
fn gradient_clipping() {
    let mut g = vec![vec![3.0f32], vec![4.0]];
    assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
    assert!((g[0][0] - 0.6).abs() < 1e-7 && (g[1][0] - 0.8).abs() < 1e-7);
    let mut g = vec![vec![0.3f32, 0.4]];
    clip_grad_norm(&mut g, 1.0);
    assert_eq!(g, vec![vec![0.3, 0.4]]);
}

#[test]
fn bench_orders_cached_before_uncached() {
    let ck = Checkpoint::new("m", common::params::<f32>(1, 4, 0.1, 12), None);
    let spec = EvalSpec::new(16, 30.0, 60, all_k(), 12);
    let r = bench(&ck, &spec, 3).unwrap();
    assert!(r.cached_s < r.uncached_s, "{r:?}");
    assert_eq!(r.cached_runs.len(), 3);
    let rows = r.rows(16, 30.0);
    assert_eq!(rows[0].metric, "params");
    assert_eq!(rows[0].value as usize, ck.params.config().count_params());
}
