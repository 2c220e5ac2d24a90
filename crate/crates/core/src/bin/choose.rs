use anyhow::{bail, Context, Result};
use choose::experiment::{
    bench, default_eval_snr_db, evaluate, evaluate_oracle, train, write_csv, write_rows, Checkpoint, DetectorInfo,
    EvalSpec, MetricsRow, ModelDetector, TrainConfig,
};
use choose::oracle::Covariance;
use clap::{Args, Parser, Subcommand, ValueEnum};
use std::path::{Path, PathBuf};

/// In-context symbol detection with latent thought steps.
#[derive(Parser)]
#[command(version, about)]
struct Cli {
    /// Master seed (training: overrides the config; evaluation: test-set seed).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; 0 uses every core.
    #[arg(long, global = true, env = "CHOOSE_THREADS", default_value_t = 0)]
    threads: usize,
    /// Output: checkpoint directory for `train`, CSV file otherwise (stdout
    /// when omitted).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a JSON config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Validate the config, print the parameter count and exit.
        #[arg(long)]
        dry_run: bool,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// SER and MSE per pilot count.
    Eval {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        test: TestArgs,
        /// Recompute the whole sequence at every step instead of caching.
        #[arg(long)]
        uncached: bool,
    },
    /// Conditional-mean oracle SER and MSE per pilot count.
    Oracle {
        #[command(flatten)]
        test: TestArgs,
        #[arg(long = "mod", default_value_t = 16)]
        modulation: usize,
        #[arg(long, value_enum, default_value_t = CovarianceArg::Circular)]
        covariance: CovarianceArg,
    },
    /// SER and MSE of every intermediate thought.
    Unfold {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        test: TestArgs,
    },
    /// Parameter count and inference time with and without caching.
    Bench {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        test: TestArgs,
        /// Timed repetitions (after one warmup pass).
        #[arg(long, default_value_t = 5)]
        reps: usize,
    },
}

#[derive(Args)]
struct ModelArgs {
    /// Checkpoint directory.
    #[arg(long)]
    ckpt: PathBuf,
    /// Constellation order; defaults to the training modulation.
    #[arg(long = "mod")]
    modulation: Option<usize>,
}

#[derive(Args)]
struct TestArgs {
    /// Evaluation SNR in dB (default 30 for 16QAM, 40 for 64QAM).
    #[arg(long)]
    snr_db: Option<f64>,
    /// Pilot counts: an inclusive range `a..b` or a comma list.
    #[arg(long, default_value = "0..10")]
    pilots: String,
    #[arg(long, default_value_t = 100_000)]
    tasks: usize,
    #[arg(long, default_value_t = 11)]
    block_len: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum CovarianceArg {
    Circular,
    HalfOuter,
}

fn parse_pilots(s: &str) -> Result<Vec<usize>, String> {
    let bad = |_| format!("invalid pilot list {s:?}");
    if let Some((a, b)) = s.split_once("..") {
        let a: usize = a.trim().parse().map_err(bad)?;
        let b: usize = b.trim().trim_start_matches('=').parse().map_err(bad)?;
        if a > b {
            return Err(format!("empty pilot range {s:?}"));
        }
        return Ok((a..=b).collect());
    }
    s.split(',').map(|p| p.trim().parse().map_err(bad)).collect()
}

impl TestArgs {
    fn spec(&self, modulation: usize, seed: u64) -> Result<EvalSpec> {
        Ok(EvalSpec {
            modulation,
            snr_db: self.snr_db.unwrap_or_else(|| default_eval_snr_db(modulation)),
            n_tasks: self.tasks,
            ks: parse_pilots(&self.pilots).map_err(anyhow::Error::msg)?,
            block_len: self.block_len,
            seed,
        })
    }
}

impl ModelArgs {
    fn load(&self) -> Result<(Checkpoint, usize)> {
        let ck = Checkpoint::load(&self.ckpt).with_context(|| format!("loading {}", self.ckpt.display()))?;
        let modulation = self
            .modulation
            .or(ck.manifest.provenance.as_ref().map(|p| p.modulation))
            .context("checkpoint does not record its modulation; pass --mod")?;
        Ok((ck, modulation))
    }
}

fn emit(out: Option<&Path>, rows: &[MetricsRow]) -> Result<()> {
    match out {
        Some(p) => write_csv(p, rows).with_context(|| format!("writing {}", p.display())),
        None => Ok(write_rows(std::io::stdout().lock(), rows)?),
    }
}

fn main() -> std::process::ExitCode {
    match run(Cli::parse()) {
        Ok(()) => std::process::ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("Error: {e:#}");
            std::process::ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build_global()
        .context("configuring the thread pool")?;
    let seed = cli.seed.unwrap_or(0);
    let out = cli.out.as_deref();
    match &cli.command {
        Command::Train { config, dry_run, steps } => {
            let mut cfg = TrainConfig::load(config).with_context(|| format!("reading {}", config.display()))?;
            if let Some(s) = cli.seed {
                cfg.seed = s;
            }
            if let Some(s) = steps {
                cfg.optim.steps = *s;
            }
            if let Some(dir) = out {
                cfg.checkpoint_dir = Some(dir.to_path_buf());
            }
            cfg.validate()?;
            println!("{}: {} parameters", cfg.name, cfg.model.count_params());
            if *dry_run {
                return Ok(());
            }
            let Some(dir) = cfg.checkpoint_dir.clone() else {
                bail!("no checkpoint directory: set checkpoint_dir or pass --out");
            };
            std::fs::create_dir_all(&dir)?;
            let mut log = csv::Writer::from_path(dir.join("train_log.csv"))?;
            log.write_record(["step", "loss", "grad_norm", "lr"])?;
            let every = cfg.log_every.max(1);
            let mut window = 0.0;
            let outcome = train(&cfg, &mut |r| {
                window += r.loss;
                if (r.step + 1) % every == 0 {
                    let mean = window / every as f64;
                    window = 0.0;
                    let _ = log.write_record([
                        (r.step + 1).to_string(),
                        format!("{mean:.6}"),
                        format!("{:.4}", r.grad_norm),
                        format!("{:.3e}", r.lr),
                    ]);
                    let _ = log.flush();
                    eprintln!("step {:>7}  loss {mean:.4}  lr {:.2e}", r.step + 1, r.lr);
                }
            })?;
            log.flush()?;
            println!(
                "saved {} (final loss {:.4})",
                dir.display(),
                outcome.checkpoint.manifest.provenance.as_ref().map_or(f64::NAN, |p| p.final_loss)
            );
        }
        Command::Eval { model, test, uncached } => {
            let (ck, modulation) = model.load()?;
            let det = ModelDetector {
                params: &ck.params,
                cached: !uncached,
            };
            let report = evaluate(&det, DetectorInfo::of_checkpoint(&ck), &test.spec(modulation, seed)?)?;
            emit(out, &report.rows())?;
        }
        Command::Oracle { test, modulation, covariance } => {
            let cov = match covariance {
                CovarianceArg::Circular => Covariance::Circular,
                CovarianceArg::HalfOuter => Covariance::HalfOuter,
            };
            let report = evaluate_oracle(&test.spec(*modulation, seed)?, cov)?;
            emit(out, &report.rows())?;
        }
        Command::Unfold { model, test } => {
            let (ck, modulation) = model.load()?;
            let det = ModelDetector {
                params: &ck.params,
                cached: true,
            };
            let report = evaluate(&det, DetectorInfo::of_checkpoint(&ck), &test.spec(modulation, seed)?)?;
            emit(out, &report.step_rows())?;
        }
        Command::Bench { model, test, reps } => {
            let (ck, modulation) = model.load()?;
            let spec = test.spec(modulation, seed)?;
            let report = bench(&ck, &spec, *reps)?;
            emit(out, &report.rows(modulation, spec.snr_db))?;
        }
    }
    Ok(())
}
