use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use superfed_core::arch::{self, flops, param_count};
use superfed_core::checkpoint::Checkpoint;
use superfed_core::config::{load_config, resolve_arch};
use superfed_core::cost::{cost_report, reference_family, write_cost_report};
use superfed_core::data::{class_distribution_report, write_class_report};
use superfed_core::nas::evolve;
use superfed_core::orchestrator::{
    build_data, compare_ablation, lr_grid, plan_costs, write_metrics, write_rows, Simulation,
};
use superfed_core::seed::{rng_from, stream};
use superfed_core::{client, Error, ExperimentConfig};

#[derive(Parser)]
#[command(
    name = "superfed",
    version,
    about = "Weight-shared federated learning simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// `key=value` override, applied after the file is parsed. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory, created if needed; CSV goes to stdout when omitted.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the supernet and write per-round metrics.
    Train {
        #[command(flatten)]
        common: Common,
        /// Checkpoint path (written at the end, and every
        /// `--checkpoint-every` rounds). Defaults to `DIR/checkpoint.ckpt`
        /// when `--out` is given.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Also checkpoint after every N-th round.
        #[arg(long, value_name = "N")]
        checkpoint_every: Option<usize>,
        /// Continue from this checkpoint instead of initializing.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this round (the schedule still spans `rounds`), e.g.
        /// to split a run across invocations.
        #[arg(long)]
        until: Option<usize>,
    },
    /// Evaluate subnetworks of a checkpointed supernet on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// `smallest`, `largest` or a descriptor. Repeatable; defaults to the
        /// config's eval_archs.
        #[arg(long = "arch")]
        archs: Vec<String>,
    },
    /// Evolutionary search for the best subnetwork under a FLOPs budget.
    Nas {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Forward FLOPs per sample; defaults to nas.flops_budget.
        #[arg(long)]
        budget: Option<u64>,
    },
    /// Per-round compute/communication of independent vs weight-shared
    /// training for family sizes 1..=9.
    Cost {
        #[command(flatten)]
        common: Common,
    },
    /// Class counts per client after partitioning.
    PartitionReport {
        #[command(flatten)]
        common: Common,
    },
    /// FedAvg on the largest subnetwork for each learning rate.
    LrGrid {
        #[command(flatten)]
        common: Common,
        /// Comma-separated learning rates.
        #[arg(long, value_delimiter = ',', required = true)]
        lrs: Vec<f64>,
    },
    /// Runs the four distribution/averaging combinations on one config.
    CompareAblation {
        #[command(flatten)]
        common: Common,
    },
}

/// Config problems are the caller's to fix, so they share the usage status.
struct UsageError(anyhow::Error);

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {:#}", e.0);
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

enum Failure {
    Usage(UsageError),
    Runtime(anyhow::Error),
}

fn usage(msg: impl std::fmt::Display) -> Failure {
    Failure::Usage(UsageError(anyhow::anyhow!("{msg}")))
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

fn config(common: &Common) -> Result<ExperimentConfig, Failure> {
    let mut overrides = common.set.clone();
    if let Some(seed) = common.seed {
        overrides.push(format!("seed={seed}"));
    }
    load_config(&common.config, &overrides)
        .with_context(|| format!("loading {}", common.config.display()))
        .map_err(|e| Failure::Usage(UsageError(e)))
}

fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::Train {
            common,
            checkpoint,
            checkpoint_every,
            resume,
            until,
        } => {
            let cfg = config(&common)?;
            let checkpoint =
                checkpoint.or_else(|| common.out.as_ref().map(|d| d.join(CHECKPOINT_FILE)));
            match checkpoint_every {
                Some(0) => return Err(usage("--checkpoint-every must be >= 1")),
                Some(_) if checkpoint.is_none() => {
                    return Err(usage("--checkpoint-every needs --checkpoint or --out"))
                }
                _ => {}
            }
            let mut sim = match &resume {
                Some(p) => Simulation::resume(cfg, load_checkpoint(p)?),
                None => Simulation::new(cfg),
            }
            .context("setting up the run")?;
            let mut rows = if resume.is_some() {
                Vec::new()
            } else {
                sim.evaluate_now(None).context("initial evaluation")?
            };
            let stop = until.map_or(sim.config().rounds, |u| u.min(sim.config().rounds));
            while sim.state().round < stop {
                let report = sim.step()?;
                rows.extend(report.metrics);
                if let (Some(path), Some(every)) = (&checkpoint, checkpoint_every) {
                    if sim.state().round % every == 0 && sim.state().round < stop {
                        save_checkpoint(&sim.checkpoint(), path)?;
                    }
                }
            }
            if let Some(path) = &checkpoint {
                save_checkpoint(&sim.checkpoint(), path)?;
            }
            emit(common.out.as_deref(), "metrics.csv", |w| {
                write_metrics(&rows, w)
            })?;
        }
        Command::Eval {
            common,
            checkpoint,
            archs,
        } => {
            let cfg = config(&common)?;
            let archs = if archs.is_empty() {
                cfg.eval_archs.clone()
            } else {
                archs
            };
            let descriptors = archs
                .iter()
                .map(|a| resolve_arch(&cfg.space, a).with_context(|| format!("--arch {a}")))
                .collect::<anyhow::Result<Vec<_>>>()
                .map_err(|e| Failure::Usage(UsageError(e)))?;
            let sim = Simulation::resume(cfg, load_checkpoint(&checkpoint)?)?;
            let space = &sim.config().space;
            let mut rows = Vec::new();
            for a in &descriptors {
                rows.push(EvalRow {
                    arch: arch::format(space, a),
                    test_accuracy: client::evaluate(sim.params(), a, &sim.data().test)?,
                    flops: flops(space, a),
                    params: param_count(space, a),
                });
            }
            emit(common.out.as_deref(), "eval.csv", |w| write_rows(&rows, w))?;
        }
        Command::Nas {
            common,
            checkpoint,
            budget,
        } => {
            let mut cfg = config(&common)?;
            if let Some(b) = budget {
                cfg.nas.flops_budget = b;
            }
            let sim = Simulation::resume(cfg, load_checkpoint(&checkpoint)?)?;
            let cfg = sim.config();
            let mut rng = rng_from(cfg.seed, &[stream::NAS]);
            let result = evolve(sim.params(), &sim.data().test, &cfg.nas, &mut rng)?;
            eprintln!(
                "fitness: test split ({} rows, subset {}), {} distinct candidates evaluated",
                sim.data().test.len(),
                cfg.nas.eval_subset_size,
                result.evaluations
            );
            let row = NasRow {
                constraint: cfg.nas.flops_budget,
                accuracy: result.best.accuracy,
                flops: result.best.flops,
                descriptor: arch::format(&cfg.space, &result.best.arch),
            };
            emit(common.out.as_deref(), "nas.csv", |w| write_rows(&[row], w))?;
        }
        Command::Cost { common } => {
            let cfg = config(&common)?;
            let ledger = plan_costs(&cfg)?;
            let family = reference_family(&cfg.space);
            let rows = cost_report(&cfg.space, &family, &ledger, cfg.participants());
            emit(common.out.as_deref(), "cost.csv", |w| {
                write_cost_report(&rows, w)
            })?;
        }
        Command::PartitionReport { common } => {
            let cfg = config(&common)?;
            let data = build_data(&cfg)?;
            let rows = class_distribution_report(
                &data.partitions,
                &data.train.labels,
                cfg.space.num_classes,
            );
            emit(common.out.as_deref(), "partition.csv", |w| {
                write_class_report(&rows, w)
            })?;
        }
        Command::LrGrid { common, lrs } => {
            let cfg = config(&common)?;
            if let Some(bad) = lrs.iter().find(|l| !(l.is_finite() && **l >= 0.0)) {
                return Err(usage(format!(
                    "learning rate {bad} must be finite and >= 0"
                )));
            }
            let rows = lr_grid(&cfg, &lrs)?;
            emit(common.out.as_deref(), "lr_grid.csv", |w| {
                write_rows(&rows, w)
            })?;
        }
        Command::CompareAblation { common } => {
            let cfg = config(&common)?;
            let rows = compare_ablation(&cfg)?;
            emit(common.out.as_deref(), "ablation.csv", |w| {
                write_rows(&rows, w)
            })?;
        }
    }
    Ok(())
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e.into())
    }
}

#[derive(serde::Serialize)]
struct EvalRow {
    arch: String,
    test_accuracy: f64,
    flops: u64,
    params: usize,
}

#[derive(serde::Serialize)]
struct NasRow {
    constraint: u64,
    accuracy: f64,
    flops: u64,
    descriptor: String,
}

fn load_checkpoint(path: &Path) -> anyhow::Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("reading checkpoint {}", path.display()))
}

fn save_checkpoint(ck: &Checkpoint, path: &Path) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    ck.save(path)
        .with_context(|| format!("writing checkpoint {}", path.display()))
}

const CHECKPOINT_FILE: &str = "checkpoint.ckpt";

/// Renders to memory first so a failure never leaves a partial file behind.
fn emit(
    out_dir: Option<&Path>,
    name: &str,
    write: impl FnOnce(&mut Vec<u8>) -> superfed_core::Result<()>,
) -> anyhow::Result<()> {
    let mut buf = Vec::new();
    write(&mut buf)?;
    match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            let path = dir.join(name);
            let tmp = path.with_extension("partial");
            fs::write(&tmp, &buf).with_context(|| format!("writing {}", tmp.display()))?;
            fs::rename(&tmp, &path).with_context(|| format!("writing {}", path.display()))?;
        }
        None => {
            let mut stdout = io::stdout().lock();
            stdout.write_all(&buf)?;
            stdout.flush()?;
        }
    }
    Ok(())
}
