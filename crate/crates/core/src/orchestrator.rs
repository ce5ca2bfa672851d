//! The server loop: sample, plan, dispatch, train locally, aggregate,
//! evaluate, account.
//!
//! All randomness comes from streams keyed by `(seed, purpose, round,
//! client)`, so clients may train in parallel and a run can be resumed from
//! a checkpoint without perturbing later rounds.

use std::io::Write;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregation::{aggregate_maxnet, aggregate_overlap, beta_at, ClientUpdate};
use crate::arch::{self, ArchDescriptor};
use crate::checkpoint::Checkpoint;
use crate::client::{client_update, evaluate};
use crate::config::{AggregatorKind, DatasetSpec, ExperimentConfig};
use crate::cost::CostLedger;
use crate::data::{dirichlet_partition, load_csv, synth_blobs, ClientPartition, Dataset, Split};
use crate::distribution::{plan_round, sample_clients, Heuristic, RoundPlan, TrackingState};
use crate::error::{Error, Result};
use crate::seed::{rng_from, stream};
use crate::supernet::{extract, init_supernet, ParamSet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub round: usize,
    pub arch: String,
    pub test_accuracy: f64,
    /// Empty for overlap averaging and for the initial evaluation.
    pub beta_t: Option<f64>,
    pub comm_bytes_cum: u64,
    pub comp_flops_cum: u64,
}

pub fn write_metrics<W: Write>(rows: &[MetricsRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "round",
        "arch",
        "test_accuracy",
        "beta_t",
        "comm_bytes_cum",
        "comp_flops_cum",
    ])
    .map_err(csv_err)?;
    for r in rows {
        w.serialize((
            r.round,
            &r.arch,
            r.test_accuracy,
            r.beta_t,
            r.comm_bytes_cum,
            r.comp_flops_cum,
        ))
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// Train/test data and client partitions, fully determined by the config.
#[derive(Debug, Clone)]
pub struct FederatedData {
    pub train: Dataset,
    pub test: Dataset,
    pub partitions: Vec<ClientPartition>,
}

pub fn build_data(cfg: &ExperimentConfig) -> Result<FederatedData> {
    let space = &cfg.space;
    let full = match &cfg.dataset {
        DatasetSpec::Blobs { per_class, spread } => synth_blobs(
            space.num_classes,
            space.input_dim,
            *per_class,
            *spread,
            &mut rng_from(cfg.seed, &[stream::DATA]),
        )?,
        DatasetSpec::Csv {
            path,
            test_fraction,
        } => {
            let mut d = load_csv(path)?;
            if d.splits.iter().all(|&s| s == Split::Train) {
                let mut idx: Vec<usize> = (0..d.len()).collect();
                idx.shuffle(&mut rng_from(cfg.seed, &[stream::DATA]));
                let n_test = (d.len() as f64 * test_fraction).round() as usize;
                for &i in &idx[..n_test] {
                    d.splits[i] = Split::Test;
                }
            }
            d
        }
    };
    if full.input_dim() != space.input_dim {
        return Err(Error::config(
            "space.input_dim",
            format!("dataset has {} features", full.input_dim()),
        ));
    }
    if let Some(&label) = full.labels.iter().find(|&&l| l >= space.num_classes) {
        return Err(Error::LabelOutOfRange {
            label,
            classes: space.num_classes,
        });
    }
    let train = full.subset(Split::Train);
    let test = full.subset(Split::Test);
    if test.is_empty() {
        return Err(Error::Data("test split is empty".into()));
    }
    let partitions = dirichlet_partition(
        &train.labels,
        cfg.clients,
        cfg.alpha,
        &mut rng_from(cfg.seed, &[stream::PARTITION]),
    )?;
    Ok(FederatedData {
        train,
        test,
        partitions,
    })
}

/// Mutable state carried from one round to the next.
#[derive(Debug, Clone, PartialEq)]
pub struct SimState {
    /// Rounds completed so far.
    pub round: usize,
    pub params: ParamSet,
    pub tracking: TrackingState,
    pub ledger: CostLedger,
}

#[derive(Debug, Clone)]
pub struct RoundReport {
    pub plan: RoundPlan,
    pub beta_t: Option<f64>,
    pub metrics: Vec<MetricsRow>,
}

pub struct Simulation {
    cfg: ExperimentConfig,
    data: FederatedData,
    eval_archs: Vec<ArchDescriptor>,
    state: SimState,
}

impl Simulation {
    /// Validates `cfg`, builds data and initializes `W`.
    pub fn new(cfg: ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let data = build_data(&cfg)?;
        let params = init_supernet(&cfg.space, &mut rng_from(cfg.seed, &[stream::INIT]));
        let state = SimState {
            round: 0,
            params,
            tracking: TrackingState::new(cfg.clients),
            ledger: CostLedger::new(cfg.clients),
        };
        Self::with_state(cfg, data, state)
    }

    /// Continues a run from a checkpoint taken under the same config.
    pub fn resume(cfg: ExperimentConfig, ckpt: Checkpoint) -> Result<Self> {
        cfg.validate()?;
        if ckpt.space != cfg.space {
            return Err(Error::Checkpoint(
                "checkpoint was written for a different space config".into(),
            ));
        }
        if ckpt.seed != cfg.seed {
            return Err(Error::Checkpoint(format!(
                "checkpoint seed {} differs from config seed {}",
                ckpt.seed, cfg.seed
            )));
        }
        if ckpt.state.tracking.clients() != cfg.clients || ckpt.state.ledger.clients != cfg.clients
        {
            return Err(Error::Checkpoint("client count differs from config".into()));
        }
        if ckpt.state.round > cfg.rounds {
            return Err(Error::Checkpoint(format!(
                "checkpoint at round {} is past the configured {} rounds",
                ckpt.state.round, cfg.rounds
            )));
        }
        let data = build_data(&cfg)?;
        Self::with_state(cfg, data, ckpt.state)
    }

    fn with_state(cfg: ExperimentConfig, data: FederatedData, state: SimState) -> Result<Self> {
        let eval_archs = cfg.resolved_eval_archs()?;
        Ok(Simulation {
            cfg,
            data,
            eval_archs,
            state,
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn data(&self) -> &FederatedData {
        &self.data
    }

    pub fn state(&self) -> &SimState {
        &self.state
    }

    pub fn params(&self) -> &ParamSet {
        &self.state.params
    }

    pub fn is_done(&self) -> bool {
        self.state.round >= self.cfg.rounds
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            seed: self.cfg.seed,
            space: self.cfg.space.clone(),
            state: self.state.clone(),
        }
    }

    /// Accuracy of every evaluation architecture on the test split.
    pub fn evaluate_now(&self, beta_t: Option<f64>) -> Result<Vec<MetricsRow>> {
        let space = &self.cfg.space;
        let comm = self.state.ledger.total_bytes();
        let comp = self.state.ledger.total_train_flops();
        self.eval_archs
            .iter()
            .map(|a| {
                Ok(MetricsRow {
                    round: self.state.round,
                    arch: arch::format(space, a),
                    test_accuracy: evaluate(&self.state.params, a, &self.data.test)?,
                    beta_t,
                    comm_bytes_cum: comm,
                    comp_flops_cum: comp,
                })
            })
            .collect()
    }

    /// Runs round `state.round + 1`.
    pub fn step(&mut self) -> Result<RoundReport> {
        let cfg = &self.cfg;
        let space = &cfg.space;
        let t = self.state.round + 1;
        let t64 = t as u64;

        let plan = plan_for_round(cfg, t, &mut self.state.tracking);

        let params = &self.state.params;
        let data = &self.data;
        let updates: Vec<ClientUpdate> = plan
            .participants
            .par_iter()
            .map(|&k| {
                let arch = plan.arch_of(k);
                let local = extract(params, arch)?;
                let part = &data.partitions[k];
                let mut rng = rng_from(cfg.seed, &[stream::CLIENT, t64, k as u64]);
                let trained = client_update(
                    space,
                    &part.indices,
                    &data.train,
                    &local,
                    &cfg.train,
                    &mut rng,
                )
                .map_err(|e| Error::Divergence {
                    round: t,
                    client: k,
                    reason: e.to_string(),
                })?;
                Ok(ClientUpdate {
                    client_id: k,
                    weights: trained,
                    n_k: part.n_k(),
                })
            })
            .collect::<Result<_>>()?;

        let (next, beta_t) = match cfg.aggregator {
            AggregatorKind::Overlap => (aggregate_overlap(params, &updates)?, None),
            AggregatorKind::Maxnet => {
                let beta = beta_at(&cfg.beta_schedule(), t);
                (
                    aggregate_maxnet(params, &updates, plan.largest_holder, beta)?,
                    Some(beta),
                )
            }
        };

        let partitions = &self.data.partitions;
        self.state
            .ledger
            .record_round(space, &plan, cfg.train.local_epochs, |k| {
                partitions[k].n_k()
            });
        self.state.params = next;
        self.state.round = t;

        let metrics = if t.is_multiple_of(cfg.eval_every) || t == cfg.rounds {
            self.evaluate_now(beta_t)?
        } else {
            Vec::new()
        };
        Ok(RoundReport {
            plan,
            beta_t,
            metrics,
        })
    }

    /// Steps until the configured round count, returning the metrics rows
    /// produced along the way.
    pub fn run_to_end(&mut self) -> Result<Vec<MetricsRow>> {
        let mut rows = Vec::new();
        while !self.is_done() {
            rows.extend(self.step()?.metrics);
        }
        Ok(rows)
    }

    pub fn into_state(self) -> SimState {
        self.state
    }
}

/// Client sampling and subnetwork assignment for round `t`.
pub fn plan_for_round(cfg: &ExperimentConfig, t: usize, tracking: &mut TrackingState) -> RoundPlan {
    let t64 = t as u64;
    let participants = sample_clients(
        cfg.clients,
        cfg.participation,
        &mut rng_from(cfg.seed, &[stream::SAMPLE, t64]),
    );
    plan_round(
        cfg.distribution,
        &cfg.space,
        t,
        &participants,
        tracking,
        &mut rng_from(cfg.seed, &[stream::PLAN, t64]),
    )
}

/// The ledger a full run would produce, without doing any training: plans
/// depend only on the seed, so costs can be tallied up front.
pub fn plan_costs(cfg: &ExperimentConfig) -> Result<CostLedger> {
    cfg.validate()?;
    let data = build_data(cfg)?;
    let mut tracking = TrackingState::new(cfg.clients);
    let mut ledger = CostLedger::new(cfg.clients);
    for t in 1..=cfg.rounds {
        let plan = plan_for_round(cfg, t, &mut tracking);
        ledger.record_round(&cfg.space, &plan, cfg.train.local_epochs, |k| {
            data.partitions[k].n_k()
        });
    }
    Ok(ledger)
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub params: ParamSet,
    pub metrics: Vec<MetricsRow>,
    pub ledger: CostLedger,
    pub tracking: TrackingState,
}

/// Full run from initialization, including the round-0 evaluation.
pub fn run(cfg: ExperimentConfig) -> Result<RunOutput> {
    let mut sim = Simulation::new(cfg)?;
    let mut metrics = sim.evaluate_now(None)?;
    metrics.extend(sim.run_to_end()?);
    let state = sim.into_state();
    Ok(RunOutput {
        params: state.params,
        metrics,
        ledger: state.ledger,
        tracking: state.tracking,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LrGridRow {
    pub learning_rate: f64,
    pub initial_accuracy: f64,
    pub final_accuracy: f64,
}

/// FedAvg on the largest subnetwork alone, once per learning rate.
pub fn lr_grid(cfg: &ExperimentConfig, lrs: &[f64]) -> Result<Vec<LrGridRow>> {
    if lrs.is_empty() {
        return Err(Error::config("lr", "need at least one learning rate"));
    }
    lrs.iter()
        .map(|&lr| {
            let mut c = cfg.clone();
            c.distribution = Heuristic::Largest;
            c.aggregator = AggregatorKind::Overlap;
            c.train.learning_rate = lr;
            c.eval_archs = vec!["largest".into()];
            let out = run(c)?;
            Ok(LrGridRow {
                learning_rate: lr,
                initial_accuracy: out.metrics.first().expect("round-0 row").test_accuracy,
                final_accuracy: out.metrics.last().expect("final row").test_accuracy,
            })
        })
        .collect()
}

/// The four distribution/averaging combinations compared in the interference
/// ablation, with their display labels.
pub const ABLATION_ARMS: [(&str, Heuristic, AggregatorKind); 4] = [
    ("overlap + R", Heuristic::Random, AggregatorKind::Overlap),
    ("overlap + S", Heuristic::Sandwich, AggregatorKind::Overlap),
    (
        "overlap + TS",
        Heuristic::TrackingSandwich,
        AggregatorKind::Overlap,
    ),
    (
        "Wt β-decay + TS (MaxNet)",
        Heuristic::TrackingSandwich,
        AggregatorKind::Maxnet,
    ),
];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub heuristic: String,
    pub round: usize,
    pub arch: String,
    pub test_accuracy: f64,
    pub beta_t: Option<f64>,
    pub comm_bytes_cum: u64,
    pub comp_flops_cum: u64,
}

pub fn compare_ablation(cfg: &ExperimentConfig) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for (label, heuristic, aggregator) in ABLATION_ARMS {
        let mut c = cfg.clone();
        c.distribution = heuristic;
        c.aggregator = aggregator;
        for m in run(c)?.metrics {
            rows.push(AblationRow {
                heuristic: label.to_string(),
                round: m.round,
                arch: m.arch,
                test_accuracy: m.test_accuracy,
                beta_t: m.beta_t,
                comm_bytes_cum: m.comm_bytes_cum,
                comp_flops_cum: m.comp_flops_cum,
            });
        }
    }
    Ok(rows)
}

pub fn write_rows<W: Write, T: Serialize>(rows: &[T], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}
