//! Training cost accounting: FLOPs and bytes moved, for weight-shared
//! training and for training each family member independently with FedAvg
//! ("iFedAvg").
//!
//! Bytes are raw `f64` payload (8 bytes per parameter, each direction), with
//! no framing overhead. Training FLOPs of one local update are
//! `TRAIN_FLOPS_FACTOR · forward_flops(arch) · local_epochs · n_k`
//! (backward costs twice the forward pass).

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::arch::{flops, largest, param_count, smallest, ArchDescriptor, SpaceConfig};
use crate::distribution::RoundPlan;
use crate::error::{Error, Result};

pub const TRAIN_FLOPS_FACTOR: u64 = 3;
pub const BYTES_PER_PARAM: u64 = 8;

pub fn model_bytes(space: &SpaceConfig, arch: &ArchDescriptor) -> u64 {
    BYTES_PER_PARAM * param_count(space, arch) as u64
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostEntry {
    pub client_id: usize,
    pub arch: ArchDescriptor,
    /// Forward FLOPs per sample of the assigned subnetwork.
    pub model_flops: u64,
    /// FLOPs spent on local training this round.
    pub train_flops: u64,
    pub bytes_down: u64,
    pub bytes_up: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostLedger {
    pub clients: usize,
    pub rounds: Vec<Vec<CostEntry>>,
}

impl CostLedger {
    pub fn new(clients: usize) -> Self {
        CostLedger {
            clients,
            rounds: Vec::new(),
        }
    }

    /// Appends one entry per participant of `plan`. `n_k(client)` gives the
    /// client's partition size.
    pub fn record_round(
        &mut self,
        space: &SpaceConfig,
        plan: &RoundPlan,
        local_epochs: usize,
        n_k: impl Fn(usize) -> usize,
    ) {
        let entries = plan
            .participants
            .iter()
            .map(|&k| {
                let arch = plan.arch_of(k).clone();
                let model_flops = flops(space, &arch);
                let bytes = model_bytes(space, &arch);
                CostEntry {
                    client_id: k,
                    train_flops: TRAIN_FLOPS_FACTOR
                        * model_flops
                        * local_epochs as u64
                        * n_k(k) as u64,
                    model_flops,
                    bytes_down: bytes,
                    bytes_up: bytes,
                    arch,
                }
            })
            .collect();
        self.rounds.push(entries);
    }

    pub fn num_rounds(&self) -> usize {
        self.rounds.len()
    }

    fn entries(&self) -> impl Iterator<Item = &CostEntry> {
        self.rounds.iter().flatten()
    }

    pub fn total_train_flops(&self) -> u64 {
        self.entries().map(|e| e.train_flops).sum()
    }

    pub fn total_model_flops(&self) -> u64 {
        self.entries().map(|e| e.model_flops).sum()
    }

    pub fn total_bytes(&self) -> u64 {
        self.entries().map(|e| e.bytes_down + e.bytes_up).sum()
    }

    pub fn round_bytes(&self, round_idx: usize) -> u64 {
        self.rounds[round_idx]
            .iter()
            .map(|e| e.bytes_down + e.bytes_up)
            .sum()
    }

    /// Sum of the model FLOPs every client saw, averaged over all clients and
    /// rounds.
    pub fn superfed_avg_comp(&self) -> f64 {
        assert!(self.num_rounds() >= 1, "ledger has no rounds");
        self.total_model_flops() as f64 / (self.clients as f64 * self.num_rounds() as f64)
    }

    /// Bytes moved per round, averaged over rounds.
    pub fn superfed_avg_comm(&self) -> f64 {
        assert!(self.num_rounds() >= 1, "ledger has no rounds");
        self.total_bytes() as f64 / self.num_rounds() as f64
    }
}

/// Per-round communication of training each model independently with FedAvg:
/// `2 · participants · Σ sizes`.
pub fn ifedavg_comm(sizes: &[f64], participants: usize) -> f64 {
    2.0 * participants as f64 * sizes.iter().sum::<f64>()
}

/// Per-round computation of independent training: the family's summed
/// model FLOPs.
pub fn ifedavg_comp(model_flops: &[f64]) -> f64 {
    model_flops.iter().sum()
}

const REFERENCE_DEPTHS: [[usize; 4]; 9] = [
    [0, 0, 0, 0],
    [0, 0, 0, 1],
    [0, 1, 0, 1],
    [0, 1, 1, 1],
    [1, 1, 1, 1],
    [1, 1, 1, 2],
    [1, 2, 1, 2],
    [1, 2, 2, 2],
    [2, 2, 2, 2],
];
const REFERENCE_RATIOS: [f64; 9] = [0.1, 0.14, 0.14, 0.14, 0.18, 0.22, 0.22, 0.22, 0.25];

/// Nine nested architectures running from the smallest to the largest
/// subnetwork. On 4-stage spaces with extra depth 2 the depth codes follow
/// the reference schedule and ratios map linearly onto `ratio_choices`;
/// other spaces get an evenly spaced chain.
pub fn reference_family(space: &SpaceConfig) -> Vec<ArchDescriptor> {
    let r_max = space.ratio_choices.len() - 1;
    let uniform = |depths: Vec<usize>, r: usize| {
        let mut a = ArchDescriptor {
            depths,
            ratios: vec![r; space.max_blocks()],
        };
        a.canonicalize(space);
        a
    };
    if space.stages == 4 && space.max_extra_depth == 2 {
        let (lo, hi) = (REFERENCE_RATIOS[0], REFERENCE_RATIOS[8]);
        return REFERENCE_DEPTHS
            .iter()
            .zip(REFERENCE_RATIOS)
            .map(|(d, r)| {
                let idx = ((r - lo) / (hi - lo) * r_max as f64).round() as usize;
                uniform(d.to_vec(), idx)
            })
            .collect();
    }
    let mut fam: Vec<ArchDescriptor> = (0..9)
        .map(|i| {
            let f = i as f64 / 8.0;
            let d = (f * space.max_extra_depth as f64).round() as usize;
            let r = (f * r_max as f64).round() as usize;
            uniform(vec![d; space.stages], r)
        })
        .collect();
    fam[0] = smallest(space);
    fam[8] = largest(space);
    fam.dedup();
    fam
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostReportRow {
    pub family_size: usize,
    /// GFLOPs per round.
    pub ifedavg_comp: f64,
    /// Bytes per round.
    pub ifedavg_comm: f64,
    pub superfed_comp: f64,
    pub superfed_comm: f64,
}

/// Costs of independently training the first `1..=family.len()` members of
/// `family`, next to the weight-shared costs recorded in `ledger`.
pub fn cost_report(
    space: &SpaceConfig,
    family: &[ArchDescriptor],
    ledger: &CostLedger,
    participants: usize,
) -> Vec<CostReportRow> {
    let superfed_comp = ledger.superfed_avg_comp() / 1e9;
    let superfed_comm = ledger.superfed_avg_comm();
    (1..=family.len())
        .map(|n| {
            let sizes: Vec<f64> = family[..n]
                .iter()
                .map(|a| model_bytes(space, a) as f64)
                .collect();
            let comps: Vec<f64> = family[..n]
                .iter()
                .map(|a| flops(space, a) as f64 / 1e9)
                .collect();
            CostReportRow {
                family_size: n,
                ifedavg_comp: ifedavg_comp(&comps),
                ifedavg_comm: ifedavg_comm(&sizes, participants),
                superfed_comp,
                superfed_comm,
            }
        })
        .collect()
}

pub fn write_cost_report<W: Write>(rows: &[CostReportRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)
            .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    }
    w.flush()?;
    Ok(())
}
