//! Server-side merging of overlapping subnetwork updates.
//!
//! Both aggregators compute, per supernet index `i`,
//!
//! ```text
//! W_{t+1}[i] = Σ_k λ_k n_k w_k[i] / Σ_k λ_k n_k      (k ranging over clients covering i)
//! ```
//!
//! and keep `W_t[i]` where no client covers `i`. Overlap-cardinality
//! averaging uses `λ_k = 1`; MaxNet averaging gives the largest-subnet holder
//! `β_t` and splits `1 − β_t` evenly among the others.
//!
//! Coverage is tracked with an explicit hit count rather than by testing the
//! weighted sum for zero: a covered parameter may legitimately sum to `0.0`.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::arch::{largest, mask, ArchDescriptor, SpaceConfig};
use crate::error::{Error, Result};
use crate::supernet::{ParamSet, SubnetWeights};
use crate::tensor::Tensor;

/// Locally trained weights returned by one client.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    pub client_id: usize,
    pub weights: SubnetWeights,
    /// Size of the client's data partition.
    pub n_k: usize,
}

impl ClientUpdate {
    pub fn arch(&self) -> &ArchDescriptor {
        &self.weights.arch
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecayKind {
    Constant,
    Linear,
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BetaSchedule {
    pub beta0: f64,
    pub beta_end: f64,
    pub decay_kind: DecayKind,
    /// Decay period in rounds.
    pub decay_rounds: usize,
}

impl BetaSchedule {
    /// β₀ = 0.9, cosine decay over 80% of `total_rounds` down to
    /// `1 / participants`.
    pub fn standard(total_rounds: usize, participants: usize) -> Self {
        BetaSchedule {
            beta0: 0.9,
            beta_end: 1.0 / participants.max(1) as f64,
            decay_kind: DecayKind::Cosine,
            decay_rounds: ((0.8 * total_rounds as f64).round() as usize).max(1),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta_end > 0.0 && self.beta_end <= self.beta0 && self.beta0 <= 1.0) {
            return Err(Error::config(
                "beta",
                format!(
                    "need 0 < beta_end ({}) <= beta0 ({}) <= 1",
                    self.beta_end, self.beta0
                ),
            ));
        }
        if self.decay_rounds == 0 {
            return Err(Error::config("beta.decay_rounds", "must be >= 1"));
        }
        Ok(())
    }
}

/// `β_t` for round `t >= 1`. Exact at both ends of the decay period.
pub fn beta_at(schedule: &BetaSchedule, t: usize) -> f64 {
    assert!(t >= 1, "rounds are numbered from 1");
    let BetaSchedule {
        beta0,
        beta_end,
        decay_kind,
        decay_rounds,
    } = *schedule;
    if decay_kind == DecayKind::Constant {
        return beta0;
    }
    let progress = if decay_rounds > 1 {
        ((t - 1) as f64 / (decay_rounds - 1) as f64).min(1.0)
    } else {
        1.0
    };
    if progress == 0.0 {
        return beta0;
    }
    if progress >= 1.0 {
        return beta_end;
    }
    match decay_kind {
        DecayKind::Linear => beta0 - (beta0 - beta_end) * progress,
        DecayKind::Cosine => beta_end + (beta0 - beta_end) * 0.5 * (1.0 + (PI * progress).cos()),
        DecayKind::Constant => unreachable!(),
    }
}

/// Per-index coverage of a set of updates.
#[derive(Debug, Clone, PartialEq)]
pub struct Coverage {
    /// `Σ λ_k n_k` over clients covering each index.
    pub weight: BTreeMap<String, Tensor>,
    /// Number of clients with `λ_k n_k > 0` covering each index.
    pub hits: BTreeMap<String, Vec<u32>>,
}

pub fn coverage(space: &SpaceConfig, updates: &[ClientUpdate], lambdas: &[f64]) -> Coverage {
    assert_eq!(updates.len(), lambdas.len());
    let mut acc = Accumulator::new(space);
    for (u, l) in ordered(updates, lambdas) {
        acc.add(space, u, l, false);
    }
    Coverage {
        weight: acc.weight,
        hits: acc.hits,
    }
}

struct Accumulator {
    sum: BTreeMap<String, Tensor>,
    weight: BTreeMap<String, Tensor>,
    hits: BTreeMap<String, Vec<u32>>,
    last: BTreeMap<String, Tensor>,
}

impl Accumulator {
    fn new(space: &SpaceConfig) -> Self {
        let zeros: BTreeMap<String, Tensor> = space
            .tensor_shapes()
            .into_iter()
            .map(|(n, s)| (n, Tensor::zeros(&s)))
            .collect();
        let hits = zeros
            .iter()
            .map(|(n, t)| (n.clone(), vec![0; t.len()]))
            .collect();
        Accumulator {
            sum: zeros.clone(),
            weight: zeros.clone(),
            last: zeros,
            hits,
        }
    }

    fn add(&mut self, space: &SpaceConfig, u: &ClientUpdate, lambda: f64, with_values: bool) {
        let scale = lambda * u.n_k as f64;
        if scale <= 0.0 {
            return;
        }
        for (name, region) in mask(space, u.arch()).iter() {
            let src = &u.weights.tensors[name];
            let (_, full_cols) = self.weight[name].dims2();
            let sub_cols = region.cols.len();
            let weight = self.weight.get_mut(name).unwrap().data_mut();
            let hits = self.hits.get_mut(name).unwrap();
            for r in region.rows.clone() {
                for c in region.cols.clone() {
                    let i = r * full_cols + c;
                    weight[i] += scale;
                    hits[i] += 1;
                }
            }
            if !with_values {
                continue;
            }
            let sum = self.sum.get_mut(name).unwrap().data_mut();
            let last = self.last.get_mut(name).unwrap().data_mut();
            for r in region.rows.clone() {
                for c in region.cols.clone() {
                    let i = r * full_cols + c;
                    let v = src.data()[r * sub_cols + c];
                    sum[i] += scale * v;
                    last[i] = v;
                }
            }
        }
    }

    fn finish(self, w_t: &ParamSet) -> ParamSet {
        let mut out = w_t.clone();
        for (name, t) in out.iter_mut() {
            let sum = self.sum[name].data();
            let weight = self.weight[name].data();
            let last = self.last[name].data();
            let hits = &self.hits[name];
            for (i, v) in t.data_mut().iter_mut().enumerate() {
                *v = match hits[i] {
                    0 => *v,
                    // A lone contributor's weighted mean is its own value.
                    1 => last[i],
                    _ => sum[i] / weight[i],
                };
            }
        }
        out
    }
}

/// Updates in ascending client-id order so that sums do not depend on the
/// order in which clients finished.
fn ordered<'a>(
    updates: &'a [ClientUpdate],
    lambdas: &'a [f64],
) -> impl Iterator<Item = (&'a ClientUpdate, f64)> {
    let mut idx: Vec<usize> = (0..updates.len()).collect();
    idx.sort_by_key(|&i| updates[i].client_id);
    idx.into_iter().map(move |i| (&updates[i], lambdas[i]))
}

fn check_updates(space: &SpaceConfig, updates: &[ClientUpdate]) -> Result<()> {
    if updates.is_empty() {
        return Err(Error::Aggregation("no client updates".into()));
    }
    for u in updates {
        u.arch().check(space)?;
        if u.n_k == 0 {
            return Err(Error::Aggregation(format!(
                "client {} reports an empty partition",
                u.client_id
            )));
        }
        if !u.weights.is_finite() {
            return Err(Error::NonFinite(format!(
                "update from client {}",
                u.client_id
            )));
        }
    }
    Ok(())
}

fn weighted_merge(w_t: &ParamSet, updates: &[ClientUpdate], lambdas: &[f64]) -> ParamSet {
    let space = w_t.space();
    let mut acc = Accumulator::new(space);
    for (u, l) in ordered(updates, lambdas) {
        acc.add(space, u, l, true);
    }
    acc.finish(w_t)
}

/// Shared-parameter averaging by overlap cardinality. At least one update
/// must carry the largest architecture.
pub fn aggregate_overlap(w_t: &ParamSet, updates: &[ClientUpdate]) -> Result<ParamSet> {
    let space = w_t.space();
    check_updates(space, updates)?;
    let top = largest(space);
    if !updates.iter().any(|u| u.arch() == &top) {
        return Err(Error::Aggregation(
            "no client trained the largest subnetwork this round".into(),
        ));
    }
    Ok(weighted_merge(w_t, updates, &vec![1.0; updates.len()]))
}

/// MaxNet weighting: client `largest_holder` gets `beta_t`, every other
/// client `(1 − beta_t) / (|S_t| − 1)`.
pub fn maxnet_lambdas(updates: &[ClientUpdate], largest_holder: usize, beta_t: f64) -> Vec<f64> {
    let others = updates.len().saturating_sub(1);
    updates
        .iter()
        .map(|u| {
            if u.client_id == largest_holder {
                if others == 0 {
                    1.0
                } else {
                    beta_t
                }
            } else {
                (1.0 - beta_t) / others as f64
            }
        })
        .collect()
}

pub fn aggregate_maxnet(
    w_t: &ParamSet,
    updates: &[ClientUpdate],
    largest_holder: usize,
    beta_t: f64,
) -> Result<ParamSet> {
    let space = w_t.space();
    check_updates(space, updates)?;
    if !(beta_t > 0.0 && beta_t <= 1.0) {
        return Err(Error::Aggregation(format!(
            "beta_t {beta_t} outside (0, 1]"
        )));
    }
    let holders: Vec<_> = updates
        .iter()
        .filter(|u| u.client_id == largest_holder)
        .collect();
    match holders.as_slice() {
        [] => {
            return Err(Error::Aggregation(format!(
                "largest holder {largest_holder} has no update"
            )))
        }
        [u] if u.arch() != &largest(space) => {
            return Err(Error::Aggregation(format!(
                "client {largest_holder} did not train the largest subnetwork"
            )))
        }
        [_] => {}
        _ => {
            return Err(Error::Aggregation(format!(
                "client {largest_holder} appears more than once"
            )))
        }
    }
    let lambdas = maxnet_lambdas(updates, largest_holder, beta_t);
    Ok(weighted_merge(w_t, updates, &lambdas))
}
