//! Client sampling and per-round subnetwork assignment.
//!
//! Every plan hands the largest subnetwork to exactly one designated client,
//! since the aggregators need the whole supernet covered each round.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::arch::{largest, random_arch, smallest, ArchDescriptor, SpaceConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Heuristic {
    Random,
    Sandwich,
    TrackingSandwich,
    /// Every participant trains the largest subnetwork (plain FedAvg on it).
    Largest,
}

impl Heuristic {
    pub fn as_str(self) -> &'static str {
        match self {
            Heuristic::Random => "random",
            Heuristic::Sandwich => "sandwich",
            Heuristic::TrackingSandwich => "tracking_sandwich",
            Heuristic::Largest => "largest",
        }
    }
}

impl std::str::FromStr for Heuristic {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "random" => Ok(Heuristic::Random),
            "sandwich" => Ok(Heuristic::Sandwich),
            "tracking_sandwich" => Ok(Heuristic::TrackingSandwich),
            "largest" => Ok(Heuristic::Largest),
            other => Err(format!(
                "unknown distribution `{other}` (expected random | sandwich | tracking_sandwich | largest)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrackingState {
    pub smallest_count: Vec<u64>,
    pub largest_count: Vec<u64>,
}

impl TrackingState {
    pub fn new(clients: usize) -> Self {
        TrackingState {
            smallest_count: vec![0; clients],
            largest_count: vec![0; clients],
        }
    }

    pub fn clients(&self) -> usize {
        self.largest_count.len()
    }
}

/// Assignment `H(t)` for one round.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundPlan {
    pub round: usize,
    /// Participating client ids, ascending.
    pub participants: Vec<usize>,
    pub assignment: BTreeMap<usize, ArchDescriptor>,
    pub largest_holder: usize,
}

impl RoundPlan {
    pub fn arch_of(&self, client: usize) -> &ArchDescriptor {
        &self.assignment[&client]
    }
}

pub fn participants_per_round(clients: usize, fraction: f64) -> usize {
    ((fraction * clients as f64).floor() as usize).clamp(1, clients.max(1))
}

/// Uniform subset of `max(floor(C·K), 1)` clients, sorted ascending.
pub fn sample_clients<R: Rng + ?Sized>(clients: usize, fraction: f64, rng: &mut R) -> Vec<usize> {
    assert!(clients >= 1, "need at least one client");
    assert!(fraction > 0.0 && fraction <= 1.0, "C must lie in (0, 1]");
    let m = participants_per_round(clients, fraction);
    let mut picked = index::sample(rng, clients, m).into_vec();
    picked.sort_unstable();
    picked
}

fn plan_with<R: Rng + ?Sized>(
    space: &SpaceConfig,
    round: usize,
    participants: &[usize],
    largest_holder: usize,
    smallest_holder: Option<usize>,
    rng: &mut R,
) -> RoundPlan {
    let top = largest(space);
    let bottom = smallest(space);
    let assignment = participants
        .iter()
        .map(|&k| {
            let arch = if k == largest_holder {
                top.clone()
            } else if Some(k) == smallest_holder {
                bottom.clone()
            } else {
                random_arch(space, rng)
            };
            (k, arch)
        })
        .collect();
    RoundPlan {
        round,
        participants: participants.to_vec(),
        assignment,
        largest_holder,
    }
}

fn check_participants(participants: &[usize]) {
    assert!(
        !participants.is_empty(),
        "a round needs at least one participant"
    );
}

/// One uniformly chosen participant gets the largest subnetwork; the others
/// get independent random subnetworks.
pub fn plan_random<R: Rng + ?Sized>(
    space: &SpaceConfig,
    round: usize,
    participants: &[usize],
    rng: &mut R,
) -> RoundPlan {
    check_participants(participants);
    let j = participants[rng.random_range(0..participants.len())];
    plan_with(space, round, participants, j, None, rng)
}

/// Sandwich rule: one largest, one smallest, the rest random. A lone
/// participant gets the largest.
pub fn plan_sandwich<R: Rng + ?Sized>(
    space: &SpaceConfig,
    round: usize,
    participants: &[usize],
    rng: &mut R,
) -> RoundPlan {
    check_participants(participants);
    let n = participants.len();
    let li = rng.random_range(0..n);
    let small = if n >= 2 {
        let mut si = rng.random_range(0..n - 1);
        if si >= li {
            si += 1;
        }
        Some(participants[si])
    } else {
        None
    };
    plan_with(space, round, participants, participants[li], small, rng)
}

/// Sandwich rule where the largest and smallest subnetworks go to the
/// participants that have received them least often (ties to the lowest id).
pub fn plan_tracking_sandwich<R: Rng + ?Sized>(
    space: &SpaceConfig,
    round: usize,
    participants: &[usize],
    state: &TrackingState,
    rng: &mut R,
) -> (RoundPlan, TrackingState) {
    check_participants(participants);
    let argmin = |counts: &[u64], skip: Option<usize>| {
        participants
            .iter()
            .copied()
            .filter(|&k| Some(k) != skip)
            .min_by_key(|&k| (counts[k], k))
    };
    let j = argmin(&state.largest_count, None).expect("nonempty");
    let small = argmin(&state.smallest_count, Some(j));
    let plan = plan_with(space, round, participants, j, small, rng);
    let mut next = state.clone();
    next.largest_count[j] += 1;
    if let Some(s) = small {
        next.smallest_count[s] += 1;
    }
    (plan, next)
}

pub fn plan_largest(space: &SpaceConfig, round: usize, participants: &[usize]) -> RoundPlan {
    check_participants(participants);
    let top = largest(space);
    RoundPlan {
        round,
        participants: participants.to_vec(),
        assignment: participants.iter().map(|&k| (k, top.clone())).collect(),
        largest_holder: participants[0],
    }
}

/// Dispatches to the configured heuristic. `state` is only read and advanced
/// by tracking-sandwich.
pub fn plan_round<R: Rng + ?Sized>(
    heuristic: Heuristic,
    space: &SpaceConfig,
    round: usize,
    participants: &[usize],
    state: &mut TrackingState,
    rng: &mut R,
) -> RoundPlan {
    match heuristic {
        Heuristic::Random => plan_random(space, round, participants, rng),
        Heuristic::Sandwich => plan_sandwich(space, round, participants, rng),
        Heuristic::TrackingSandwich => {
            let (plan, next) = plan_tracking_sandwich(space, round, participants, state, rng);
            *state = next;
            plan
        }
        Heuristic::Largest => plan_largest(space, round, participants),
    }
}
