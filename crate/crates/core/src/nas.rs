//! Evolutionary search for the most accurate subnetwork under a FLOPs
//! budget. Candidates are evaluated with weights taken straight from the
//! trained supernet, without retraining.
//!
//! Selection is elitist truncation: each generation keeps the top
//! `parent_fraction` of the population and refills it with mutated
//! crossovers of those parents.

use std::cmp::Ordering;
use std::collections::{HashMap, HashSet};

use rand::seq::index;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::arch::{
    enumerate_family, family_size, flops, random_arch, smallest, ArchDescriptor, SpaceConfig,
};
use crate::client::evaluate;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::supernet::ParamSet;

const ENUMERATE_LIMIT: usize = 100_000;
const CHILD_TRIES: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NasConfig {
    pub population: usize,
    pub generations: usize,
    pub parent_fraction: f64,
    pub mutation_prob: f64,
    /// Forward FLOPs per sample.
    pub flops_budget: u64,
    /// Validation rows used for fitness; 0 means all.
    pub eval_subset_size: usize,
}

impl Default for NasConfig {
    fn default() -> Self {
        NasConfig {
            population: 64,
            generations: 20,
            parent_fraction: 0.25,
            mutation_prob: 0.1,
            flops_budget: u64::MAX,
            eval_subset_size: 0,
        }
    }
}

impl NasConfig {
    pub fn validate(&self) -> Result<()> {
        if self.population < 2 {
            return Err(Error::config("nas.population", "must be >= 2"));
        }
        if self.generations == 0 {
            return Err(Error::config("nas.generations", "must be >= 1"));
        }
        if !(self.parent_fraction > 0.0 && self.parent_fraction < 1.0) {
            return Err(Error::config("nas.parent_fraction", "must lie in (0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.mutation_prob) {
            return Err(Error::config("nas.mutation_prob", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Resamples each depth and each ratio index independently with probability
/// `p`.
pub fn mutate<R: Rng + ?Sized>(
    arch: &ArchDescriptor,
    space: &SpaceConfig,
    p: f64,
    rng: &mut R,
) -> ArchDescriptor {
    let mut out = arch.clone();
    for d in out.depths.iter_mut() {
        if rng.random_bool(p) {
            *d = rng.random_range(0..=space.max_extra_depth);
        }
    }
    for r in out.ratios.iter_mut() {
        if rng.random_bool(p) {
            *r = rng.random_range(0..space.ratio_choices.len());
        }
    }
    out.canonicalize(space);
    out
}

/// Takes every entry from one parent or the other with equal probability.
pub fn crossover<R: Rng + ?Sized>(
    a: &ArchDescriptor,
    b: &ArchDescriptor,
    space: &SpaceConfig,
    rng: &mut R,
) -> ArchDescriptor {
    let mut pick = |x: &[usize], y: &[usize]| -> Vec<usize> {
        x.iter()
            .zip(y)
            .map(|(&u, &v)| if rng.random_bool(0.5) { u } else { v })
            .collect()
    };
    let depths = pick(&a.depths, &b.depths);
    let ratios = pick(&a.ratios, &b.ratios);
    let mut out = ArchDescriptor { depths, ratios };
    out.canonicalize(space);
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub arch: ArchDescriptor,
    pub accuracy: f64,
    pub flops: u64,
}

/// Higher accuracy first, then fewer FLOPs, then the smaller descriptor.
pub fn rank(a: &Candidate, b: &Candidate) -> Ordering {
    b.accuracy
        .total_cmp(&a.accuracy)
        .then(a.flops.cmp(&b.flops))
        .then_with(|| a.arch.cmp(&b.arch))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchResult {
    pub best: Candidate,
    /// Best accuracy after each generation.
    pub history: Vec<f64>,
    /// Distinct architectures evaluated.
    pub evaluations: usize,
}

struct Evaluator<'a> {
    w: &'a ParamSet,
    val: Dataset,
    cache: HashMap<ArchDescriptor, f64>,
}

impl<'a> Evaluator<'a> {
    fn new<R: Rng + ?Sized>(
        w: &'a ParamSet,
        valset: &Dataset,
        subset: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if valset.is_empty() {
            return Err(Error::Data("validation set is empty".into()));
        }
        let val = if subset > 0 && subset < valset.len() {
            let mut idx = index::sample(rng, valset.len(), subset).into_vec();
            idx.sort_unstable();
            valset.select(&idx)
        } else {
            valset.clone()
        };
        Ok(Evaluator {
            w,
            val,
            cache: HashMap::new(),
        })
    }

    fn score(&mut self, archs: &[ArchDescriptor]) -> Result<Vec<Candidate>> {
        let mut todo: Vec<&ArchDescriptor> = archs
            .iter()
            .filter(|a| !self.cache.contains_key(*a))
            .collect();
        todo.sort();
        todo.dedup();
        let fresh: Vec<(ArchDescriptor, f64)> = todo
            .par_iter()
            .map(|a| evaluate(self.w, a, &self.val).map(|acc| ((*a).clone(), acc)))
            .collect::<Result<_>>()?;
        self.cache.extend(fresh);
        let space = self.w.space();
        Ok(archs
            .iter()
            .map(|a| Candidate {
                arch: a.clone(),
                accuracy: self.cache[a],
                flops: flops(space, a),
            })
            .collect())
    }
}

fn check_budget(space: &SpaceConfig, budget: u64) -> Result<()> {
    let floor = flops(space, &smallest(space));
    if floor > budget {
        return Err(Error::Infeasible(format!(
            "budget {budget} is below the smallest subnetwork's {floor} FLOPs"
        )));
    }
    Ok(())
}

/// Up to `count` distinct feasible architectures: the whole feasible family
/// when it fits, otherwise rejection-sampled.
fn initial_population<R: Rng + ?Sized>(
    space: &SpaceConfig,
    count: usize,
    budget: u64,
    rng: &mut R,
) -> Vec<ArchDescriptor> {
    if family_size(space) <= count as u128 {
        if let Ok(all) = enumerate_family(space, ENUMERATE_LIMIT) {
            return all
                .into_iter()
                .filter(|a| flops(space, a) <= budget)
                .collect();
        }
    }
    let mut seen = HashSet::new();
    let mut pop = Vec::with_capacity(count);
    for _ in 0..count * CHILD_TRIES {
        if pop.len() == count {
            break;
        }
        let a = random_arch(space, rng);
        if flops(space, &a) <= budget && seen.insert(a.clone()) {
            pop.push(a);
        }
    }
    if pop.is_empty() {
        pop.push(smallest(space));
    }
    pop
}

pub fn evolve<R: Rng + ?Sized>(
    w: &ParamSet,
    valset: &Dataset,
    cfg: &NasConfig,
    rng: &mut R,
) -> Result<SearchResult> {
    cfg.validate()?;
    let space = w.space().clone();
    check_budget(&space, cfg.flops_budget)?;
    let mut eval = Evaluator::new(w, valset, cfg.eval_subset_size, rng)?;
    let mut population = initial_population(&space, cfg.population, cfg.flops_budget, rng);
    let mut history = Vec::with_capacity(cfg.generations);
    let mut best: Option<Candidate> = None;

    for gen in 0..cfg.generations {
        let mut scored = eval.score(&population)?;
        scored.sort_by(rank);
        let top = scored[0].clone();
        if best
            .as_ref()
            .is_none_or(|b| rank(&top, b) == Ordering::Less)
        {
            best = Some(top);
        }
        history.push(best.as_ref().unwrap().accuracy);
        if gen + 1 == cfg.generations {
            break;
        }
        let n_parents =
            ((cfg.parent_fraction * scored.len() as f64).ceil() as usize).clamp(1, scored.len());
        let parents: Vec<ArchDescriptor> =
            scored[..n_parents].iter().map(|c| c.arch.clone()).collect();
        let mut next = parents.clone();
        while next.len() < cfg.population {
            next.push(breed(&space, &parents, cfg, rng));
        }
        population = next;
    }
    Ok(SearchResult {
        best: best.expect("at least one generation"),
        history,
        evaluations: eval.cache.len(),
    })
}

fn breed<R: Rng + ?Sized>(
    space: &SpaceConfig,
    parents: &[ArchDescriptor],
    cfg: &NasConfig,
    rng: &mut R,
) -> ArchDescriptor {
    for _ in 0..CHILD_TRIES {
        let a = &parents[rng.random_range(0..parents.len())];
        let b = &parents[rng.random_range(0..parents.len())];
        let child = mutate(&crossover(a, b, space, rng), space, cfg.mutation_prob, rng);
        if flops(space, &child) <= cfg.flops_budget {
            return child;
        }
    }
    parents[rng.random_range(0..parents.len())].clone()
}

/// Baseline: best of `evaluations` distinct feasible random architectures
/// (fewer if the feasible family is smaller).
pub fn random_search<R: Rng + ?Sized>(
    w: &ParamSet,
    valset: &Dataset,
    evaluations: usize,
    budget: u64,
    eval_subset_size: usize,
    rng: &mut R,
) -> Result<Candidate> {
    let space = w.space().clone();
    check_budget(&space, budget)?;
    let mut eval = Evaluator::new(w, valset, eval_subset_size, rng)?;
    let mut seen = HashSet::new();
    let mut picks = Vec::new();
    for _ in 0..evaluations.max(1) * CHILD_TRIES {
        if picks.len() == evaluations.max(1) {
            break;
        }
        let a = random_arch(&space, rng);
        if flops(&space, &a) <= budget && seen.insert(a.clone()) {
            picks.push(a);
        }
    }
    if picks.is_empty() {
        picks.push(smallest(&space));
    }
    let mut scored = eval.score(&picks)?;
    scored.sort_by(rank);
    Ok(scored.swap_remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::largest;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn space() -> SpaceConfig {
        SpaceConfig {
            stages: 2,
            base_depth: 1,
            max_extra_depth: 1,
            ratio_choices: vec![0.5, 1.0],
            hidden_width: 8,
            max_mid_width: 8,
            input_dim: 4,
            num_classes: 3,
        }
    }

    #[test]
    fn mutation_extremes() {
        let s = SpaceConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = random_arch(&s, &mut rng);
        assert_eq!(mutate(&a, &s, 0.0, &mut rng), a);
        assert_eq!(crossover(&a, &a, &s, &mut rng), a);

        // p = 1 from the largest: depth codes must be uniform over {0,1,2}.
        let top = largest(&s);
        let mut counts = [0usize; 3];
        for _ in 0..1000 {
            let m = mutate(&top, &s, 1.0, &mut rng);
            counts[m.depths[0]] += 1;
        }
        for c in counts {
            // 1000/3 ± ~5 standard deviations.
            assert!((c as f64 - 333.3).abs() < 75.0, "{counts:?}");
        }
    }

    #[test]
    fn crossover_takes_entries_from_parents() {
        let s = SpaceConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (a, b) = (smallest(&s), largest(&s));
        for _ in 0..20 {
            let c = crossover(&a, &b, &s, &mut rng);
            assert!(c.depths.iter().all(|&d| d == 0 || d == 2));
            let mut canon = c.clone();
            canon.canonicalize(&s);
            assert_eq!(canon, c);
        }
    }

    #[test]
    fn budget_below_smallest_is_infeasible() {
        let s = space();
        let w = crate::supernet::ParamSet::zeros(&s);
        let val =
            crate::data::synth_blobs(3, 4, 10, 0.5, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let cfg = NasConfig {
            flops_budget: flops(&s, &smallest(&s)) - 1,
            ..NasConfig::default()
        };
        assert!(matches!(
            evolve(&w, &val, &cfg, &mut ChaCha8Rng::seed_from_u64(0)),
            Err(Error::Infeasible(_))
        ));
    }

    #[test]
    fn results_are_feasible_and_monotone() {
        let s = SpaceConfig {
            stages: 3,
            max_extra_depth: 2,
            base_depth: 1,
            ..space()
        };
        let w = crate::supernet::init_supernet(&s, &mut ChaCha8Rng::seed_from_u64(2));
        let val =
            crate::data::synth_blobs(3, 4, 30, 0.5, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let budget = (flops(&s, &smallest(&s)) + flops(&s, &largest(&s))) / 2;
        let cfg = NasConfig {
            population: 16,
            generations: 5,
            flops_budget: budget,
            ..NasConfig::default()
        };
        let a = evolve(&w, &val, &cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let b = evolve(&w, &val, &cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(a, b);
        assert!(a.best.flops <= budget);
        assert!(a.history.windows(2).all(|h| h[1] >= h[0]));
        assert_eq!(a.history.len(), 5);
    }
}
