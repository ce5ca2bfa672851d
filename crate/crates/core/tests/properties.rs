mod common;

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{owns, random_space};
use superfed_core::aggregation::{aggregate_maxnet, aggregate_overlap, beta_at, maxnet_lambdas};
use superfed_core::arch::{self, is_subarch, largest, mask, random_arch, SpaceConfig};
use superfed_core::data::dirichlet_partition;
use superfed_core::distribution::plan_round;
use superfed_core::supernet::{extract, init_supernet, superimpose};
use superfed_core::{BetaSchedule, ClientUpdate, DecayKind, Heuristic, ParamSet, TrackingState};

fn space_from(rng: &mut ChaCha8Rng) -> SpaceConfig {
    random_space(&mut |n| rng.random_range(0..n))
}

/// Updates for distinct clients; client 100 always holds the largest
/// architecture. Values are perturbed so every update differs from `w`.
fn random_updates(space: &SpaceConfig, w: &ParamSet, rng: &mut ChaCha8Rng) -> Vec<ClientUpdate> {
    let n = rng.random_range(1..6);
    let mut ids: Vec<usize> = (0..20).collect();
    ids.shuffle(rng);
    (0..n)
        .map(|i| {
            let a = if i == 0 {
                largest(space)
            } else {
                random_arch(space, rng)
            };
            let mut weights = extract(w, &a).unwrap();
            for t in weights.tensors.values_mut() {
                for v in t.data_mut() {
                    *v += rng.random_range(-1.0..1.0);
                }
            }
            ClientUpdate {
                client_id: if i == 0 { 100 } else { ids[i] },
                weights,
                n_k: rng.random_range(1..50),
            }
        })
        .collect()
}

fn bits(w: &ParamSet) -> Vec<u64> {
    w.iter()
        .flat_map(|(_, t)| t.data().iter().map(|v| v.to_bits()))
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn aggregate_is_a_convex_combination(seed in any::<u64>(), beta in 0.01f64..=1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let space = space_from(&mut rng);
        let w = init_supernet(&space, &mut rng);
        let updates = random_updates(&space, &w, &mut rng);
        for out in [
            aggregate_overlap(&w, &updates).unwrap(),
            aggregate_maxnet(&w, &updates, 100, beta).unwrap(),
        ] {
            for (name, t) in out.iter() {
                let cols = t.shape().last().copied().unwrap();
                let rank2 = t.shape().len() == 2;
                for (i, &v) in t.data().iter().enumerate() {
                    let (r, c) = if rank2 { (i / cols, i % cols) } else { (0, i) };
                    let vals: Vec<f64> = updates
                        .iter()
                        .filter(|u| owns(&space, u.arch(), name, r, c))
                        .map(|u| {
                            let sub = &u.weights.tensors[name];
                            let sub_cols = sub.shape().last().copied().unwrap();
                            sub.data()[if rank2 { r * sub_cols + c } else { c }]
                        })
                        .collect();
                    let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
                    let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let eps = 1e-12 * (1.0 + lo.abs().max(hi.abs()));
                    prop_assert!(!vals.is_empty(), "{name}[{i}] uncovered despite a largest holder");
                    prop_assert!(v >= lo - eps && v <= hi + eps, "{name}[{i}] = {v} outside [{lo}, {hi}]");
                }
            }
        }
    }

    #[test]
    fn aggregate_ignores_update_order(seed in any::<u64>(), beta in 0.01f64..=1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let space = space_from(&mut rng);
        let w = init_supernet(&space, &mut rng);
        let updates = random_updates(&space, &w, &mut rng);
        let mut shuffled = updates.clone();
        shuffled.shuffle(&mut rng);
        prop_assert_eq!(
            bits(&aggregate_overlap(&w, &updates).unwrap()),
            bits(&aggregate_overlap(&w, &shuffled).unwrap())
        );
        prop_assert_eq!(
            bits(&aggregate_maxnet(&w, &updates, 100, beta).unwrap()),
            bits(&aggregate_maxnet(&w, &shuffled, 100, beta).unwrap())
        );
    }

    #[test]
    fn maxnet_lambdas_sum_to_one(seed in any::<u64>(), beta in 0.01f64..=1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let space = space_from(&mut rng);
        let w = init_supernet(&space, &mut rng);
        let updates = random_updates(&space, &w, &mut rng);
        let l = maxnet_lambdas(&updates, 100, beta);
        prop_assert!((l.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(l.iter().all(|&x| x >= 0.0));
    }

    #[test]
    fn masks_nest_with_the_subarch_order(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let space = space_from(&mut rng);
        let a = random_arch(&space, &mut rng);
        let b = random_arch(&space, &mut rng);
        let (ma, mb) = (mask(&space, &a), mask(&space, &b));
        let subset = ma.iter().all(|(name, region)| {
            region.rows.clone().all(|r| region.cols.clone().all(|c| mb.contains(name, r, c)))
        });
        prop_assert_eq!(subset, is_subarch(&space, &a, &b).unwrap());
        let top = largest(&space);
        prop_assert!(is_subarch(&space, &a, &top).unwrap());
        prop_assert!(arch::param_count(&space, &a) <= arch::param_count(&space, &top));
        prop_assert!(arch::flops(&space, &a) <= arch::flops(&space, &top));
        prop_assert!(arch::flops(&space, &arch::smallest(&space)) <= arch::flops(&space, &a));
        prop_assert_eq!(ma.count(), arch::param_count(&space, &a));
    }

    #[test]
    fn extract_superimpose_round_trip(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let space = space_from(&mut rng);
        let w = init_supernet(&space, &mut rng);
        let a = random_arch(&space, &mut rng);
        let sub = extract(&w, &a).unwrap();
        prop_assert_eq!(bits(&superimpose(&w, &a, &sub).unwrap()), bits(&w));

        let other = init_supernet(&space, &mut rng);
        let placed = superimpose(&other, &a, &sub).unwrap();
        prop_assert_eq!(&extract(&placed, &a).unwrap(), &sub);
        // Indices outside the mask keep the base's values.
        let m = mask(&space, &a);
        for (name, t) in placed.iter() {
            let base = other.get(name).unwrap();
            let cols = t.shape().last().copied().unwrap();
            for (i, (&v, &b)) in t.data().iter().zip(base.data()).enumerate() {
                let (r, c) = if t.shape().len() == 2 { (i / cols, i % cols) } else { (0, i) };
                if !m.contains(name, r, c) {
                    prop_assert_eq!(v.to_bits(), b.to_bits());
                }
            }
        }
    }

    #[test]
    fn parse_format_round_trip(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let space = space_from(&mut rng);
        let mut a = random_arch(&space, &mut rng);
        a.canonicalize(&space);
        let text = arch::format(&space, &a);
        let mut back = arch::parse(&space, &text).unwrap();
        back.canonicalize(&space);
        prop_assert_eq!(back, a);
    }

    #[test]
    fn partitions_are_a_disjoint_cover(
        seed in any::<u64>(),
        clients in 1usize..12,
        classes in 2usize..6,
        alpha in prop_oneof![Just(0.01), Just(0.1), Just(1.0), Just(100.0)],
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = clients + rng.random_range(0..200);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
        let parts = dirichlet_partition(&labels, clients, alpha, &mut rng).unwrap();
        prop_assert_eq!(parts.len(), clients);
        let mut seen = vec![false; n];
        for (k, p) in parts.iter().enumerate() {
            prop_assert_eq!(p.client_id, k);
            prop_assert!(p.n_k() >= 1);
            for &i in &p.indices {
                prop_assert!(!seen[i], "index {} assigned twice", i);
                seen[i] = true;
            }
        }
        prop_assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn beta_decays_monotonically_within_bounds(
        beta0 in 0.05f64..=1.0,
        frac in 0.0f64..=1.0,
        decay_rounds in 1usize..300,
        kind in prop_oneof![Just(DecayKind::Linear), Just(DecayKind::Cosine), Just(DecayKind::Constant)],
    ) {
        let beta_end = (beta0 * frac).max(1e-3).min(beta0);
        let s = BetaSchedule { beta0, beta_end, decay_kind: kind, decay_rounds };
        let mut prev = f64::INFINITY;
        for t in 1..=decay_rounds + 5 {
            let b = beta_at(&s, t);
            prop_assert!(b <= prev, "β rose at t={}", t);
            prop_assert!(b >= beta_end.min(beta0) && b <= beta0);
            prev = b;
        }
        if kind == DecayKind::Constant {
            prop_assert_eq!(prev, beta0);
        } else {
            if decay_rounds > 1 {
                prop_assert_eq!(beta_at(&s, 1), beta0);
            }
            prop_assert_eq!(beta_at(&s, decay_rounds), beta_end);
            prop_assert_eq!(beta_at(&s, decay_rounds + 3), beta_end);
        }
    }

    #[test]
    fn every_plan_has_one_largest_holder(
        seed in any::<u64>(),
        heuristic in prop_oneof![
            Just(Heuristic::Random),
            Just(Heuristic::Sandwich),
            Just(Heuristic::TrackingSandwich),
            Just(Heuristic::Largest),
        ],
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let space = space_from(&mut rng);
        let clients = rng.random_range(1..10);
        let mut state = TrackingState::new(clients);
        for round in 1..6 {
            let m = rng.random_range(1..=clients);
            let mut participants: Vec<usize> = (0..clients).collect();
            participants.shuffle(&mut rng);
            participants.truncate(m);
            participants.sort_unstable();
            let plan = plan_round(heuristic, &space, round, &participants, &mut state, &mut rng);
            prop_assert_eq!(&plan.participants, &participants);
            prop_assert_eq!(plan.assignment.keys().copied().collect::<Vec<_>>(), participants.clone());
            prop_assert_eq!(plan.arch_of(plan.largest_holder), &largest(&space));
            for a in plan.assignment.values() {
                prop_assert!(a.check(&space).is_ok());
            }
        }
    }
}
