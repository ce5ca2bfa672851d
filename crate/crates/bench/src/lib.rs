//! Fixtures shared by the criterion benches: a default-space supernet and a
//! round's worth of client updates, all seeded.

use superfed_core::arch::{largest, random_arch};
use superfed_core::data::{synth_blobs, Dataset, Split};
use superfed_core::seed::rng_from;
use superfed_core::supernet::{extract, init_supernet};
use superfed_core::{ClientUpdate, ParamSet, SpaceConfig};

pub fn supernet(space: &SpaceConfig, seed: u64) -> ParamSet {
    init_supernet(space, &mut rng_from(seed, &[1]))
}

/// `clients` updates; client 0 holds the largest subnetwork, the rest random
/// ones. Weights are the untouched slices of `w`, which is all aggregation
/// cost depends on.
pub fn updates(space: &SpaceConfig, w: &ParamSet, clients: usize, seed: u64) -> Vec<ClientUpdate> {
    let mut rng = rng_from(seed, &[2]);
    (0..clients)
        .map(|k| {
            let arch = if k == 0 {
                largest(space)
            } else {
                random_arch(space, &mut rng)
            };
            ClientUpdate {
                client_id: k,
                weights: extract(w, &arch).expect("arch fits space"),
                n_k: 40,
            }
        })
        .collect()
}

pub fn train_split(space: &SpaceConfig, per_class: usize, seed: u64) -> Dataset {
    synth_blobs(
        space.num_classes,
        space.input_dim,
        per_class,
        0.5,
        &mut rng_from(seed, &[5]),
    )
    .expect("valid blobs")
    .subset(Split::Train)
}
