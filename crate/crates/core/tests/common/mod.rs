//! Reference implementations written independently of the library's
//! aggregation and coverage code, used as oracles by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeMap;

use ndarray::Array2;
use superfed_core::arch::{ArchDescriptor, SpaceConfig};
use superfed_core::supernet::ParamSet;
use superfed_core::tensor::Tensor;
use superfed_core::ClientUpdate;

/// Whether `arch` owns element `(r, c)` of tensor `name`, derived directly
/// from the naming scheme and prefix-width rule rather than from `mask`.
pub fn owns(space: &SpaceConfig, arch: &ArchDescriptor, name: &str, r: usize, c: usize) -> bool {
    if name.starts_with("stem.") || name.starts_with("head.") {
        return true;
    }
    // s{stage}.b{index}.{param}
    let mut it = name.split('.');
    let stage: usize = it.next().unwrap()[1..].parse().unwrap();
    let idx: usize = it.next().unwrap()[1..].parse().unwrap();
    let param = it.next().unwrap();
    if idx >= space.base_depth + arch.depths[stage] {
        return false;
    }
    let block = stage * (space.base_depth + space.max_extra_depth) + idx;
    let ratio = space.ratio_choices[arch.ratios[block]];
    let m = (ratio * space.max_mid_width as f64).round() as usize;
    match param {
        "w1" | "b1" => c < m,
        "w2" => r < m,
        "b2" => true,
        other => panic!("unknown parameter {other}"),
    }
}

fn rows_cols(t: &Tensor) -> (usize, usize) {
    match t.shape() {
        [n] => (1, *n),
        [r, c] => (*r, *c),
        s => panic!("rank {}", s.len()),
    }
}

/// `Σ λ_k n_k w_k / Σ λ_k n_k` over the clients owning each index; indices
/// nobody owns keep `w_t`'s value.
pub fn brute_force_average(
    space: &SpaceConfig,
    w_t: &ParamSet,
    updates: &[ClientUpdate],
    lambdas: &[f64],
) -> BTreeMap<String, Vec<f64>> {
    let mut out = BTreeMap::new();
    for (name, base) in w_t.iter() {
        let (rows, cols) = rows_cols(base);
        let mut v = base.data().to_vec();
        for r in 0..rows {
            for c in 0..cols {
                let mut num = 0.0;
                let mut den = 0.0;
                for (u, &l) in updates.iter().zip(lambdas) {
                    if !owns(space, u.arch(), name, r, c) {
                        continue;
                    }
                    let t = &u.weights.tensors[name];
                    let (_, sub_cols) = rows_cols(t);
                    let wgt = l * u.n_k as f64;
                    num += wgt * t.data()[r * sub_cols + c];
                    den += wgt;
                }
                if den > 0.0 {
                    v[r * cols + c] = num / den;
                }
            }
        }
        out.insert(name.to_string(), v);
    }
    out
}

pub fn max_abs_diff(a: &ParamSet, b: &BTreeMap<String, Vec<f64>>) -> f64 {
    a.iter()
        .flat_map(|(name, t)| {
            t.data()
                .iter()
                .zip(&b[name])
                .map(|(x, y)| (x - y).abs())
                .collect::<Vec<_>>()
        })
        .fold(0.0, f64::max)
}

pub fn max_param_diff(a: &ParamSet, b: &ParamSet) -> f64 {
    a.iter()
        .map(|(name, t)| {
            t.data()
                .iter()
                .zip(b.get(name).unwrap().data())
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max)
        })
        .fold(0.0, f64::max)
}

/// Mean softmax cross-entropy computed straight from logits.
pub fn cross_entropy(logits: &Array2<f64>, labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for (row, &y) in logits.rows().into_iter().zip(labels) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - row[y];
    }
    total / labels.len() as f64
}

/// A small space whose shape is drawn from `pick`, used for randomized
/// oracle comparisons.
pub fn random_space(pick: &mut impl FnMut(usize) -> usize) -> SpaceConfig {
    let ratio_sets: [&[f64]; 3] = [&[0.5, 1.0], &[0.25, 0.5, 1.0], &[0.34, 0.67, 1.0]];
    SpaceConfig {
        stages: 1 + pick(3),
        base_depth: pick(2),
        max_extra_depth: 1 + pick(2),
        ratio_choices: ratio_sets[pick(3)].to_vec(),
        hidden_width: 2 + pick(4),
        max_mid_width: 3 + pick(4),
        input_dim: 1 + pick(4),
        num_classes: 2 + pick(3),
    }
}
