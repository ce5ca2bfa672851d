//! Simulated client: local mini-batch SGD on an assigned subnetwork, and
//! accuracy evaluation.

use ndarray::Axis;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::arch::{ArchDescriptor, SpaceConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::supernet::{argmax_rows, forward, subnet_loss_and_grad, ParamSet, SubnetWeights};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LocalTrainConfig {
    pub local_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for LocalTrainConfig {
    fn default() -> Self {
        LocalTrainConfig {
            local_epochs: 5,
            batch_size: 32,
            learning_rate: 0.03,
        }
    }
}

impl LocalTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.local_epochs == 0 {
            return Err(Error::config("train.local_epochs", "must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be >= 1"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(
                "train.learning_rate",
                "must be finite and >= 0",
            ));
        }
        Ok(())
    }

    /// SGD steps taken on a partition of `n` samples.
    pub fn steps(&self, n: usize) -> usize {
        self.local_epochs * n.div_ceil(self.batch_size)
    }
}

/// Runs `local_epochs` epochs of plain SGD over `indices` (rows of
/// `data`), reshuffling each epoch. The last partial batch is kept. Fails on
/// a non-finite loss or weight.
pub fn client_update<R: Rng + ?Sized>(
    space: &SpaceConfig,
    indices: &[usize],
    data: &Dataset,
    w: &SubnetWeights,
    cfg: &LocalTrainConfig,
    rng: &mut R,
) -> Result<SubnetWeights> {
    if indices.is_empty() {
        return Err(Error::Data("client partition is empty".into()));
    }
    let mut weights = w.clone();
    let mut order = indices.to_vec();
    let mut step = 0usize;
    for _ in 0..cfg.local_epochs {
        order.shuffle(rng);
        for chunk in order.chunks(cfg.batch_size) {
            let x = data.features.select(Axis(0), chunk);
            let y: Vec<usize> = chunk.iter().map(|&i| data.labels[i]).collect();
            let (loss, grad) = subnet_loss_and_grad(space, &weights, x.view(), &y)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("loss at local step {step}")));
            }
            if cfg.learning_rate != 0.0 {
                for (name, t) in weights.tensors.iter_mut() {
                    let g = grad.tensors[name].data();
                    for (v, gv) in t.data_mut().iter_mut().zip(g) {
                        *v -= cfg.learning_rate * gv;
                    }
                }
            }
            step += 1;
        }
    }
    if !weights.is_finite() {
        return Err(Error::NonFinite("weights after local training".into()));
    }
    Ok(weights)
}

/// Top-1 accuracy of the supernet restricted to `arch`; argmax ties go to the
/// lowest class id.
pub fn evaluate(w: &ParamSet, arch: &ArchDescriptor, test: &Dataset) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::Data("evaluation set is empty".into()));
    }
    let logits = forward(w, arch, test.features.view())?;
    let correct = argmax_rows(&logits)
        .iter()
        .zip(&test.labels)
        .filter(|(p, y)| p == y)
        .count();
    Ok(correct as f64 / test.len() as f64)
}
