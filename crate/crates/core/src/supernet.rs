//! Supernetwork weights and the elastic residual MLP they parameterize.
//!
//! The network is
//!
//! ```text
//! h0  = relu(x · stem.w + stem.b)
//! h  <- h + relu(h · w1[:, :m] + b1[:m]) · w2[:m, :] + b2     (active blocks)
//! out = h · head.w + head.b
//! ```
//!
//! and has no normalization layers.

use std::collections::BTreeMap;

use ndarray::{s, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::arch::{mask, ArchDescriptor, SpaceConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Full supernet weights `W`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    space: SpaceConfig,
    tensors: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn zeros(space: &SpaceConfig) -> Self {
        let tensors = space
            .tensor_shapes()
            .into_iter()
            .map(|(name, shape)| (name, Tensor::zeros(&shape)))
            .collect();
        ParamSet {
            space: space.clone(),
            tensors,
        }
    }

    /// Assembles a param set, checking the name set and shapes against `space`.
    pub fn from_tensors(space: &SpaceConfig, tensors: BTreeMap<String, Tensor>) -> Result<Self> {
        let shapes = space.tensor_shapes();
        if shapes.len() != tensors.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                shapes.len(),
                tensors.len()
            )));
        }
        for (name, shape) in shapes {
            let t = tensors
                .get(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    name,
                    expected: shape,
                    found: t.shape().to_vec(),
                });
            }
        }
        Ok(ParamSet {
            space: space.clone(),
            tensors,
        })
    }

    pub fn space(&self) -> &SpaceConfig {
        &self.space
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn num_params(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    fn tensor(&self, name: &str) -> &Tensor {
        &self.tensors[name]
    }
}

/// Weights of one subnetwork, `w = G(W, arch)`: one tensor per owned slice,
/// shaped to that slice.
#[derive(Debug, Clone, PartialEq)]
pub struct SubnetWeights {
    pub arch: ArchDescriptor,
    pub tensors: BTreeMap<String, Tensor>,
}

impl SubnetWeights {
    pub fn is_finite(&self) -> bool {
        self.tensors.values().all(Tensor::is_finite)
    }

    pub fn num_params(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    /// Same names and shapes, every entry `value`.
    pub fn filled_like(&self, value: f64) -> SubnetWeights {
        SubnetWeights {
            arch: self.arch.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(k, t)| (k.clone(), Tensor::filled(t.shape(), value)))
                .collect(),
        }
    }
}

/// Zero biases; normal matrices with `sd = gain / sqrt(fan_in)` (fan-in =
/// rows). Gains: `sqrt(2)` for the stem, 1 for the head, and
/// `sqrt(2 / max_blocks)` for both layers of every block. Shrinking both
/// layers keeps the residual stream bounded at any depth and also keeps the
/// summed per-step change of all branches O(1); with plain He gains a
/// 16-block supernet diverges in the first round at any usable rate.
pub fn init_supernet<R: Rng + ?Sized>(space: &SpaceConfig, rng: &mut R) -> ParamSet {
    let mut w = ParamSet::zeros(space);
    let blocks = space.max_blocks().max(1) as f64;
    for (name, t) in w.tensors.iter_mut() {
        if let [fan_in, _] = *t.shape() {
            let gain2 = if name == "head.w" {
                1.0
            } else if name.ends_with(".w1") || name.ends_with(".w2") {
                2.0 / blocks
            } else {
                2.0
            };
            let normal = Normal::new(0.0, (gain2 / fan_in as f64).sqrt()).expect("positive sd");
            for v in t.data_mut() {
                *v = normal.sample(rng);
            }
        }
    }
    w
}

/// `G(W, arch)`: copies the masked slices of `w` into a standalone weight set.
pub fn extract(w: &ParamSet, arch: &ArchDescriptor) -> Result<SubnetWeights> {
    arch.check(&w.space)?;
    let m = mask(&w.space, arch);
    let tensors = m
        .iter()
        .map(|(name, region)| {
            let full = w.tensor(name);
            let view = full.view2();
            let slice = view.slice(s![region.rows.clone(), region.cols.clone()]);
            let data: Vec<f64> = slice.iter().copied().collect();
            let shape = region.extract_shape(full.shape().len());
            (name.to_string(), Tensor::from_vec(&shape, data))
        })
        .collect();
    Ok(SubnetWeights {
        arch: arch.clone(),
        tensors,
    })
}

/// `M(W0, arch, w)`: `base` with the slices of `arch` overwritten by `sub`.
pub fn superimpose(
    base: &ParamSet,
    arch: &ArchDescriptor,
    sub: &SubnetWeights,
) -> Result<ParamSet> {
    let mut out = base.clone();
    superimpose_in_place(&mut out, arch, sub)?;
    Ok(out)
}

pub fn superimpose_in_place(
    target: &mut ParamSet,
    arch: &ArchDescriptor,
    sub: &SubnetWeights,
) -> Result<()> {
    if &sub.arch != arch {
        return Err(Error::DescriptorMismatch(
            "subnet weights belong to a different architecture".into(),
        ));
    }
    arch.check(&target.space)?;
    let m = mask(&target.space, arch);
    for (name, region) in m.iter() {
        let src = sub.tensors.get(name).ok_or_else(|| {
            Error::DescriptorMismatch(format!("subnet weights lack tensor `{name}`"))
        })?;
        let dst = target
            .tensors
            .get_mut(name)
            .expect("mask names are supernet names");
        let expected = region.extract_shape(dst.shape().len());
        if src.shape() != expected.as_slice() {
            return Err(Error::ShapeMismatch {
                name: name.to_string(),
                expected,
                found: src.shape().to_vec(),
            });
        }
        dst.view2_mut()
            .slice_mut(s![region.rows.clone(), region.cols.clone()])
            .assign(&src.view2());
    }
    Ok(())
}

struct BlockView<'a> {
    prefix: String,
    w1: ArrayView2<'a, f64>,
    b1: ArrayView1<'a, f64>,
    w2: ArrayView2<'a, f64>,
    b2: ArrayView1<'a, f64>,
}

/// Borrowed weights of one concrete dense network.
struct NetView<'a> {
    stem_w: ArrayView2<'a, f64>,
    stem_b: ArrayView1<'a, f64>,
    blocks: Vec<BlockView<'a>>,
    head_w: ArrayView2<'a, f64>,
    head_b: ArrayView1<'a, f64>,
}

impl<'a> NetView<'a> {
    /// Views into the supernet restricted to `arch`, without copying.
    fn restricted(w: &'a ParamSet, arch: &ArchDescriptor) -> Self {
        let space = &w.space;
        let blocks = arch
            .active_blocks(space)
            .map(|b| {
                let prefix = space.block_prefix(b);
                let m = space.mid_width(arch.ratios[b]);
                let t = |suffix: &str| w.tensor(&format!("{prefix}.{suffix}"));
                BlockView {
                    w1: t("w1").view2().slice_move(s![.., ..m]),
                    b1: t("b1").view1().slice_move(s![..m]),
                    w2: t("w2").view2().slice_move(s![..m, ..]),
                    b2: t("b2").view1(),
                    prefix,
                }
            })
            .collect();
        NetView {
            stem_w: w.tensor("stem.w").view2(),
            stem_b: w.tensor("stem.b").view1(),
            blocks,
            head_w: w.tensor("head.w").view2(),
            head_b: w.tensor("head.b").view1(),
        }
    }

    fn standalone(space: &SpaceConfig, sub: &'a SubnetWeights) -> Self {
        let t = |name: &str| &sub.tensors[name];
        let blocks = sub
            .arch
            .active_blocks(space)
            .map(|b| {
                let prefix = space.block_prefix(b);
                let get = |suffix: &str| t(&format!("{prefix}.{suffix}"));
                BlockView {
                    w1: get("w1").view2(),
                    b1: get("b1").view1(),
                    w2: get("w2").view2(),
                    b2: get("b2").view1(),
                    prefix,
                }
            })
            .collect();
        NetView {
            stem_w: t("stem.w").view2(),
            stem_b: t("stem.b").view1(),
            blocks,
            head_w: t("head.w").view2(),
            head_b: t("head.b").view1(),
        }
    }

    fn forward(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        self.forward_cached(x).0
    }

    fn forward_cached(&self, x: ArrayView2<'_, f64>) -> (Array2<f64>, Cache) {
        let z0 = x.dot(&self.stem_w) + self.stem_b;
        let mut h = z0.mapv(relu);
        let mut block_inputs = Vec::with_capacity(self.blocks.len());
        let mut pre_acts = Vec::with_capacity(self.blocks.len());
        for blk in &self.blocks {
            let z = h.dot(&blk.w1) + blk.b1;
            let a = z.mapv(relu);
            let next = &h + &a.dot(&blk.w2) + blk.b2;
            block_inputs.push(h);
            pre_acts.push(z);
            h = next;
        }
        let logits = h.dot(&self.head_w) + self.head_b;
        (
            logits,
            Cache {
                z0,
                block_inputs,
                pre_acts,
                last_hidden: h,
            },
        )
    }
}

struct Cache {
    z0: Array2<f64>,
    block_inputs: Vec<Array2<f64>>,
    pre_acts: Vec<Array2<f64>>,
    last_hidden: Array2<f64>,
}

fn relu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        0.0
    }
}

fn check_batch(space: &SpaceConfig, batch: ArrayView2<'_, f64>) -> Result<()> {
    if batch.ncols() != space.input_dim {
        return Err(Error::ShapeMismatch {
            name: "batch".into(),
            expected: vec![batch.nrows(), space.input_dim],
            found: batch.shape().to_vec(),
        });
    }
    if batch.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("input batch".into()));
    }
    Ok(())
}

/// Logits of the supernet restricted to `arch`.
pub fn forward(
    w: &ParamSet,
    arch: &ArchDescriptor,
    batch: ArrayView2<'_, f64>,
) -> Result<Array2<f64>> {
    arch.check(&w.space)?;
    check_batch(&w.space, batch)?;
    Ok(NetView::restricted(w, arch).forward(batch))
}

/// Logits of a standalone extracted subnetwork.
pub fn forward_subnet(
    space: &SpaceConfig,
    sub: &SubnetWeights,
    batch: ArrayView2<'_, f64>,
) -> Result<Array2<f64>> {
    check_batch(space, batch)?;
    Ok(NetView::standalone(space, sub).forward(batch))
}

/// Mean softmax cross-entropy and its gradient for the supernet restricted to
/// `arch`. The gradient only has entries for `arch`'s slices.
pub fn loss_and_grad(
    w: &ParamSet,
    arch: &ArchDescriptor,
    batch: ArrayView2<'_, f64>,
    labels: &[usize],
) -> Result<(f64, SubnetWeights)> {
    arch.check(&w.space)?;
    check_batch(&w.space, batch)?;
    let net = NetView::restricted(w, arch);
    backprop(&w.space, arch, &net, batch, labels)
}

pub fn subnet_loss_and_grad(
    space: &SpaceConfig,
    sub: &SubnetWeights,
    batch: ArrayView2<'_, f64>,
    labels: &[usize],
) -> Result<(f64, SubnetWeights)> {
    check_batch(space, batch)?;
    let net = NetView::standalone(space, sub);
    backprop(space, &sub.arch, &net, batch, labels)
}

/// Mean softmax cross-entropy of `logits` against `labels`, with
/// `d loss / d logits`.
pub fn softmax_cross_entropy(logits: &Array2<f64>, labels: &[usize]) -> Result<(f64, Array2<f64>)> {
    let classes = logits.ncols();
    if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::LabelOutOfRange { label, classes });
    }
    assert_eq!(labels.len(), logits.nrows(), "one label per row");
    let n = logits.nrows();
    if n == 0 {
        return Ok((0.0, Array2::zeros((0, classes))));
    }
    let mut grad = Array2::zeros(logits.raw_dim());
    let mut loss = 0.0;
    for (i, row) in logits.axis_iter(Axis(0)).enumerate() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let sum: f64 = row.iter().map(|&v| (v - max).exp()).sum();
        let log_z = max + sum.ln();
        loss += log_z - row[labels[i]];
        for (c, &v) in row.iter().enumerate() {
            grad[[i, c]] = (v - log_z).exp();
        }
        grad[[i, labels[i]]] -= 1.0;
    }
    let inv_n = 1.0 / n as f64;
    grad.mapv_inplace(|g| g * inv_n);
    Ok((loss * inv_n, grad))
}

fn backprop(
    space: &SpaceConfig,
    arch: &ArchDescriptor,
    net: &NetView<'_>,
    x: ArrayView2<'_, f64>,
    labels: &[usize],
) -> Result<(f64, SubnetWeights)> {
    if labels.len() != x.nrows() {
        return Err(Error::Data(format!(
            "{} labels for {} rows",
            labels.len(),
            x.nrows()
        )));
    }
    let (logits, cache) = net.forward_cached(x);
    let (loss, dlogits) = softmax_cross_entropy(&logits, labels)?;
    let mut grads = BTreeMap::new();

    grads.insert(
        "head.w".to_string(),
        Tensor::from_array2(cache.last_hidden.t().dot(&dlogits)),
    );
    grads.insert(
        "head.b".to_string(),
        Tensor::from_array1(dlogits.sum_axis(Axis(0))),
    );
    let mut dh = dlogits.dot(&net.head_w.t());

    for (k, blk) in net.blocks.iter().enumerate().rev() {
        let h_in = &cache.block_inputs[k];
        let z = &cache.pre_acts[k];
        let a = z.mapv(relu);
        let dw2 = a.t().dot(&dh);
        let db2 = dh.sum_axis(Axis(0));
        let mut dz = dh.dot(&blk.w2.t());
        ndarray::Zip::from(&mut dz).and(z).for_each(|g, &zv| {
            if zv <= 0.0 {
                *g = 0.0;
            }
        });
        let dw1 = h_in.t().dot(&dz);
        let db1 = dz.sum_axis(Axis(0));
        dh = dh + dz.dot(&blk.w1.t());
        let p = &blk.prefix;
        grads.insert(format!("{p}.w1"), Tensor::from_array2(dw1));
        grads.insert(format!("{p}.b1"), Tensor::from_array1(db1));
        grads.insert(format!("{p}.w2"), Tensor::from_array2(dw2));
        grads.insert(format!("{p}.b2"), Tensor::from_array1(db2));
    }

    let mut dz0 = dh;
    ndarray::Zip::from(&mut dz0)
        .and(&cache.z0)
        .for_each(|g, &zv| {
            if zv <= 0.0 {
                *g = 0.0;
            }
        });
    grads.insert("stem.w".to_string(), Tensor::from_array2(x.t().dot(&dz0)));
    grads.insert(
        "stem.b".to_string(),
        Tensor::from_array1(dz0.sum_axis(Axis(0))),
    );

    debug_assert_eq!(grads.len(), mask(space, arch).iter().count());
    Ok((
        loss,
        SubnetWeights {
            arch: arch.clone(),
            tensors: grads,
        },
    ))
}

/// Row-wise argmax, ties going to the lowest class id.
pub fn argmax_rows(logits: &Array2<f64>) -> Vec<usize> {
    logits
        .axis_iter(Axis(0))
        .map(|row| {
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}
