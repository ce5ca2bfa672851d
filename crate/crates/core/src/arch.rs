//! Elastic architecture space: descriptors, nesting, slice masks and cost
//! counts for the residual MLP family.
//!
//! A space has `stages` stages of `base_depth + max_extra_depth` residual
//! blocks each. A descriptor picks an extra depth per stage (the first
//! `base_depth + d` blocks of the stage run, the rest are identity) and an
//! expand-ratio index per block (the block's middle width is the first
//! `round(ratio * max_mid_width)` units).

use std::collections::BTreeMap;
use std::fmt;
use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const RATIO_MATCH_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpaceConfig {
    pub stages: usize,
    pub base_depth: usize,
    pub max_extra_depth: usize,
    pub ratio_choices: Vec<f64>,
    pub hidden_width: usize,
    pub max_mid_width: usize,
    pub input_dim: usize,
    pub num_classes: usize,
}

impl Default for SpaceConfig {
    fn default() -> Self {
        SpaceConfig {
            stages: 4,
            base_depth: 2,
            max_extra_depth: 2,
            ratio_choices: vec![0.25, 0.5, 0.75, 1.0],
            hidden_width: 64,
            max_mid_width: 64,
            input_dim: 32,
            num_classes: 10,
        }
    }
}

impl SpaceConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidSpace(msg));
        if self.stages == 0 {
            return bad("stages must be >= 1".into());
        }
        if self.hidden_width == 0 || self.max_mid_width == 0 {
            return bad("hidden_width and max_mid_width must be >= 1".into());
        }
        if self.input_dim == 0 || self.num_classes == 0 {
            return bad("input_dim and num_classes must be >= 1".into());
        }
        let r = &self.ratio_choices;
        if r.is_empty() {
            return bad("ratio_choices is empty".into());
        }
        if r.iter().any(|&x| !(x > 0.0 && x <= 1.0)) {
            return bad("ratio_choices must lie in (0, 1]".into());
        }
        if r.windows(2).any(|w| w[0] >= w[1]) {
            return bad("ratio_choices must be strictly increasing".into());
        }
        if *r.last().unwrap() != 1.0 {
            return bad("last ratio choice must be 1.0".into());
        }
        if self.mid_width(0) == 0 {
            return bad(format!(
                "smallest ratio {} yields zero middle units at max_mid_width {}",
                r[0], self.max_mid_width
            ));
        }
        Ok(())
    }

    pub fn blocks_per_stage(&self) -> usize {
        self.base_depth + self.max_extra_depth
    }

    pub fn max_blocks(&self) -> usize {
        self.stages * self.blocks_per_stage()
    }

    /// Middle width of a block running at ratio index `ratio_idx`.
    pub fn mid_width(&self, ratio_idx: usize) -> usize {
        (self.ratio_choices[ratio_idx] * self.max_mid_width as f64).round() as usize
    }

    /// `(stage, block-in-stage)` for a flat block index.
    pub fn block_position(&self, block: usize) -> (usize, usize) {
        (
            block / self.blocks_per_stage(),
            block % self.blocks_per_stage(),
        )
    }

    pub fn block_prefix(&self, block: usize) -> String {
        let (s, i) = self.block_position(block);
        format!("s{s}.b{i}")
    }

    /// Every supernet tensor with its full shape, in network order.
    pub fn tensor_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (h, m) = (self.hidden_width, self.max_mid_width);
        let mut out = vec![
            ("stem.w".to_string(), vec![self.input_dim, h]),
            ("stem.b".to_string(), vec![h]),
        ];
        for b in 0..self.max_blocks() {
            let p = self.block_prefix(b);
            out.push((format!("{p}.w1"), vec![h, m]));
            out.push((format!("{p}.b1"), vec![m]));
            out.push((format!("{p}.w2"), vec![m, h]));
            out.push((format!("{p}.b2"), vec![h]));
        }
        out.push(("head.w".to_string(), vec![h, self.num_classes]));
        out.push(("head.b".to_string(), vec![self.num_classes]));
        out
    }

    pub fn total_params(&self) -> usize {
        self.tensor_shapes()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

/// One member of the family: extra depth per stage plus a ratio index per
/// block. Kept canonical: ratio indices of inactive blocks are zero.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ArchDescriptor {
    pub depths: Vec<usize>,
    pub ratios: Vec<usize>,
}

impl ArchDescriptor {
    /// Builds a canonical descriptor after checking it against `space`.
    pub fn new(space: &SpaceConfig, depths: Vec<usize>, ratios: Vec<usize>) -> Result<Self> {
        let mut a = ArchDescriptor { depths, ratios };
        a.check(space)?;
        a.canonicalize(space);
        Ok(a)
    }

    pub fn check(&self, space: &SpaceConfig) -> Result<()> {
        if self.depths.len() != space.stages {
            return Err(Error::DescriptorMismatch(format!(
                "{} depth entries for {} stages",
                self.depths.len(),
                space.stages
            )));
        }
        if self.ratios.len() != space.max_blocks() {
            return Err(Error::DescriptorMismatch(format!(
                "{} ratio entries for {} blocks",
                self.ratios.len(),
                space.max_blocks()
            )));
        }
        if let Some(d) = self.depths.iter().find(|&&d| d > space.max_extra_depth) {
            return Err(Error::DescriptorMismatch(format!(
                "depth {d} exceeds max_extra_depth {}",
                space.max_extra_depth
            )));
        }
        if let Some(r) = self
            .ratios
            .iter()
            .find(|&&r| r >= space.ratio_choices.len())
        {
            return Err(Error::DescriptorMismatch(format!(
                "ratio index {r} out of range for {} choices",
                space.ratio_choices.len()
            )));
        }
        Ok(())
    }

    pub fn canonicalize(&mut self, space: &SpaceConfig) {
        for b in 0..self.ratios.len() {
            if !self.is_active(space, b) {
                self.ratios[b] = 0;
            }
        }
    }

    pub fn is_active(&self, space: &SpaceConfig, block: usize) -> bool {
        let (s, i) = space.block_position(block);
        i < space.base_depth + self.depths[s]
    }

    pub fn active_blocks<'a>(&'a self, space: &'a SpaceConfig) -> impl Iterator<Item = usize> + 'a {
        (0..space.max_blocks()).filter(move |&b| self.is_active(space, b))
    }

    pub fn display<'a>(&'a self, space: &'a SpaceConfig) -> ArchDisplay<'a> {
        ArchDisplay { arch: self, space }
    }
}

pub struct ArchDisplay<'a> {
    arch: &'a ArchDescriptor,
    space: &'a SpaceConfig,
}

impl fmt::Display for ArchDisplay<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("d:[")?;
        for (i, d) in self.arch.depths.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{d}")?;
        }
        f.write_str("]-e:[")?;
        for (i, &r) in self.arch.ratios.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{:?}", self.space.ratio_choices[r])?;
        }
        f.write_str("]")
    }
}

/// Canonical family size: the sum over depth tuples of
/// `|ratio_choices|^(active blocks)`. Counting over every block position
/// instead would over-count descriptors that differ only in ignored
/// inactive-block ratios. Saturates at `u128::MAX`.
pub fn family_size(space: &SpaceConfig) -> u128 {
    let r = space.ratio_choices.len() as u128;
    // The sum factorizes over stages.
    let per_stage = (0..=space.max_extra_depth).try_fold(0u128, |acc, d| {
        r.checked_pow((space.base_depth + d) as u32)
            .and_then(|p| acc.checked_add(p))
    });
    per_stage
        .and_then(|p| p.checked_pow(space.stages as u32))
        .unwrap_or(u128::MAX)
}

pub fn smallest(space: &SpaceConfig) -> ArchDescriptor {
    ArchDescriptor {
        depths: vec![0; space.stages],
        ratios: vec![0; space.max_blocks()],
    }
}

pub fn largest(space: &SpaceConfig) -> ArchDescriptor {
    ArchDescriptor {
        depths: vec![space.max_extra_depth; space.stages],
        ratios: vec![space.ratio_choices.len() - 1; space.max_blocks()],
    }
}

pub fn is_subarch(space: &SpaceConfig, a: &ArchDescriptor, b: &ArchDescriptor) -> Result<bool> {
    a.check(space)?;
    b.check(space)?;
    if a.depths.iter().zip(&b.depths).any(|(x, y)| x > y) {
        return Ok(false);
    }
    Ok(a.active_blocks(space)
        .all(|blk| a.ratios[blk] <= b.ratios[blk]))
}

/// Rectangle `rows × cols` inside a tensor. Vectors use `rows = 0..1`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Region {
    pub rows: Range<usize>,
    pub cols: Range<usize>,
}

impl Region {
    pub fn len(&self) -> usize {
        self.rows.len() * self.cols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, r: usize, c: usize) -> bool {
        self.rows.contains(&r) && self.cols.contains(&c)
    }

    /// Shape of the extracted slice, matching the rank of the full tensor.
    pub fn extract_shape(&self, full_rank: usize) -> Vec<usize> {
        if full_rank == 1 {
            vec![self.cols.len()]
        } else {
            vec![self.rows.len(), self.cols.len()]
        }
    }
}

/// The slice of each supernet tensor owned by a subnetwork. Tensors of
/// inactive blocks are absent. Prefix selection means every owned slice is a
/// single rectangle anchored at the origin.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SliceMask {
    regions: BTreeMap<String, Region>,
}

impl SliceMask {
    pub fn region(&self, name: &str) -> Option<&Region> {
        self.regions.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Region)> {
        self.regions.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn contains(&self, name: &str, r: usize, c: usize) -> bool {
        self.regions.get(name).is_some_and(|reg| reg.contains(r, c))
    }

    pub fn count(&self) -> usize {
        self.regions.values().map(Region::len).sum()
    }
}

pub fn mask(space: &SpaceConfig, arch: &ArchDescriptor) -> SliceMask {
    let (h, c, d) = (space.hidden_width, space.num_classes, space.input_dim);
    let full = |rows: usize, cols: usize| Region {
        rows: 0..rows,
        cols: 0..cols,
    };
    let mut regions = BTreeMap::new();
    regions.insert("stem.w".into(), full(d, h));
    regions.insert("stem.b".into(), full(1, h));
    for b in arch.active_blocks(space) {
        let p = space.block_prefix(b);
        let m = space.mid_width(arch.ratios[b]);
        regions.insert(format!("{p}.w1"), full(h, m));
        regions.insert(format!("{p}.b1"), full(1, m));
        regions.insert(format!("{p}.w2"), full(m, h));
        regions.insert(format!("{p}.b2"), full(1, h));
    }
    regions.insert("head.w".into(), full(h, c));
    regions.insert("head.b".into(), full(1, c));
    SliceMask { regions }
}

pub fn param_count(space: &SpaceConfig, arch: &ArchDescriptor) -> usize {
    let h = space.hidden_width;
    let blocks: usize = arch
        .active_blocks(space)
        .map(|b| 2 * h * space.mid_width(arch.ratios[b]) + space.mid_width(arch.ratios[b]) + h)
        .sum();
    space.input_dim * h + h + blocks + h * space.num_classes + space.num_classes
}

/// Forward FLOPs per sample, counting each multiply-accumulate as 2 FLOPs.
/// Biases and activations are not counted. A block of middle width `m`
/// costs `2 · (H·m + m·H)`.
pub fn flops(space: &SpaceConfig, arch: &ArchDescriptor) -> u64 {
    let h = space.hidden_width as u64;
    let stem = space.input_dim as u64 * h;
    let head = h * space.num_classes as u64;
    let blocks: u64 = arch
        .active_blocks(space)
        .map(|b| 2 * h * space.mid_width(arch.ratios[b]) as u64)
        .sum();
    2 * (stem + head + blocks)
}

/// Samples every depth and every ratio index uniformly and independently,
/// then canonicalizes.
pub fn random_arch<R: Rng + ?Sized>(space: &SpaceConfig, rng: &mut R) -> ArchDescriptor {
    let depths = (0..space.stages)
        .map(|_| rng.random_range(0..=space.max_extra_depth))
        .collect();
    let ratios = (0..space.max_blocks())
        .map(|_| rng.random_range(0..space.ratio_choices.len()))
        .collect();
    let mut a = ArchDescriptor { depths, ratios };
    a.canonicalize(space);
    a
}

/// All canonical descriptors of a space, or an error if the family exceeds
/// `limit` members.
pub fn enumerate_family(space: &SpaceConfig, limit: usize) -> Result<Vec<ArchDescriptor>> {
    let size = family_size(space);
    if size > limit as u128 {
        return Err(Error::InvalidSpace(format!(
            "family of {size} members exceeds enumeration limit {limit}"
        )));
    }
    let mut out = Vec::with_capacity(size as usize);
    let mut depths = vec![0usize; space.stages];
    loop {
        let base = ArchDescriptor {
            depths: depths.clone(),
            ratios: vec![0; space.max_blocks()],
        };
        let active: Vec<usize> = base.active_blocks(space).collect();
        let mut idx = vec![0usize; active.len()];
        loop {
            let mut a = base.clone();
            for (k, &b) in active.iter().enumerate() {
                a.ratios[b] = idx[k];
            }
            out.push(a);
            if !odometer(&mut idx, space.ratio_choices.len() - 1) {
                break;
            }
        }
        if !odometer(&mut depths, space.max_extra_depth) {
            break;
        }
    }
    Ok(out)
}

fn odometer(digits: &mut [usize], max: usize) -> bool {
    for d in digits.iter_mut().rev() {
        if *d < max {
            *d += 1;
            return true;
        }
        *d = 0;
    }
    false
}

/// Parses `d:[..]-e:[..]`. Ratio entries are fractions from the space's
/// `ratio_choices`; `v×n` (or `vxn`) repeats `v` `n` times. The result is
/// canonicalized.
pub fn parse(space: &SpaceConfig, text: &str) -> Result<ArchDescriptor> {
    let mut p = Parser { s: text, pos: 0 };
    p.expect("d:[")?;
    let mut depths = Vec::new();
    p.list(|p| {
        let (v, at) = p.number()?;
        let d = v
            .parse::<usize>()
            .map_err(|_| p.err_at(at, format!("depth `{v}` is not a non-negative integer")))?;
        if d > space.max_extra_depth {
            return Err(p.err_at(at, format!("depth {d} exceeds {}", space.max_extra_depth)));
        }
        depths.push(d);
        Ok(())
    })?;
    p.expect("-e:[")?;
    let mut ratios = Vec::new();
    p.list(|p| {
        let (v, at) = p.number()?;
        let value: f64 = v
            .parse()
            .map_err(|_| p.err_at(at, format!("ratio `{v}` is not a number")))?;
        let idx = space
            .ratio_choices
            .iter()
            .position(|&c| (c - value).abs() < RATIO_MATCH_TOL)
            .ok_or_else(|| p.err_at(at, format!("ratio {v} is not one of the ratio choices")))?;
        let mut count = 1;
        if p.eat("×") || p.eat("x") {
            let (n, at) = p.number()?;
            count = n
                .parse::<usize>()
                .map_err(|_| p.err_at(at, format!("repeat count `{n}` is not an integer")))?;
        }
        ratios.extend(std::iter::repeat_n(idx, count));
        Ok(())
    })?;
    if p.pos != text.len() {
        return Err(p.err("trailing characters".into()));
    }
    if depths.len() != space.stages {
        return Err(Error::Parse {
            pos: 3,
            msg: format!(
                "{} depths given, space has {} stages",
                depths.len(),
                space.stages
            ),
        });
    }
    if ratios.len() != space.max_blocks() {
        return Err(Error::Parse {
            pos: text.find("-e:[").map_or(0, |i| i + 4),
            msg: format!(
                "{} ratios given, space has {} blocks",
                ratios.len(),
                space.max_blocks()
            ),
        });
    }
    ArchDescriptor::new(space, depths, ratios)
}

pub fn format(space: &SpaceConfig, arch: &ArchDescriptor) -> String {
    arch.display(space).to_string()
}

struct Parser<'a> {
    s: &'a str,
    pos: usize,
}

impl<'a> Parser<'a> {
    fn rest(&self) -> &str {
        &self.s[self.pos..]
    }

    fn err(&self, msg: String) -> Error {
        self.err_at(self.pos, msg)
    }

    fn err_at(&self, pos: usize, msg: String) -> Error {
        Error::Parse { pos, msg }
    }

    fn skip_ws(&mut self) {
        let trimmed = self.rest().trim_start();
        self.pos = self.s.len() - trimmed.len();
    }

    fn eat(&mut self, tok: &str) -> bool {
        if self.rest().starts_with(tok) {
            self.pos += tok.len();
            true
        } else {
            false
        }
    }

    fn expect(&mut self, tok: &str) -> Result<()> {
        if self.eat(tok) {
            Ok(())
        } else {
            Err(self.err(format!("expected `{tok}`")))
        }
    }

    fn number(&mut self) -> Result<(&'a str, usize)> {
        self.skip_ws();
        let start = self.pos;
        let len = self
            .rest()
            .find(|c: char| !(c.is_ascii_digit() || c == '.' || c == '-' || c == '+' || c == 'e'))
            .unwrap_or(self.rest().len());
        if len == 0 {
            return Err(self.err("expected a number".into()));
        }
        self.pos += len;
        let tok: &'a str = &self.s[start..self.pos];
        self.skip_ws();
        Ok((tok, start))
    }

    fn list(&mut self, mut item: impl FnMut(&mut Self) -> Result<()>) -> Result<()> {
        self.skip_ws();
        if self.eat("]") {
            return Ok(());
        }
        loop {
            item(self)?;
            self.skip_ws();
            if self.eat(",") {
                continue;
            }
            self.expect("]")?;
            return Ok(());
        }
    }
}
