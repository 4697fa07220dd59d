//! Feature pyramids and the shared detection head.
//!
//! One [`HeadWeights`] value serves every pyramid level. Each of the three
//! branches (classification, box regression, query) is four 3×3 conv + ReLU
//! layers followed by a predictor conv producing raw logits.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sparse::{build_rulebook, sparse_conv_inner, KeySet, Rulebook, SparseFeature};
use crate::tensor::{conv2d, ConvWeights, DenseTensor};

pub const TOWER_DEPTH: usize = 4;
pub const MIN_LEVEL: u8 = 2;
pub const MAX_LEVEL: u8 = 7;

/// Prior probability used to initialize classification and query predictor biases.
pub const PRIOR_PROB: f64 = 0.01;

/// Channel carrying the small-object signal in synthetic fixtures. Class `k`
/// is carried on channel `1 + k`.
pub const OBJECTNESS_CHANNEL: usize = 0;

/// Predictor gain on the signal channels of fixture weights.
pub const SIGNAL_GAIN: f32 = 2.0;

/// Spatial size of level `l` for an `h × w` image: `⌊h / 2^l⌋ × ⌊w / 2^l⌋`.
pub fn level_dims(image_height: usize, image_width: usize, level: u8) -> (usize, usize) {
    (image_height >> level, image_width >> level)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid {
    image_height: usize,
    image_width: usize,
    channels: usize,
    levels: BTreeMap<u8, DenseTensor>,
}

impl FeaturePyramid {
    pub fn new(
        image_height: usize,
        image_width: usize,
        channels: usize,
        levels: BTreeMap<u8, DenseTensor>,
    ) -> Result<Self> {
        for (&l, t) in &levels {
            let (h, w) = level_dims(image_height, image_width, l);
            if t.channels() != channels || t.height() != h || t.width() != w {
                return Err(Error::config(format!(
                    "level P{l} has shape {:?}, expected [{channels}, {h}, {w}]",
                    t.shape()
                )));
            }
        }
        Ok(Self {
            image_height,
            image_width,
            channels,
            levels,
        })
    }

    pub fn image_height(&self) -> usize {
        self.image_height
    }

    pub fn image_width(&self) -> usize {
        self.image_width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn levels(&self) -> &BTreeMap<u8, DenseTensor> {
        &self.levels
    }

    pub fn level(&self, l: u8) -> Result<&DenseTensor> {
        self.levels
            .get(&l)
            .ok_or_else(|| Error::config(format!("pyramid has no level P{l}")))
    }

    pub fn min_level(&self) -> Option<u8> {
        self.levels.keys().next().copied()
    }

    pub fn max_level(&self) -> Option<u8> {
        self.levels.keys().next_back().copied()
    }

    pub fn dims(&self, l: u8) -> (usize, usize) {
        level_dims(self.image_height, self.image_width, l)
    }
}

/// A conv tower plus its predictor.
#[derive(Clone, Debug, PartialEq)]
pub struct Branch {
    pub tower: [ConvWeights; TOWER_DEPTH],
    pub predictor: ConvWeights,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BranchKind {
    Cls,
    Reg,
    Query,
}

impl BranchKind {
    pub const ALL: [BranchKind; 3] = [BranchKind::Cls, BranchKind::Reg, BranchKind::Query];

    pub fn name(self) -> &'static str {
        match self {
            BranchKind::Cls => "cls",
            BranchKind::Reg => "reg",
            BranchKind::Query => "query",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadWeights {
    channels: usize,
    num_anchors: usize,
    num_classes: usize,
    cls: Branch,
    reg: Branch,
    query: Branch,
}

impl HeadWeights {
    pub fn new(
        channels: usize,
        num_anchors: usize,
        num_classes: usize,
        cls: Branch,
        reg: Branch,
        query: Branch,
    ) -> Result<Self> {
        let outs = [
            (BranchKind::Cls, &cls, num_anchors * num_classes),
            (BranchKind::Reg, &reg, num_anchors * 4),
            (BranchKind::Query, &query, 1),
        ];
        for (kind, branch, pred_out) in outs {
            for (i, conv) in branch.tower.iter().enumerate() {
                if conv.in_channels() != channels || conv.out_channels() != channels {
                    return Err(Error::config(format!(
                        "{}_tower.{i} maps {}->{} channels, expected {channels}->{channels}",
                        kind.name(),
                        conv.in_channels(),
                        conv.out_channels()
                    )));
                }
            }
            let p = &branch.predictor;
            if p.in_channels() != channels || p.out_channels() != pred_out {
                return Err(Error::config(format!(
                    "{}_pred maps {}->{} channels, expected {channels}->{pred_out}",
                    kind.name(),
                    p.in_channels(),
                    p.out_channels()
                )));
            }
        }
        Ok(Self {
            channels,
            num_anchors,
            num_classes,
            cls,
            reg,
            query,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn num_anchors(&self) -> usize {
        self.num_anchors
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn branch(&self, kind: BranchKind) -> &Branch {
        match kind {
            BranchKind::Cls => &self.cls,
            BranchKind::Reg => &self.reg,
            BranchKind::Query => &self.query,
        }
    }

    pub fn branch_mut(&mut self, kind: BranchKind) -> &mut Branch {
        match kind {
            BranchKind::Cls => &mut self.cls,
            BranchKind::Reg => &mut self.reg,
            BranchKind::Query => &mut self.query,
        }
    }

    /// All convolutions with their role names, in serialization order.
    pub fn convs(&self) -> Vec<(String, &ConvWeights)> {
        let mut out = Vec::with_capacity(3 * (TOWER_DEPTH + 1));
        for kind in BranchKind::ALL {
            let b = self.branch(kind);
            for (i, c) in b.tower.iter().enumerate() {
                out.push((format!("{}_tower.{i}", kind.name()), c));
            }
            out.push((format!("{}_pred", kind.name()), &b.predictor));
        }
        out
    }

    pub fn role_names() -> Vec<String> {
        let mut out = Vec::new();
        for kind in BranchKind::ALL {
            for i in 0..TOWER_DEPTH {
                out.push(format!("{}_tower.{i}", kind.name()));
            }
            out.push(format!("{}_pred", kind.name()));
        }
        out
    }

    /// Rebuilds weights from convolutions given in [`HeadWeights::role_names`] order.
    pub fn from_convs(
        channels: usize,
        num_anchors: usize,
        num_classes: usize,
        convs: Vec<ConvWeights>,
    ) -> Result<Self> {
        if convs.len() != 3 * (TOWER_DEPTH + 1) {
            return Err(Error::config(format!(
                "head needs {} convolutions, got {}",
                3 * (TOWER_DEPTH + 1),
                convs.len()
            )));
        }
        let mut it = convs.into_iter();
        let mut take_branch = || -> Branch {
            let tower = std::array::from_fn(|_| it.next().expect("length checked"));
            let predictor = it.next().expect("length checked");
            Branch { tower, predictor }
        };
        let cls = take_branch();
        let reg = take_branch();
        let query = take_branch();
        Self::new(channels, num_anchors, num_classes, cls, reg, query)
    }
}

/// Raw head outputs on a full level.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseHeadOutput {
    pub cls_logits: DenseTensor,
    pub reg_deltas: DenseTensor,
    pub query_logits: DenseTensor,
}

/// Raw head outputs at the active keys of a level. All three share one key set.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseHeadOutput {
    pub cls_logits: SparseFeature,
    pub reg_deltas: SparseFeature,
    pub query_logits: SparseFeature,
}

impl SparseHeadOutput {
    pub fn keys(&self) -> &KeySet {
        self.cls_logits.keys()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum HeadOutput {
    Dense(DenseHeadOutput),
    Sparse(SparseHeadOutput),
}

fn relu_in_place(v: &mut [f32]) {
    for x in v {
        *x = x.max(0.0);
    }
}

fn dense_branch(feature: &DenseTensor, b: &Branch) -> Result<DenseTensor> {
    let mut x = feature.clone();
    for conv in &b.tower {
        let y = conv2d(&x, conv)?;
        let (c, h, w) = (y.channels(), y.height(), y.width());
        let mut data = y.into_data();
        relu_in_place(&mut data);
        x = DenseTensor::from_raw(c, h, w, data);
    }
    conv2d(&x, &b.predictor)
}

/// Runs all three branches on a full level.
pub fn run_dense_head(feature: &DenseTensor, w: &HeadWeights) -> Result<DenseHeadOutput> {
    if feature.channels() != w.channels {
        return Err(Error::config(format!(
            "head expects {} channels, feature has {}",
            w.channels,
            feature.channels()
        )));
    }
    Ok(DenseHeadOutput {
        cls_logits: dense_branch(feature, &w.cls)?,
        reg_deltas: dense_branch(feature, &w.reg)?,
        query_logits: dense_branch(feature, &w.query)?,
    })
}

fn sparse_branch(values: &SparseFeature, b: &Branch, rb: &Rulebook, with_bias: bool) -> Result<SparseFeature> {
    let mut x = values.clone();
    for conv in &b.tower {
        x = sparse_conv_inner(&x, conv, rb, with_bias)?;
        for i in 0..x.rows() {
            relu_in_place(x.row_mut(i));
        }
    }
    sparse_conv_inner(&x, &b.predictor, rb, with_bias)
}

/// Runs all three branches at the value features' keys only.
///
/// The rulebook is built once; submanifold convolution keeps the active set
/// fixed through every layer.
pub fn run_sparse_head(values: &SparseFeature, w: &HeadWeights) -> Result<SparseHeadOutput> {
    run_sparse_head_inner(values, w, true)
}

pub(crate) fn run_sparse_head_inner(
    values: &SparseFeature,
    w: &HeadWeights,
    with_bias: bool,
) -> Result<SparseHeadOutput> {
    if values.channels() != w.channels {
        return Err(Error::config(format!(
            "head expects {} channels, value features have {}",
            w.channels,
            values.channels()
        )));
    }
    let rb = build_rulebook(values.keys());
    Ok(SparseHeadOutput {
        cls_logits: sparse_branch(values, &w.cls, &rb, with_bias)?,
        reg_deltas: sparse_branch(values, &w.reg, &rb, with_bias)?,
        query_logits: sparse_branch(values, &w.query, &rb, with_bias)?,
    })
}

/// A small object planted into a synthetic pyramid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlobSpec {
    /// Center in image pixels.
    pub cx: f64,
    pub cy: f64,
    /// Side length in image pixels.
    pub size: f64,
    #[serde(default)]
    pub class: u32,
    /// Activation written to the signal channels.
    #[serde(default = "default_amplitude")]
    pub amplitude: f32,
    /// Levels to plant on; all pyramid levels when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub levels: Option<Vec<u8>>,
}

pub fn default_amplitude() -> f32 {
    4.0
}

impl BlobSpec {
    pub fn new(cx: f64, cy: f64, size: f64, class: u32) -> Self {
        Self {
            cx,
            cy,
            size,
            class,
            amplitude: default_amplitude(),
            levels: None,
        }
    }

    /// Grid cell containing the blob center on level `l`.
    pub fn cell(&self, l: u8) -> (i64, i64) {
        let stride = (1u64 << l) as f64;
        ((self.cx / stride).floor() as i64, (self.cy / stride).floor() as i64)
    }
}

/// Background noise amplitude of synthetic pyramids.
pub const NOISE_AMPLITUDE: f32 = 0.1;

/// Seeded stand-in for a backbone + FPN.
///
/// Every level is uniform noise in `±NOISE_AMPLITUDE`. Each blob writes its
/// amplitude into the objectness channel and its class channel at the single
/// grid cell containing its center, on every requested level.
pub fn make_synthetic_pyramid(
    seed: u64,
    image_height: usize,
    image_width: usize,
    l_min: u8,
    l_max: u8,
    channels: usize,
    blobs: &[BlobSpec],
) -> Result<FeaturePyramid> {
    if l_min < MIN_LEVEL || l_max > MAX_LEVEL || l_min > l_max {
        return Err(Error::config(format!(
            "level range P{l_min}..P{l_max} outside P{MIN_LEVEL}..P{MAX_LEVEL}"
        )));
    }
    if image_height == 0 || image_width == 0 || channels == 0 {
        return Err(Error::config("image dims and channels must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut levels = BTreeMap::new();
    for l in l_min..=l_max {
        let (h, w) = level_dims(image_height, image_width, l);
        let data: Vec<f32> = (0..channels * h * w)
            .map(|_| rng.gen_range(-NOISE_AMPLITUDE..NOISE_AMPLITUDE))
            .collect();
        let mut t = DenseTensor::from_raw(channels, h, w, data);
        for blob in blobs {
            if let Some(ls) = &blob.levels {
                if !ls.contains(&l) {
                    continue;
                }
            }
            let (gx, gy) = blob.cell(l);
            if gx < 0 || gy < 0 || gx as usize >= w || gy as usize >= h {
                continue;
            }
            let (gx, gy) = (gx as usize, gy as usize);
            t.set(OBJECTNESS_CHANNEL, gy, gx, blob.amplitude);
            let class_ch = 1 + blob.class as usize;
            if class_ch < channels {
                t.set(class_ch, gy, gx, blob.amplitude);
            }
        }
        if !t.is_finite() {
            return Err(Error::validation("blob amplitude must be finite"));
        }
        levels.insert(l, t);
    }
    FeaturePyramid::new(image_height, image_width, channels, levels)
}

/// Seeded small blobs: sides uniform in `[8, 32)` pixels, centers at least
/// 16 pixels inside the image when it is large enough, classes uniform in `0..num_classes`.
pub fn random_blobs(
    seed: u64,
    image_height: usize,
    image_width: usize,
    count: usize,
    num_classes: usize,
) -> Vec<BlobSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb10b_5eed);
    let margin = 16.0;
    let span = |extent: usize| (extent as f64 - 2.0 * margin).max(1.0);
    (0..count)
        .map(|_| {
            let cx = (margin + rng.gen_range(0.0..span(image_width)))
                .floor()
                .min(image_width.saturating_sub(1) as f64);
            let cy = (margin + rng.gen_range(0.0..span(image_height)))
                .floor()
                .min(image_height.saturating_sub(1) as f64);
            let size = rng.gen_range(8.0f64..32.0).floor();
            let class = rng.gen_range(0..num_classes.max(1)) as u32;
            BlobSpec::new(cx, cy, size, class)
        })
        .collect()
}

/// `1 / sqrt(fan_in)`.
pub fn init_scale(fan_in: usize) -> f32 {
    1.0 / (fan_in as f32).sqrt()
}

/// `-ln((1 - π) / π)`.
pub fn prior_bias(prior: f64) -> f32 {
    (-((1.0 - prior) / prior).ln()) as f32
}

fn random_conv(rng: &mut ChaCha8Rng, out: usize, inp: usize, bias_range: f32) -> ConvWeights {
    let scale = init_scale(inp * 9);
    let weights = (0..out * inp * 9)
        .map(|_| rng.gen_range(-1.0f32..1.0) * scale)
        .collect();
    let bias = (0..out)
        .map(|_| {
            if bias_range > 0.0 {
                rng.gen_range(-bias_range..bias_range)
            } else {
                0.0
            }
        })
        .collect();
    ConvWeights::new(out, inp, 3, weights, bias).expect("shape computed above")
}

fn random_branch(rng: &mut ChaCha8Rng, c: usize, pred_out: usize, bias_range: f32) -> Branch {
    Branch {
        tower: std::array::from_fn(|_| random_conv(rng, c, c, bias_range)),
        predictor: random_conv(rng, pred_out, c, bias_range),
    }
}

/// Fully random head, nonzero biases everywhere. Used by equivalence checks.
pub fn make_random_weights(seed: u64, channels: usize, num_anchors: usize, num_classes: usize) -> HeadWeights {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cls = random_branch(&mut rng, channels, num_anchors * num_classes, 0.1);
    let reg = random_branch(&mut rng, channels, num_anchors * 4, 0.1);
    let query = random_branch(&mut rng, channels, 1, 0.1);
    HeadWeights::new(channels, num_anchors, num_classes, cls, reg, query).expect("consistent shapes")
}

/// Seeded fixture head that responds to synthetic blobs.
///
/// Weights are uniform in `±1/sqrt(fan_in)` with zero tower biases and
/// classification/query predictor biases at the `π = 0.01` prior. When the
/// channel count leaves room, channels `0..=K` are reserved as signal
/// channels: tower layers pass them through unchanged (center weight 1,
/// isolated from the random channels), the query predictor reads channel 0
/// and the class-`k` logits read channel `1 + k`, both with [`SIGNAL_GAIN`].
pub fn make_fixture_weights(seed: u64, channels: usize, num_anchors: usize, num_classes: usize) -> HeadWeights {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cls = random_branch(&mut rng, channels, num_anchors * num_classes, 0.0);
    let mut reg = random_branch(&mut rng, channels, num_anchors * 4, 0.0);
    let mut query = random_branch(&mut rng, channels, 1, 0.0);
    let prior = prior_bias(PRIOR_PROB);
    cls.predictor.bias_mut().fill(prior);
    query.predictor.bias_mut().fill(prior);

    let signal = num_classes + 1;
    if channels > signal {
        for branch in [&mut cls, &mut reg, &mut query] {
            for conv in branch.tower.iter_mut() {
                isolate_signal_channels(conv, signal);
                for s in 0..signal {
                    conv.set(s, s, 1, 1, 1.0);
                }
            }
            isolate_signal_channels(&mut branch.predictor, signal);
        }
        for a in 0..num_anchors {
            for k in 0..num_classes {
                cls.predictor.set(a * num_classes + k, 1 + k, 1, 1, SIGNAL_GAIN);
            }
        }
        query.predictor.set(0, OBJECTNESS_CHANNEL, 1, 1, SIGNAL_GAIN);
    }
    HeadWeights::new(channels, num_anchors, num_classes, cls, reg, query).expect("consistent shapes")
}

/// Zeroes every weight that connects a signal channel with a non-signal one,
/// and every weight into a signal output.
fn isolate_signal_channels(conv: &mut ConvWeights, signal: usize) {
    let tower = conv.out_channels() == conv.in_channels();
    for o in 0..conv.out_channels() {
        for c in 0..conv.in_channels() {
            let out_is_signal = tower && o < signal;
            if out_is_signal || c < signal {
                for ky in 0..conv.kernel() {
                    for kx in 0..conv.kernel() {
                        conv.set(o, c, ky, kx, 0.0);
                    }
                }
            }
        }
        if tower && o < signal {
            conv.bias_mut()[o] = 0.0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sparse::{gather, GridPos};
    use crate::tensor::{max_relative_error, relu, sigmoid_scalar};

    fn seeded_feature(seed: u64, c: usize, h: usize, w: usize) -> DenseTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DenseTensor::new(c, h, w, (0..c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn zero_weights_give_predictor_bias() {
        let c = 4;
        let zero_branch = |out: usize, b: f32| {
            let mut p = ConvWeights::zeros(out, c, 3);
            p.bias_mut().fill(b);
            Branch {
                tower: std::array::from_fn(|_| ConvWeights::zeros(c, c, 3)),
                predictor: p,
            }
        };
        let w = HeadWeights::new(c, 1, 3, zero_branch(3, -1.5), zero_branch(4, 0.0), zero_branch(1, 0.0)).unwrap();
        let out = run_dense_head(&DenseTensor::zeros(c, 5, 6), &w).unwrap();
        assert!(out.cls_logits.data().iter().all(|&v| v == -1.5));
        assert_eq!(out.cls_logits.shape(), [3, 5, 6]);
    }

    #[test]
    fn output_dims_follow_input() {
        let w = make_random_weights(1, 6, 2, 3);
        for (h, wd) in [(1, 1), (3, 8), (9, 4)] {
            let out = run_dense_head(&seeded_feature(2, 6, h, wd), &w).unwrap();
            assert_eq!(out.cls_logits.shape(), [6, h, wd]);
            assert_eq!(out.reg_deltas.shape(), [8, h, wd]);
            assert_eq!(out.query_logits.shape(), [1, h, wd]);
        }
    }

    #[test]
    fn dense_head_matches_oracle_composition() {
        let w = make_random_weights(3, 16, 1, 4);
        let x = seeded_feature(4, 16, 16, 16);
        let out = run_dense_head(&x, &w).unwrap();
        let compose = |b: &Branch| {
            let mut t = x.clone();
            for conv in &b.tower {
                t = relu(&conv2d(&t, conv).unwrap());
            }
            conv2d(&t, &b.predictor).unwrap()
        };
        let cls = compose(w.branch(BranchKind::Cls));
        let query = compose(w.branch(BranchKind::Query));
        assert!(max_relative_error(out.cls_logits.data(), cls.data()) <= 1e-5);
        assert!(max_relative_error(out.query_logits.data(), query.data()) <= 1e-5);
    }

    #[test]
    fn channel_mismatch_rejected() {
        let w = make_random_weights(3, 4, 1, 2);
        assert!(matches!(
            run_dense_head(&DenseTensor::zeros(5, 3, 3), &w),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn sparse_head_full_coverage_matches_dense() {
        let w = make_random_weights(5, 8, 1, 4);
        let x = seeded_feature(6, 8, 10, 12);
        let dense = run_dense_head(&x, &w).unwrap();
        let keys = KeySet::full(3, 10, 12);
        let sparse = run_sparse_head(&gather(&x, &keys).unwrap(), &w).unwrap();
        let full = |f: &SparseFeature| crate::sparse::scatter(f, 10, 12).unwrap();
        assert!(max_relative_error(full(&sparse.cls_logits).data(), dense.cls_logits.data()) <= 1e-5);
        assert!(max_relative_error(full(&sparse.reg_deltas).data(), dense.reg_deltas.data()) <= 1e-5);
        assert!(max_relative_error(full(&sparse.query_logits).data(), dense.query_logits.data()) <= 1e-5);
    }

    #[test]
    fn sparse_head_on_empty_keys() {
        let w = make_random_weights(5, 4, 1, 2);
        let empty = SparseFeature::new(KeySet::empty(2, 6, 6), 4, vec![]).unwrap();
        let out = run_sparse_head(&empty, &w).unwrap();
        assert_eq!(out.cls_logits.rows(), 0);
        assert_eq!(out.query_logits.rows(), 0);
    }

    #[test]
    fn isolated_key_matches_zero_masked_dense() {
        let w = make_random_weights(7, 6, 1, 3);
        let x = seeded_feature(8, 6, 7, 7);
        let p = GridPos::new(3, 2);
        let keys = KeySet::new(3, 7, 7, [p]).unwrap();
        let sparse = run_sparse_head(&gather(&x, &keys).unwrap(), &w).unwrap();

        let mut masked = DenseTensor::zeros(6, 7, 7);
        for c in 0..6 {
            masked.set(c, 2, 3, x.get(c, 2, 3));
        }
        // Zero-masking alone is not enough: a dense conv would still write
        // bias-driven values into the neighbors. Re-mask after every layer.
        let run = |b: &Branch| {
            let mut t = masked.clone();
            for conv in &b.tower {
                let y = relu(&conv2d(&t, conv).unwrap());
                t = DenseTensor::zeros(6, 7, 7);
                for c in 0..6 {
                    t.set(c, 2, 3, y.get(c, 2, 3));
                }
            }
            conv2d(&t, &b.predictor).unwrap().pixel(3, 2)
        };
        let cls = run(w.branch(BranchKind::Cls));
        assert!(max_relative_error(sparse.cls_logits.row(0), &cls) <= 1e-5);
        let q = run(w.branch(BranchKind::Query));
        assert!(max_relative_error(sparse.query_logits.row(0), &q) <= 1e-5);
    }

    #[test]
    fn synthetic_pyramid_is_deterministic() {
        let blobs = [BlobSpec::new(100.0, 60.0, 12.0, 1)];
        let a = make_synthetic_pyramid(9, 128, 96, 2, 5, 8, &blobs).unwrap();
        let b = make_synthetic_pyramid(9, 128, 96, 2, 5, 8, &blobs).unwrap();
        assert_eq!(a, b);
        let c = make_synthetic_pyramid(10, 128, 96, 2, 5, 8, &blobs).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn level_dims_use_floor() {
        let p = make_synthetic_pyramid(1, 512, 512, 2, 7, 2, &[]).unwrap();
        let sides: Vec<usize> = p.levels().values().map(|t| t.height()).collect();
        assert_eq!(sides, vec![128, 64, 32, 16, 8, 4]);
        let p = make_synthetic_pyramid(1, 500, 500, 7, 7, 2, &[]).unwrap();
        assert_eq!(p.level(7).unwrap().shape(), [2, 3, 3]);
    }

    #[test]
    fn invalid_level_range() {
        assert!(matches!(
            make_synthetic_pyramid(1, 64, 64, 1, 4, 2, &[]),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            make_synthetic_pyramid(1, 64, 64, 3, 8, 2, &[]),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            make_synthetic_pyramid(1, 64, 64, 5, 4, 2, &[]),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn blob_is_planted_at_center_cell() {
        let p = make_synthetic_pyramid(3, 256, 256, 2, 4, 8, &[BlobSpec::new(100.0, 70.0, 12.0, 2)]).unwrap();
        let t = p.level(3).unwrap();
        assert_eq!(t.get(OBJECTNESS_CHANNEL, 70 / 8, 100 / 8), 4.0);
        assert_eq!(t.get(3, 70 / 8, 100 / 8), 4.0);
    }

    #[test]
    fn fixture_weights_are_deterministic() {
        assert_eq!(make_fixture_weights(4, 16, 1, 4), make_fixture_weights(4, 16, 1, 4));
        assert_ne!(make_fixture_weights(4, 16, 1, 4), make_fixture_weights(5, 16, 1, 4));
    }

    #[test]
    fn query_prior_on_zero_input() {
        let w = make_fixture_weights(4, 16, 1, 4);
        let out = run_dense_head(&DenseTensor::zeros(16, 4, 4), &w).unwrap();
        for &logit in out.query_logits.data() {
            assert!((sigmoid_scalar(logit) - 0.01).abs() < 1e-6);
        }
    }

    #[test]
    fn init_scale_halves_by_sqrt2_when_channels_double() {
        let ratio = init_scale(16 * 9) / init_scale(32 * 9);
        assert!((ratio - 2f32.sqrt()).abs() < 1e-6);
        let w16 = make_random_weights(1, 16, 1, 4);
        let max16 = w16.branch(BranchKind::Reg).tower[0]
            .weights()
            .iter()
            .fold(0f32, |m, v| m.max(v.abs()));
        assert!(max16 <= init_scale(16 * 9));
    }

    #[test]
    fn blob_fires_query_head() {
        let w = make_fixture_weights(2, 16, 1, 4);
        let p = make_synthetic_pyramid(2, 256, 256, 2, 5, 16, &[BlobSpec::new(130.0, 90.0, 10.0, 0)]).unwrap();
        let out = run_dense_head(p.level(4).unwrap(), &w).unwrap();
        let (gx, gy) = (130 / 16, 90 / 16);
        assert!(sigmoid_scalar(out.query_logits.get(0, gy, gx)) > 0.9);
        let background = sigmoid_scalar(out.query_logits.get(0, 0, 0));
        assert!(background < 0.05, "{background}");
    }

    #[test]
    fn weights_are_shared_structurally() {
        // A head has exactly 15 convolutions and none is level-specific.
        let w = make_fixture_weights(1, 8, 1, 2);
        assert_eq!(w.convs().len(), 15);
        let names: Vec<String> = w.convs().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names, HeadWeights::role_names());
        assert!(names.iter().all(|n| !n.contains('P')));
    }

    #[test]
    fn random_blobs_are_seeded_and_inside() {
        let a = random_blobs(3, 100, 60, 20, 4);
        assert_eq!(a, random_blobs(3, 100, 60, 20, 4));
        assert_ne!(a, random_blobs(4, 100, 60, 20, 4));
        for b in &a {
            assert!(b.cx >= 16.0 && b.cx < 60.0 && b.cy >= 16.0 && b.cy < 100.0);
            assert!((8.0..32.0).contains(&b.size) && b.class < 4);
        }
        for b in random_blobs(1, 5, 5, 10, 1) {
            assert!(b.cx < 5.0 && b.cy < 5.0);
        }
    }
}
