//! Query extraction and the cascaded coarse-to-fine pipeline.
//!
//! Levels at or above the start level run the head densely. The start
//! level's query scores pick coarse cells likely to hold small objects; each
//! picked cell maps to its 2×2 children one level down, and only those
//! children are computed there. Lower levels extract their own queries from
//! the rows they computed, so the active set narrows level by level.
//!
//! Three executors share that key flow and differ only in how a lower level
//! is computed: submanifold sparse convolution (`csq`), dense heads on crops
//! around each key (`cq`), or a full dense head whose outputs are then read
//! at the keys (`ccq`). `dense` skips queries entirely.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::analysis::{head_flops_dense, head_flops_sparse};
use crate::error::{Error, Result};
use crate::model::{
    run_dense_head, run_sparse_head_inner, DenseHeadOutput, FeaturePyramid, HeadOutput, HeadWeights, SparseHeadOutput,
};
use crate::sparse::{build_rulebook, gather, GridPos, KeySet, SparseFeature};
use crate::tensor::{sigmoid, sigmoid_scalar, DenseTensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Dense,
    Csq,
    Cq,
    Ccq,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Strategy::Dense, Strategy::Csq, Strategy::Cq, Strategy::Ccq];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Dense => "dense",
            Strategy::Csq => "csq",
            Strategy::Cq => "cq",
            Strategy::Ccq => "ccq",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dense" => Ok(Strategy::Dense),
            "csq" => Ok(Strategy::Csq),
            "cq" => Ok(Strategy::Cq),
            "ccq" => Ok(Strategy::Ccq),
            other => Err(Error::config(format!(
                "unknown strategy {other:?}, expected dense, csq, cq or ccq"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryConfig {
    pub sigma: f64,
    pub start_level: u8,
    pub min_level: u8,
    pub strategy: Strategy,
    pub cq_patch: usize,
}

impl Default for QueryConfig {
    fn default() -> Self {
        Self {
            sigma: 0.15,
            start_level: 4,
            min_level: 2,
            strategy: Strategy::Csq,
            cq_patch: 11,
        }
    }
}

impl QueryConfig {
    pub fn with_strategy(strategy: Strategy) -> Self {
        Self {
            strategy,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.sigma) {
            return Err(Error::config(format!("sigma {} outside [0, 1]", self.sigma)));
        }
        if self.min_level > self.start_level {
            return Err(Error::config(format!(
                "min level P{} above start level P{}",
                self.min_level, self.start_level
            )));
        }
        if self.cq_patch.is_multiple_of(2) {
            return Err(Error::config(format!("crop patch side {} must be odd", self.cq_patch)));
        }
        Ok(())
    }
}

/// Positions whose score is strictly above `sigma`.
///
/// Scores are compared in single precision, so a score stored as `0.15f32`
/// does not pass `sigma = 0.15`.
pub fn extract_queries_dense(scores: &DenseTensor, level: u8, sigma: f64) -> KeySet {
    let (h, w) = (scores.height(), scores.width());
    let plane = scores.plane(0);
    let positions = (0..h)
        .flat_map(|y| (0..w).map(move |x| (x, y)))
        .filter(|&(x, y)| plane[y * w + x] > sigma as f32)
        .map(|(x, y)| GridPos::new(x as u32, y as u32));
    KeySet::new(level, h, w, positions).expect("positions enumerate the map")
}

/// Keys of `scores` (channel 0) strictly above `sigma`.
pub fn extract_queries_sparse(scores: &SparseFeature, sigma: f64) -> KeySet {
    let keys = scores.keys();
    let positions = keys
        .positions()
        .iter()
        .enumerate()
        .filter(|&(i, _)| scores.row(i)[0] > sigma as f32)
        .map(|(_, &p)| p);
    KeySet::new(keys.level(), keys.height(), keys.width(), positions).expect("subset of valid keys")
}

/// Maps each query `(x, y)` to its children `(2x + i, 2y + j)`, `i, j ∈ {0, 1}`,
/// one level down. Children outside `child_height × child_width` are dropped.
pub fn map_queries_to_keys(queries: &KeySet, child_height: usize, child_width: usize) -> KeySet {
    let mut children = Vec::with_capacity(queries.len() * 4);
    for q in queries.positions() {
        for j in 0..2u32 {
            for i in 0..2u32 {
                let (x, y) = (2 * q.x + i, 2 * q.y + j);
                if (x as usize) < child_width && (y as usize) < child_height {
                    children.push(GridPos::new(x, y));
                }
            }
        }
    }
    KeySet::new(queries.level().saturating_sub(1), child_height, child_width, children)
        .expect("children clipped to bounds")
}

/// What happened on one level of a pipeline run.
#[derive(Clone, Debug)]
pub struct LevelResult {
    pub level: u8,
    pub height: usize,
    pub width: usize,
    pub output: HeadOutput,
    /// Keys the head was evaluated at; `None` when the level ran densely.
    pub computed_keys: Option<KeySet>,
    /// Queries extracted from this level for the next one down, if any.
    pub extracted_queries: Option<KeySet>,
    /// Positions evaluated by a dense head (full map, or all crop pixels).
    pub dense_positions: usize,
    pub sparse_rows: usize,
    pub patches: usize,
    pub rulebook_entries: usize,
    /// Multiply-accumulates spent on this level.
    pub flops: u64,
    pub millis: f64,
}

#[derive(Clone, Debug)]
pub struct CascadeResult {
    pub config: QueryConfig,
    pub levels: BTreeMap<u8, LevelResult>,
    pub total_millis: f64,
}

impl CascadeResult {
    pub fn level(&self, l: u8) -> Option<&LevelResult> {
        self.levels.get(&l)
    }

    pub fn total_flops(&self) -> u64 {
        self.levels.values().map(|r| r.flops).sum()
    }
}

/// Runs the pipeline selected by `cfg.strategy`.
pub fn run_pipeline(pyr: &FeaturePyramid, w: &HeadWeights, cfg: &QueryConfig) -> Result<CascadeResult> {
    run_pipeline_inner(pyr, w, cfg, true)
}

/// Dense heads on every level from the top of the pyramid down to `min_level`.
pub fn run_dense(pyr: &FeaturePyramid, w: &HeadWeights, cfg: &QueryConfig) -> Result<CascadeResult> {
    run_pipeline(
        pyr,
        w,
        &QueryConfig {
            strategy: Strategy::Dense,
            ..cfg.clone()
        },
    )
}

/// Cascade sparse query: lower levels run submanifold sparse heads at their keys.
pub fn run_cascade(pyr: &FeaturePyramid, w: &HeadWeights, cfg: &QueryConfig) -> Result<CascadeResult> {
    run_pipeline(
        pyr,
        w,
        &QueryConfig {
            strategy: Strategy::Csq,
            ..cfg.clone()
        },
    )
}

/// Crop query: lower levels run the dense head on a zero-padded crop around each key.
pub fn run_crop_query(pyr: &FeaturePyramid, w: &HeadWeights, cfg: &QueryConfig) -> Result<CascadeResult> {
    run_pipeline(
        pyr,
        w,
        &QueryConfig {
            strategy: Strategy::Cq,
            ..cfg.clone()
        },
    )
}

/// Complete convolution query: lower levels run densely and are read at their keys.
pub fn run_full_conv_query(pyr: &FeaturePyramid, w: &HeadWeights, cfg: &QueryConfig) -> Result<CascadeResult> {
    run_pipeline(
        pyr,
        w,
        &QueryConfig {
            strategy: Strategy::Ccq,
            ..cfg.clone()
        },
    )
}

pub(crate) fn run_pipeline_inner(
    pyr: &FeaturePyramid,
    w: &HeadWeights,
    cfg: &QueryConfig,
    sparse_bias: bool,
) -> Result<CascadeResult> {
    cfg.validate()?;
    let top = pyr.max_level().ok_or_else(|| Error::config("pyramid has no levels"))?;
    for l in cfg.min_level..=top {
        pyr.level(l)?;
    }
    let dense_floor = match cfg.strategy {
        Strategy::Dense => cfg.min_level,
        _ => {
            if cfg.start_level > top {
                return Err(Error::config(format!(
                    "start level P{} above the top pyramid level P{top}",
                    cfg.start_level
                )));
            }
            cfg.start_level
        }
    };
    let (a, k, c) = (w.num_anchors(), w.num_classes(), w.channels());

    let run_start = Instant::now();
    let mut levels = BTreeMap::new();
    let mut parent_queries: Option<KeySet> = None;

    for l in (dense_floor..=top).rev() {
        let t0 = Instant::now();
        let feature = pyr.level(l)?;
        let out = run_dense_head(feature, w)?;
        let extracted = (cfg.strategy != Strategy::Dense && l == cfg.start_level)
            .then(|| extract_queries_dense(&sigmoid(&out.query_logits), l, cfg.sigma));
        let (h, wd) = (feature.height(), feature.width());
        if let Some(q) = &extracted {
            parent_queries = Some(q.clone());
        }
        levels.insert(
            l,
            LevelResult {
                level: l,
                height: h,
                width: wd,
                output: HeadOutput::Dense(out),
                computed_keys: None,
                extracted_queries: extracted,
                dense_positions: h * wd,
                sparse_rows: 0,
                patches: 0,
                rulebook_entries: 0,
                flops: head_flops_dense(h, wd, c, a, k),
                millis: t0.elapsed().as_secs_f64() * 1e3,
            },
        );
    }

    if cfg.strategy != Strategy::Dense {
        for l in (cfg.min_level..cfg.start_level).rev() {
            let t0 = Instant::now();
            let feature = pyr.level(l)?;
            let (h, wd) = (feature.height(), feature.width());
            let queries = parent_queries
                .take()
                .expect("every level above min_level extracts queries");
            let keys = map_queries_to_keys(&queries, h, wd);
            let mut res = LevelResult {
                level: l,
                height: h,
                width: wd,
                output: HeadOutput::Sparse(empty_sparse_output(&keys, w)),
                computed_keys: None,
                extracted_queries: None,
                dense_positions: 0,
                sparse_rows: keys.len(),
                patches: 0,
                rulebook_entries: 0,
                flops: 0,
                millis: 0.0,
            };
            let out = match cfg.strategy {
                Strategy::Csq => {
                    let values = gather(feature, &keys)?;
                    res.rulebook_entries = build_rulebook(&keys).len();
                    res.flops = head_flops_sparse(keys.len(), res.rulebook_entries, c, a, k);
                    run_sparse_head_inner(&values, w, sparse_bias)?
                }
                Strategy::Cq => {
                    res.patches = keys.len();
                    res.dense_positions = keys.len() * cfg.cq_patch * cfg.cq_patch;
                    res.flops = keys.len() as u64 * head_flops_dense(cfg.cq_patch, cfg.cq_patch, c, a, k);
                    run_crop_head(feature, &keys, w, cfg.cq_patch)?
                }
                Strategy::Ccq => {
                    res.dense_positions = h * wd;
                    res.flops = head_flops_dense(h, wd, c, a, k);
                    let full = run_dense_head(feature, w)?;
                    read_at_keys(&full, &keys)?
                }
                Strategy::Dense => unreachable!("dense handled above"),
            };
            let queries = extract_queries_sparse(&out.query_logits.map(sigmoid_scalar), cfg.sigma);
            parent_queries = Some(queries.clone());
            res.output = HeadOutput::Sparse(out);
            res.computed_keys = Some(keys);
            res.extracted_queries = Some(queries);
            res.millis = t0.elapsed().as_secs_f64() * 1e3;
            levels.insert(l, res);
        }
    }

    Ok(CascadeResult {
        config: cfg.clone(),
        levels,
        total_millis: run_start.elapsed().as_secs_f64() * 1e3,
    })
}

fn empty_sparse_output(keys: &KeySet, w: &HeadWeights) -> SparseHeadOutput {
    let empty = |c: usize| {
        SparseFeature::new(KeySet::empty(keys.level(), keys.height(), keys.width()), c, vec![]).expect("empty")
    };
    SparseHeadOutput {
        cls_logits: empty(w.num_anchors() * w.num_classes()),
        reg_deltas: empty(w.num_anchors() * 4),
        query_logits: empty(1),
    }
}

/// Reads dense head outputs at `keys`.
pub fn read_at_keys(full: &DenseHeadOutput, keys: &KeySet) -> Result<SparseHeadOutput> {
    Ok(SparseHeadOutput {
        cls_logits: gather(&full.cls_logits, keys)?,
        reg_deltas: gather(&full.reg_deltas, keys)?,
        query_logits: gather(&full.query_logits, keys)?,
    })
}

/// Zero-padded `side × side` crop of `feature` centered on `center`.
pub fn crop_patch(feature: &DenseTensor, center: GridPos, side: usize) -> DenseTensor {
    let r = (side / 2) as i64;
    let (h, w) = (feature.height() as i64, feature.width() as i64);
    let mut patch = DenseTensor::zeros(feature.channels(), side, side);
    for c in 0..feature.channels() {
        for py in 0..side as i64 {
            let y = center.y as i64 + py - r;
            if y < 0 || y >= h {
                continue;
            }
            for px in 0..side as i64 {
                let x = center.x as i64 + px - r;
                if x < 0 || x >= w {
                    continue;
                }
                patch.set(c, py as usize, px as usize, feature.get(c, y as usize, x as usize));
            }
        }
    }
    patch
}

/// Dense head on a crop around each key, read at the crop center.
pub fn run_crop_head(feature: &DenseTensor, keys: &KeySet, w: &HeadWeights, side: usize) -> Result<SparseHeadOutput> {
    let r = side / 2;
    let mut cls = Vec::new();
    let mut reg = Vec::new();
    let mut query = Vec::new();
    for &p in keys.positions() {
        let out = run_dense_head(&crop_patch(feature, p, side), w)?;
        cls.extend(out.cls_logits.pixel(r, r));
        reg.extend(out.reg_deltas.pixel(r, r));
        query.extend(out.query_logits.pixel(r, r));
    }
    Ok(SparseHeadOutput {
        cls_logits: SparseFeature::new(keys.clone(), w.num_anchors() * w.num_classes(), cls)?,
        reg_deltas: SparseFeature::new(keys.clone(), w.num_anchors() * 4, reg)?,
        query_logits: SparseFeature::new(keys.clone(), 1, query)?,
    })
}
