//! Query-head training targets and the per-level loss terms (forward only).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::DenseHeadOutput;
use crate::tensor::DenseTensor;

/// Default anchor base: the smallest anchor on level `l` is `4 · 2^l` pixels.
pub const DEFAULT_ANCHOR_BASE: f64 = 4.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundTruth {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub class: u32,
}

impl GroundTruth {
    /// Side used for the small-object test.
    pub fn size(&self) -> f64 {
        self.w.max(self.h)
    }

    /// Grid cell of the center on level `l`.
    pub fn cell(&self, l: u8) -> (i64, i64) {
        let stride = (1u64 << l) as f64;
        ((self.cx / stride).floor() as i64, (self.cy / stride).floor() as i64)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GroundTruthSet {
    pub objects: Vec<GroundTruth>,
}

impl GroundTruthSet {
    pub fn new(objects: Vec<GroundTruth>) -> Result<Self> {
        for (i, o) in objects.iter().enumerate() {
            let finite = [o.cx, o.cy, o.w, o.h].iter().all(|v| v.is_finite());
            if !finite || o.w <= 0.0 || o.h <= 0.0 || o.cx < 0.0 || o.cy < 0.0 {
                return Err(Error::validation(format!(
                    "object {i} needs finite non-negative center and positive size"
                )));
            }
        }
        Ok(Self { objects })
    }

    /// Parses the JSON list `[{"cx":..,"cy":..,"w":..,"h":..,"class":..}]`.
    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let objects: Vec<GroundTruth> =
            serde_json::from_slice(bytes).map_err(|e| Error::format(format!("ground truth JSON: {e}")))?;
        Self::new(objects)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.objects).expect("plain data serializes")
    }

    pub fn check_within(&self, image_height: usize, image_width: usize) -> Result<()> {
        for (i, o) in self.objects.iter().enumerate() {
            if o.cx >= image_width as f64 || o.cy >= image_height as f64 {
                return Err(Error::validation(format!(
                    "object {i} center ({}, {}) outside {image_height}x{image_width} image",
                    o.cx, o.cy
                )));
            }
        }
        Ok(())
    }
}

/// Minimum anchor side on level `l`: `base · 2^l` pixels.
pub fn level_scale(l: u8, base: f64) -> f64 {
    base * (1u64 << l) as f64
}

/// The small-object threshold in grid units of level `l`. The stride cancels.
pub fn grid_threshold(l: u8, base: f64) -> f64 {
    level_scale(l, base) / (1u64 << l) as f64
}

pub fn is_small_for_level(o: &GroundTruth, l: u8, base: f64) -> bool {
    o.size() < level_scale(l, base)
}

/// Per-cell distance (grid units) to the nearest small object's center cell.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceMap {
    pub height: usize,
    pub width: usize,
    values: Vec<f64>,
}

impl DistanceMap {
    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Distances from every cell of an `height × width` level-`l` grid to the
/// closest center of an object small for that level; `+∞` if there is none.
pub fn distance_map(gt: &GroundTruthSet, l: u8, height: usize, width: usize, base: f64) -> DistanceMap {
    let centers: Vec<(i64, i64)> = gt
        .objects
        .iter()
        .filter(|o| is_small_for_level(o, l, base))
        .map(|o| o.cell(l))
        .collect();
    let mut values = vec![f64::INFINITY; height * width];
    for y in 0..height {
        for x in 0..width {
            let d = &mut values[y * width + x];
            for &(cx, cy) in &centers {
                let (dx, dy) = ((x as i64 - cx) as f64, (y as i64 - cy) as f64);
                *d = d.min(dx.hypot(dy));
            }
        }
    }
    DistanceMap { height, width, values }
}

/// Binary map, 1 where the distance is strictly below `threshold_grid`.
pub fn query_target(d: &DistanceMap, threshold_grid: f64) -> DenseTensor {
    let data = d
        .values
        .iter()
        .map(|&v| if v < threshold_grid { 1.0 } else { 0.0 })
        .collect();
    DenseTensor::new(1, d.height, d.width, data).expect("binary values")
}

/// Query target for level `l` in one step.
pub fn level_query_target(gt: &GroundTruthSet, l: u8, height: usize, width: usize, base: f64) -> DenseTensor {
    query_target(&distance_map(gt, l, height, width, base), grid_threshold(l, base))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub alpha: f64,
    pub gamma: f64,
    /// Per-level weights.
    pub betas: BTreeMap<u8, f64>,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.25,
            gamma: 2.0,
            betas: beta_schedule(2, 7, 3.0).into_iter().collect(),
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::config(format!("alpha {} outside (0, 1)", self.alpha)));
        }
        if self.gamma.is_nan() || self.gamma < 0.0 {
            return Err(Error::config(format!("gamma {} must be non-negative", self.gamma)));
        }
        if let Some((l, b)) = self.betas.iter().find(|(_, &b)| b.is_nan() || b <= 0.0) {
            return Err(Error::config(format!("beta for P{l} must be positive, got {b}")));
        }
        Ok(())
    }
}

/// Level weights growing linearly from 1 at `first` to `end` at `last`.
///
/// Values are rounded to 12 decimals so decimal schedules come out as the
/// nearest doubles to their decimal values (1.96, not 1.9600000000000002).
pub fn beta_schedule(first: u8, last: u8, end: f64) -> Vec<(u8, f64)> {
    let n = last.saturating_sub(first) as f64;
    (first..=last)
        .map(|l| {
            let t = (l - first) as f64;
            let beta = if n == 0.0 { 1.0 } else { 1.0 + (end - 1.0) * t / n };
            (l, (beta * 1e12).round() / 1e12)
        })
        .collect()
}

/// `log(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// Mean sigmoid focal loss over all positions.
pub fn focal_loss(logits: &[f32], targets: &[f32], alpha: f64, gamma: f64) -> Result<f64> {
    if logits.len() != targets.len() {
        return Err(Error::validation(format!(
            "focal loss over {} logits and {} targets",
            logits.len(),
            targets.len()
        )));
    }
    if logits.is_empty() {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for (&x, &t) in logits.iter().zip(targets) {
        let x = x as f64;
        // For a positive, p_t = σ(x) and 1 - p_t = σ(-x); mirrored for a negative.
        let (signed, alpha_t) = if t >= 0.5 { (x, alpha) } else { (-x, 1.0 - alpha) };
        let log_pt = -softplus(-signed);
        let one_minus_pt = (-softplus(signed)).exp();
        sum += -alpha_t * one_minus_pt.powf(gamma) * log_pt;
    }
    Ok(sum / logits.len() as f64)
}

/// Mean smooth-L1 with transition at |d| = 1.
pub fn smooth_l1(pred: &[f32], target: &[f32]) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::validation(format!(
            "smooth L1 over {} predictions and {} targets",
            pred.len(),
            target.len()
        )));
    }
    if pred.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = pred
        .iter()
        .zip(target)
        .map(|(&p, &t)| {
            let d = (p as f64 - t as f64).abs();
            if d < 1.0 {
                0.5 * d * d
            } else {
                d - 0.5
            }
        })
        .sum();
    Ok(sum / pred.len() as f64)
}

/// Classification, regression and query targets for one level.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelTargets {
    pub cls: DenseTensor,
    pub reg: DenseTensor,
    pub query: DenseTensor,
}

fn same_shape(name: &str, a: &DenseTensor, b: &DenseTensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::validation(format!(
            "{name} output {:?} vs target {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// `FL(U, U*) + smoothL1(R, R*) + FL(V, V*)`.
pub fn level_loss(out: &DenseHeadOutput, t: &LevelTargets, cfg: &LossConfig) -> Result<f64> {
    same_shape("cls", &out.cls_logits, &t.cls)?;
    same_shape("reg", &out.reg_deltas, &t.reg)?;
    same_shape("query", &out.query_logits, &t.query)?;
    Ok(focal_loss(out.cls_logits.data(), t.cls.data(), cfg.alpha, cfg.gamma)?
        + smooth_l1(out.reg_deltas.data(), t.reg.data())?
        + focal_loss(out.query_logits.data(), t.query.data(), cfg.alpha, cfg.gamma)?)
}

/// `Σ_l β_l · L_l`.
pub fn total_loss(per_level: &BTreeMap<u8, f64>, betas: &BTreeMap<u8, f64>) -> Result<f64> {
    per_level.iter().try_fold(0.0, |acc, (l, loss)| {
        let beta = betas
            .get(l)
            .ok_or_else(|| Error::config(format!("no loss weight for P{l}")))?;
        Ok(acc + beta * loss)
    })
}
