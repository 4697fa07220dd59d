//! End-to-end equivalence checks between the query strategies and their
//! dense references.

use serde::Serialize;

use crate::analysis::{head_flops_dense, head_flops_dense_in_bounds, head_flops_sparse};
use crate::error::Result;
use crate::model::{run_dense_head, FeaturePyramid, HeadOutput, HeadWeights};
use crate::postproc::{detections, AnchorConfig, NmsConfig};
use crate::query::{read_at_keys, run_crop_head, run_pipeline, run_pipeline_inner, QueryConfig, Strategy};
use crate::sparse::{build_rulebook, GridPos, KeySet, SparseFeature};
use crate::targets::{grid_threshold, level_query_target, level_scale, GroundTruthSet, DEFAULT_ANCHOR_BASE};
use crate::tensor::max_relative_error;
use crate::SCHEMA;

/// Tolerance for paths that reorder floating-point accumulation.
pub const REL_TOLERANCE: f64 = 1e-5;

/// Deliberate defects for exercising the checks themselves.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// Sparse convolutions drop their bias term.
    SparseSkipBias,
}

#[derive(Clone, Debug, Default)]
pub struct VerifyOptions {
    pub query: QueryConfig,
    pub fault: Option<Fault>,
}

#[derive(Clone, Debug, Serialize)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct VerifyReport {
    pub schema: &'static str,
    pub passed: bool,
    pub checks: Vec<CheckResult>,
    /// Non-fatal observations, such as checksum mismatches.
    pub notes: Vec<String>,
}

impl VerifyReport {
    pub fn check(&self, name: &str) -> Option<&CheckResult> {
        self.checks.iter().find(|c| c.name == name)
    }
}

fn bits(v: &[f32]) -> Vec<u32> {
    v.iter().map(|x| x.to_bits()).collect()
}

fn sparse_of(out: &HeadOutput) -> Option<&crate::model::SparseHeadOutput> {
    match out {
        HeadOutput::Sparse(s) => Some(s),
        HeadOutput::Dense(_) => None,
    }
}

/// CCQ outputs at kept keys are bitwise equal to the dense pipeline's, and
/// the final detections agree exactly.
pub fn check_ccq_exactness(pyr: &FeaturePyramid, w: &HeadWeights, cfg: &QueryConfig) -> Result<CheckResult> {
    let dense = run_pipeline(
        pyr,
        w,
        &QueryConfig {
            strategy: Strategy::Dense,
            ..cfg.clone()
        },
    )?;
    let ccq = run_pipeline(
        pyr,
        w,
        &QueryConfig {
            strategy: Strategy::Ccq,
            ..cfg.clone()
        },
    )?;
    let mut failures = Vec::new();
    let mut compared = 0;
    for (l, lr) in &ccq.levels {
        let Some(s) = sparse_of(&lr.output) else { continue };
        let HeadOutput::Dense(d) = &dense.levels[l].output else {
            failures.push(format!("P{l} dense reference missing"));
            continue;
        };
        let reference = read_at_keys(d, s.keys())?;
        compared += s.keys().len();
        if bits(s.cls_logits.data()) != bits(reference.cls_logits.data())
            || bits(s.reg_deltas.data()) != bits(reference.reg_deltas.data())
            || bits(s.query_logits.data()) != bits(reference.query_logits.data())
        {
            failures.push(format!("P{l} outputs differ"));
        }
    }
    let anchors = AnchorConfig {
        base: DEFAULT_ANCHOR_BASE,
        num_anchors: w.num_anchors(),
    };
    let nms = NmsConfig::default();
    let dd = detections(&dense, w.num_classes(), &anchors, &nms)?;
    let cd = detections(&ccq, w.num_classes(), &anchors, &nms)?;
    if dd != cd {
        failures.push(format!("detections differ: dense {} vs ccq {}", dd.len(), cd.len()));
    }
    Ok(CheckResult {
        name: "ccq_exactness",
        passed: failures.is_empty(),
        detail: if failures.is_empty() {
            format!(
                "{compared} kept positions bitwise equal, {} detections identical",
                dd.len()
            )
        } else {
            failures.join("; ")
        },
    })
}

/// Keys whose Chebyshev radius-`r` neighborhood, clipped to the map, is fully
/// active. On those keys submanifold and dense convolution see the same inputs
/// through `r` layers.
pub fn saturated_keys(keys: &KeySet, r: usize) -> Vec<GridPos> {
    let (h, w) = (keys.height() as i64, keys.width() as i64);
    let r = r as i64;
    keys.positions()
        .iter()
        .copied()
        .filter(|p| {
            let (x, y) = (p.x as i64, p.y as i64);
            ((y - r).max(0)..=(y + r).min(h - 1)).all(|ny| {
                ((x - r).max(0)..=(x + r).min(w - 1)).all(|nx| keys.contains(GridPos::new(nx as u32, ny as u32)))
            })
        })
        .collect()
}

/// Receptive radius of the head: four tower convs plus the predictor.
pub const HEAD_RADIUS: usize = 5;

/// CSQ at σ = 0 activates every reachable position; sparse rows must then
/// match the dense head.
pub fn check_csq_sigma0(
    pyr: &FeaturePyramid,
    w: &HeadWeights,
    cfg: &QueryConfig,
    fault: Option<Fault>,
) -> Result<CheckResult> {
    let cfg0 = QueryConfig {
        sigma: 0.0,
        strategy: Strategy::Csq,
        ..cfg.clone()
    };
    let csq = run_pipeline_inner(pyr, w, &cfg0, fault != Some(Fault::SparseSkipBias))?;
    let mut worst = 0.0f64;
    let mut compared = 0usize;
    for (l, lr) in &csq.levels {
        let Some(s) = sparse_of(&lr.output) else { continue };
        let keys = s.keys();
        let subset = if keys.covers_level() {
            keys.clone()
        } else {
            KeySet::new(*l, keys.height(), keys.width(), saturated_keys(keys, HEAD_RADIUS))?
        };
        if subset.is_empty() {
            continue;
        }
        let dense = run_dense_head(pyr.level(*l)?, w)?;
        let reference = read_at_keys(&dense, &subset)?;
        let pick = |f: &SparseFeature| -> Vec<f32> {
            subset
                .positions()
                .iter()
                .flat_map(|&p| f.row_at(p).expect("subset of keys").to_vec())
                .collect()
        };
        compared += subset.len();
        worst = worst
            .max(max_relative_error(&pick(&s.cls_logits), reference.cls_logits.data()))
            .max(max_relative_error(&pick(&s.reg_deltas), reference.reg_deltas.data()))
            .max(max_relative_error(
                &pick(&s.query_logits),
                reference.query_logits.data(),
            ));
    }
    Ok(CheckResult {
        name: "csq_sigma0",
        passed: worst <= REL_TOLERANCE && compared > 0,
        detail: format!("{compared} positions, max relative error {worst:.3e} (tolerance {REL_TOLERANCE:.0e})"),
    })
}

/// Evenly spread positions at least `margin` cells from every border.
pub fn interior_sample(height: usize, width: usize, margin: usize, per_axis: usize) -> Vec<GridPos> {
    if height < 2 * margin + 1 || width < 2 * margin + 1 || per_axis == 0 {
        return Vec::new();
    }
    let axis = |n: usize| -> Vec<u32> {
        let (lo, hi) = (margin, n - 1 - margin);
        let steps = (per_axis - 1).max(1);
        let mut v: Vec<u32> = (0..per_axis).map(|i| (lo + (hi - lo) * i / steps) as u32).collect();
        v.dedup();
        v
    };
    let (ys, xs) = (axis(height), axis(width));
    ys.iter()
        .flat_map(|&y| xs.iter().map(move |&x| GridPos::new(x, y)))
        .collect()
}

/// Crop-query centers at interior keys match the dense head.
pub fn check_cq_interior(pyr: &FeaturePyramid, w: &HeadWeights, cfg: &QueryConfig) -> Result<CheckResult> {
    let cq = run_pipeline(
        pyr,
        w,
        &QueryConfig {
            strategy: Strategy::Cq,
            ..cfg.clone()
        },
    )?;
    let margin = cfg.cq_patch / 2;
    let mut worst = 0.0f64;
    let mut compared = 0usize;
    for (l, lr) in &cq.levels {
        let Some(s) = sparse_of(&lr.output) else { continue };
        let (h, wd) = (lr.height, lr.width);
        let interior = |p: &GridPos| {
            let (x, y) = (p.x as usize, p.y as usize);
            x >= margin && y >= margin && x + margin < wd && y + margin < h
        };
        let mut positions: Vec<GridPos> = s.keys().positions().iter().copied().filter(interior).collect();
        positions.extend(interior_sample(h, wd, margin, 3));
        let keys = KeySet::new(*l, h, wd, positions)?;
        if keys.is_empty() {
            continue;
        }
        let feature = pyr.level(*l)?;
        let crops = run_crop_head(feature, &keys, w, cfg.cq_patch)?;
        let reference = read_at_keys(&run_dense_head(feature, w)?, &keys)?;
        compared += keys.len();
        worst = worst
            .max(max_relative_error(crops.cls_logits.data(), reference.cls_logits.data()))
            .max(max_relative_error(crops.reg_deltas.data(), reference.reg_deltas.data()))
            .max(max_relative_error(
                crops.query_logits.data(),
                reference.query_logits.data(),
            ));
    }
    Ok(CheckResult {
        name: "cq_interior",
        passed: worst <= REL_TOLERANCE && compared > 0,
        detail: format!("{compared} interior keys, max relative error {worst:.3e}"),
    })
}

/// Query targets against a brute-force integer scan over every cell and center.
pub fn brute_force_query_target(gt: &GroundTruthSet, l: u8, height: usize, width: usize, base: f64) -> Vec<f32> {
    let limit = level_scale(l, base);
    let threshold = grid_threshold(l, base);
    let stride = (1u64 << l) as f64;
    let mut out = vec![0.0f32; height * width];
    for y in 0..height {
        for x in 0..width {
            for o in &gt.objects {
                if o.w.max(o.h) >= limit {
                    continue;
                }
                let (cx, cy) = ((o.cx / stride).floor() as i64, (o.cy / stride).floor() as i64);
                let (dx, dy) = (x as i64 - cx, y as i64 - cy);
                if (((dx * dx + dy * dy) as f64).sqrt()) < threshold {
                    out[y * width + x] = 1.0;
                }
            }
        }
    }
    out
}

pub fn check_targets(pyr: &FeaturePyramid, gt: &GroundTruthSet) -> CheckResult {
    let mut mismatched = Vec::new();
    let mut positives = 0usize;
    for &l in pyr.levels().keys() {
        let (h, w) = pyr.dims(l);
        let v = level_query_target(gt, l, h, w, DEFAULT_ANCHOR_BASE);
        let oracle = brute_force_query_target(gt, l, h, w, DEFAULT_ANCHOR_BASE);
        positives += oracle.iter().filter(|&&v| v == 1.0).count();
        if v.data() != oracle.as_slice() {
            mismatched.push(format!("P{l}"));
        }
    }
    CheckResult {
        name: "targets_bruteforce",
        passed: mismatched.is_empty(),
        detail: if mismatched.is_empty() {
            format!(
                "{} objects, {positives} positive cells, all levels exact",
                gt.objects.len()
            )
        } else {
            format!("mismatch on {}", mismatched.join(", "))
        },
    }
}

/// Full-coverage sparse cost equals the in-bounds dense count on every level,
/// never exceeds the nominal dense count, and CSQ counters follow the model.
pub fn check_flops_identity(pyr: &FeaturePyramid, w: &HeadWeights, cfg: &QueryConfig) -> Result<CheckResult> {
    let (c, a, k) = (w.channels(), w.num_anchors(), w.num_classes());
    let mut failures = Vec::new();
    for &l in pyr.levels().keys() {
        let (h, wd) = pyr.dims(l);
        let full = KeySet::full(l, h, wd);
        let sparse = head_flops_sparse(full.len(), build_rulebook(&full).len(), c, a, k);
        if sparse != head_flops_dense_in_bounds(h, wd, c, a, k) || sparse > head_flops_dense(h, wd, c, a, k) {
            failures.push(format!("P{l} full-coverage count"));
        }
    }
    let csq = run_pipeline(
        pyr,
        w,
        &QueryConfig {
            strategy: Strategy::Csq,
            ..cfg.clone()
        },
    )?;
    for lr in csq.levels.values() {
        let expected = match &lr.computed_keys {
            Some(keys) => head_flops_sparse(keys.len(), build_rulebook(keys).len(), c, a, k),
            None => head_flops_dense(lr.height, lr.width, c, a, k),
        };
        if lr.flops != expected {
            failures.push(format!("P{} run counter", lr.level));
        }
        if lr.flops > head_flops_dense(lr.height, lr.width, c, a, k) {
            failures.push(format!("P{} sparse exceeds dense", lr.level));
        }
    }
    Ok(CheckResult {
        name: "flops_identity",
        passed: failures.is_empty(),
        detail: if failures.is_empty() {
            format!("{} levels consistent", pyr.levels().len())
        } else {
            failures.join("; ")
        },
    })
}

/// Runs every check. Only the CSQ check honors `opts.fault`.
pub fn verify(
    pyr: &FeaturePyramid,
    w: &HeadWeights,
    gt: &GroundTruthSet,
    opts: &VerifyOptions,
) -> Result<VerifyReport> {
    let cfg = &opts.query;
    let checks = vec![
        check_ccq_exactness(pyr, w, cfg)?,
        check_csq_sigma0(pyr, w, cfg, opts.fault)?,
        check_cq_interior(pyr, w, cfg)?,
        check_targets(pyr, gt),
        check_flops_identity(pyr, w, cfg)?,
    ];
    Ok(VerifyReport {
        schema: SCHEMA,
        passed: checks.iter().all(|c| c.passed),
        checks,
        notes: Vec::new(),
    })
}
