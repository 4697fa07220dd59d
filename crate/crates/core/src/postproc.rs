//! Anchor decoding, score filtering and non-maximum suppression.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::HeadOutput;
use crate::query::CascadeResult;
use crate::sparse::GridPos;
use crate::tensor::sigmoid_scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnchorConfig {
    pub base: f64,
    pub num_anchors: usize,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        Self {
            base: 4.0,
            num_anchors: 1,
        }
    }
}

/// Anchor as center and size, image pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Anchor {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl AnchorConfig {
    /// Square anchor `a` at grid cell `(x, y)` of level `l`. Anchor `a` of `A`
    /// has side `base · 2^l · 2^(a/A)`.
    pub fn anchor(&self, l: u8, x: u32, y: u32, a: usize) -> Anchor {
        let stride = (1u64 << l) as f64;
        let side = self.base * stride * 2f64.powf(a as f64 / self.num_anchors as f64);
        Anchor {
            cx: (x as f64 + 0.5) * stride,
            cy: (y as f64 + 0.5) * stride,
            w: side,
            h: side,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: [f32; 4],
    pub score: f32,
    pub class: u32,
    pub level: u8,
}

/// Applies `(dx, dy, dw, dh)` to an anchor, returning `[x1, y1, x2, y2]`.
pub fn decode_box(anchor: &Anchor, deltas: [f32; 4]) -> Result<[f32; 4]> {
    if deltas.iter().any(|d| !d.is_finite()) {
        return Err(Error::validation(format!("non-finite box deltas {deltas:?}")));
    }
    let [dx, dy, dw, dh] = deltas.map(|d| d as f64);
    let cx = anchor.cx + dx * anchor.w;
    let cy = anchor.cy + dy * anchor.h;
    let w = dw.exp() * anchor.w;
    let h = dh.exp() * anchor.h;
    let b = [
        (cx - 0.5 * w) as f32,
        (cy - 0.5 * h) as f32,
        (cx + 0.5 * w) as f32,
        (cy + 0.5 * h) as f32,
    ];
    if b.iter().any(|v| !v.is_finite()) {
        return Err(Error::validation(format!("box deltas {deltas:?} overflow")));
    }
    Ok(b)
}

/// Inverse of [`decode_box`].
pub fn encode_box(anchor: &Anchor, b: [f32; 4]) -> [f32; 4] {
    let [x1, y1, x2, y2] = b.map(|v| v as f64);
    let (w, h) = (x2 - x1, y2 - y1);
    let (cx, cy) = (x1 + 0.5 * w, y1 + 0.5 * h);
    [
        ((cx - anchor.cx) / anchor.w) as f32,
        ((cy - anchor.cy) / anchor.h) as f32,
        (w / anchor.w).ln() as f32,
        (h / anchor.h).ln() as f32,
    ]
}

pub fn iou(a: &[f32; 4], b: &[f32; 4]) -> f64 {
    let area = |r: &[f32; 4]| ((r[2] - r[0]).max(0.0) as f64) * ((r[3] - r[1]).max(0.0) as f64);
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0) as f64;
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0) as f64;
    let inter = iw * ih;
    let union = area(a) + area(b) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NmsConfig {
    pub score_threshold: f64,
    pub iou_threshold: f64,
    pub top_k: usize,
}

impl Default for NmsConfig {
    fn default() -> Self {
        Self {
            score_threshold: 0.05,
            iou_threshold: 0.5,
            top_k: 100,
        }
    }
}

/// Descending score, then ascending class, x1, y1, x2, y2, level.
fn canonical_order(a: &Detection, b: &Detection) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.class.cmp(&b.class))
        .then(a.bbox[0].total_cmp(&b.bbox[0]))
        .then(a.bbox[1].total_cmp(&b.bbox[1]))
        .then(a.bbox[2].total_cmp(&b.bbox[2]))
        .then(a.bbox[3].total_cmp(&b.bbox[3]))
        .then(a.level.cmp(&b.level))
}

/// Greedy per-class suppression. A detection is dropped when its IoU with
/// an already kept detection of the same class exceeds `iou_threshold`.
pub fn nms(mut dets: Vec<Detection>, cfg: &NmsConfig) -> Vec<Detection> {
    dets.retain(|d| d.score > cfg.score_threshold as f32);
    dets.sort_by(canonical_order);
    let mut kept: Vec<Detection> = Vec::new();
    for d in dets {
        if kept.len() >= cfg.top_k {
            break;
        }
        let suppressed = kept
            .iter()
            .any(|k| k.class == d.class && iou(&k.bbox, &d.bbox) > cfg.iou_threshold);
        if !suppressed {
            kept.push(d);
        }
    }
    kept
}

/// Concatenates per-level detections and suppresses across levels.
pub fn merge_levels(per_level: Vec<Vec<Detection>>, cfg: &NmsConfig) -> Vec<Detection> {
    nms(per_level.into_iter().flatten().collect(), cfg)
}

/// Scores above the threshold at one level, decoded to boxes.
///
/// Dense outputs are read at every position, sparse ones only at their keys.
pub fn detect_level(
    output: &HeadOutput,
    level: u8,
    num_classes: usize,
    anchors: &AnchorConfig,
    score_threshold: f64,
) -> Result<Vec<Detection>> {
    let a_count = anchors.num_anchors;
    let mut dets = Vec::new();
    let mut visit = |p: GridPos, cls: &dyn Fn(usize) -> f32, reg: &dyn Fn(usize) -> f32| -> Result<()> {
        for a in 0..a_count {
            for k in 0..num_classes {
                let score = sigmoid_scalar(cls(a * num_classes + k));
                if score <= score_threshold as f32 {
                    continue;
                }
                let deltas = [reg(a * 4), reg(a * 4 + 1), reg(a * 4 + 2), reg(a * 4 + 3)];
                let bbox = decode_box(&anchors.anchor(level, p.x, p.y, a), deltas)?;
                if bbox[2] > bbox[0] && bbox[3] > bbox[1] {
                    dets.push(Detection {
                        bbox,
                        score,
                        class: k as u32,
                        level,
                    });
                }
            }
        }
        Ok(())
    };
    match output {
        HeadOutput::Dense(out) => {
            if out.cls_logits.channels() != a_count * num_classes || out.reg_deltas.channels() != a_count * 4 {
                return Err(Error::config("head output channels disagree with anchor config"));
            }
            for y in 0..out.cls_logits.height() {
                for x in 0..out.cls_logits.width() {
                    visit(
                        GridPos::new(x as u32, y as u32),
                        &|c| out.cls_logits.get(c, y, x),
                        &|c| out.reg_deltas.get(c, y, x),
                    )?;
                }
            }
        }
        HeadOutput::Sparse(out) => {
            if out.cls_logits.channels() != a_count * num_classes || out.reg_deltas.channels() != a_count * 4 {
                return Err(Error::config("head output channels disagree with anchor config"));
            }
            for (i, &p) in out.keys().positions().iter().enumerate() {
                let (cls, reg) = (out.cls_logits.row(i), out.reg_deltas.row(i));
                visit(p, &|c| cls[c], &|c| reg[c])?;
            }
        }
    }
    Ok(dets)
}

/// Final detections of a pipeline run.
pub fn detections(
    result: &CascadeResult,
    num_classes: usize,
    anchors: &AnchorConfig,
    cfg: &NmsConfig,
) -> Result<Vec<Detection>> {
    let per_level = result
        .levels
        .values()
        .map(|lr| detect_level(&lr.output, lr.level, num_classes, anchors, cfg.score_threshold))
        .collect::<Result<Vec<_>>>()?;
    Ok(merge_levels(per_level, cfg))
}
