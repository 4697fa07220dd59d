//! Run configuration: JSON config file merged under command-line flags.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use qd_core::analysis::{sigma_sweep, MIN_REPEATS, MIN_WARMUP};
use qd_core::model::{BlobSpec, MAX_LEVEL, MIN_LEVEL};
use qd_core::postproc::{AnchorConfig, NmsConfig};
use qd_core::targets::DEFAULT_ANCHOR_BASE;
use qd_core::{QueryConfig, Strategy};

use crate::CliError;

/// Every option any subcommand reads. All fields are optional so the same
/// type describes both a config file and the flags given on the command line.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartialConfig {
    pub fixture: Option<PathBuf>,
    pub pyramid: Option<PathBuf>,
    pub weights: Option<PathBuf>,
    pub gt: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub height: Option<usize>,
    pub width: Option<usize>,
    pub channels: Option<usize>,
    pub num_classes: Option<usize>,
    pub num_anchors: Option<usize>,
    pub l_min: Option<u8>,
    pub l_max: Option<u8>,
    pub blobs: Option<Vec<BlobSpec>>,
    pub num_blobs: Option<usize>,
    pub strategy: Option<Strategy>,
    pub sigma: Option<f64>,
    pub start_level: Option<u8>,
    pub min_level: Option<u8>,
    pub cq_patch: Option<usize>,
    pub strategies: Option<Vec<Strategy>>,
    pub sigmas: Option<Vec<f64>>,
    pub repeats: Option<usize>,
    pub warmup: Option<usize>,
    pub anchor_base: Option<f64>,
    pub score_threshold: Option<f64>,
    pub iou_threshold: Option<f64>,
    pub top_k: Option<usize>,
    pub beta_end: Option<f64>,
}

macro_rules! overlay {
    ($hi:expr, $lo:expr, $($f:ident),* $(,)?) => {
        PartialConfig { $($f: $hi.$f.or($lo.$f),)* }
    };
}

impl PartialConfig {
    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let bytes = std::fs::read(path).map_err(|e| CliError::Core(qd_core::Error::io(path, e)))?;
        Self::from_json(&bytes).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self, serde_json::Error> {
        serde_json::from_slice(bytes)
    }

    /// Fields set in `self` win over those in `lower`.
    pub fn over(self, lower: PartialConfig) -> PartialConfig {
        overlay!(
            self,
            lower,
            fixture,
            pyramid,
            weights,
            gt,
            out,
            seed,
            height,
            width,
            channels,
            num_classes,
            num_anchors,
            l_min,
            l_max,
            blobs,
            num_blobs,
            strategy,
            sigma,
            start_level,
            min_level,
            cq_patch,
            strategies,
            sigmas,
            repeats,
            warmup,
            anchor_base,
            score_threshold,
            iou_threshold,
            top_k,
            beta_end,
        )
    }
}

/// Fully resolved options. Paths stay optional; each subcommand demands the
/// ones it needs.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunConfig {
    pub fixture: Option<PathBuf>,
    pub pyramid: Option<PathBuf>,
    pub weights: Option<PathBuf>,
    pub gt: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub num_classes: usize,
    pub num_anchors: usize,
    pub l_min: u8,
    pub l_max: u8,
    /// Explicit blobs; when absent `num_blobs` seeded blobs are drawn.
    pub blobs: Option<Vec<BlobSpec>>,
    pub num_blobs: usize,
    pub query: QueryConfig,
    pub strategies: Vec<Strategy>,
    pub sigmas: Vec<f64>,
    pub repeats: usize,
    pub warmup: usize,
    pub anchors: AnchorConfig,
    pub nms: NmsConfig,
    pub beta_end: f64,
}

impl RunConfig {
    /// Fills defaults and validates.
    pub fn resolve(p: PartialConfig) -> Result<Self, CliError> {
        let q = QueryConfig::default();
        let nms = NmsConfig::default();
        let num_anchors = p.num_anchors.unwrap_or(1);
        let query = QueryConfig {
            sigma: p.sigma.unwrap_or(q.sigma),
            start_level: p.start_level.unwrap_or(q.start_level),
            min_level: p.min_level.unwrap_or(q.min_level),
            strategy: p.strategy.unwrap_or(q.strategy),
            cq_patch: p.cq_patch.unwrap_or(q.cq_patch),
        };
        let cfg = Self {
            fixture: p.fixture,
            pyramid: p.pyramid,
            weights: p.weights,
            gt: p.gt,
            out: p.out,
            seed: p.seed.unwrap_or(0),
            height: p.height.unwrap_or(512),
            width: p.width.unwrap_or(512),
            channels: p.channels.unwrap_or(16),
            num_classes: p.num_classes.unwrap_or(4),
            num_anchors,
            l_min: p.l_min.unwrap_or(MIN_LEVEL),
            l_max: p.l_max.unwrap_or(MAX_LEVEL),
            blobs: p.blobs,
            num_blobs: p.num_blobs.unwrap_or(8),
            strategies: p.strategies.unwrap_or_else(|| vec![query.strategy]),
            query,
            sigmas: p.sigmas.unwrap_or_else(sigma_sweep),
            repeats: p.repeats.unwrap_or(MIN_REPEATS),
            warmup: p.warmup.unwrap_or(MIN_WARMUP),
            anchors: AnchorConfig {
                base: p.anchor_base.unwrap_or(DEFAULT_ANCHOR_BASE),
                num_anchors,
            },
            nms: NmsConfig {
                score_threshold: p.score_threshold.unwrap_or(nms.score_threshold),
                iou_threshold: p.iou_threshold.unwrap_or(nms.iou_threshold),
                top_k: p.top_k.unwrap_or(nms.top_k),
            },
            beta_end: p.beta_end.unwrap_or(3.0),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let usage = |m: String| Err(CliError::Usage(m));
        self.query.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        for l in [self.l_min, self.l_max, self.query.start_level, self.query.min_level] {
            if !(MIN_LEVEL..=MAX_LEVEL).contains(&l) {
                return usage(format!("level P{l} outside P{MIN_LEVEL}..P{MAX_LEVEL}"));
            }
        }
        if self.l_min > self.l_max {
            return usage(format!("l_min P{} above l_max P{}", self.l_min, self.l_max));
        }
        if self.height == 0 || self.width == 0 {
            return usage("image height and width must be positive".into());
        }
        if self.channels == 0 || self.num_classes == 0 || self.num_anchors == 0 {
            return usage("channels, num_classes and num_anchors must be positive".into());
        }
        if let Some(s) = self.sigmas.iter().find(|s| !(0.0..=1.0).contains(*s)) {
            return usage(format!("sweep sigma {s} outside [0, 1]"));
        }
        if self.strategies.is_empty() || self.sigmas.is_empty() {
            return usage("bench needs at least one strategy and one sigma".into());
        }
        if self.repeats < MIN_REPEATS {
            return usage(format!("repeats must be at least {MIN_REPEATS}, got {}", self.repeats));
        }
        if self.warmup < MIN_WARMUP {
            return usage(format!("warmup must be at least {MIN_WARMUP}, got {}", self.warmup));
        }
        if !(self.anchors.base.is_finite() && self.anchors.base > 0.0) {
            return usage(format!("anchor base {} must be positive", self.anchors.base));
        }
        if !(0.0..=1.0).contains(&self.nms.score_threshold) || !(0.0..=1.0).contains(&self.nms.iou_threshold) {
            return usage("score and IoU thresholds must lie in [0, 1]".into());
        }
        if !(self.beta_end.is_finite() && self.beta_end > 0.0) {
            return usage(format!("beta_end {} must be positive", self.beta_end));
        }
        for (i, b) in self.blobs.iter().flatten().enumerate() {
            let finite = [b.cx, b.cy, b.size].iter().all(|v| v.is_finite()) && b.amplitude.is_finite();
            if !finite || b.cx < 0.0 || b.cy < 0.0 || b.size <= 0.0 {
                return usage(format!("blob {i} needs a finite non-negative center and positive size"));
            }
            if b.cx >= self.width as f64 || b.cy >= self.height as f64 {
                return usage(format!("blob {i} center ({}, {}) outside the image", b.cx, b.cy));
            }
            if b.class as usize >= self.num_classes {
                return usage(format!(
                    "blob {i} class {} >= num_classes {}",
                    b.class, self.num_classes
                ));
            }
        }
        Ok(())
    }
}

/// Parses `cx,cy,size,class[,amplitude]`.
pub fn parse_blob(s: &str) -> Result<BlobSpec, String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if !(4..=5).contains(&parts.len()) {
        return Err(format!("expected cx,cy,size,class[,amplitude], got {s:?}"));
    }
    let num = |i: usize| parts[i].parse::<f64>().map_err(|e| format!("{:?}: {e}", parts[i]));
    let mut blob = BlobSpec::new(
        num(0)?,
        num(1)?,
        num(2)?,
        parts[3].parse().map_err(|e| format!("class {:?}: {e}", parts[3]))?,
    );
    if parts.len() == 5 {
        blob.amplitude = parts[4].parse().map_err(|e| format!("amplitude {:?}: {e}", parts[4]))?;
    }
    Ok(blob)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_win_over_file() {
        let file = PartialConfig::from_json(br#"{"sigma":0.3,"start_level":5,"seed":9}"#).unwrap();
        let flags = PartialConfig {
            sigma: Some(0.5),
            ..Default::default()
        };
        let cfg = RunConfig::resolve(flags.over(file)).unwrap();
        assert_eq!(cfg.query.sigma, 0.5);
        assert_eq!(cfg.query.start_level, 5);
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.query.min_level, 2);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(PartialConfig::from_json(br#"{"sigma":0.3,"sigmaa":1}"#).is_err());
    }

    #[test]
    fn contradictions_are_usage_errors() {
        let p = PartialConfig {
            min_level: Some(5),
            start_level: Some(4),
            ..Default::default()
        };
        assert!(matches!(RunConfig::resolve(p), Err(CliError::Usage(_))));
        let p = PartialConfig {
            repeats: Some(1),
            ..Default::default()
        };
        assert!(matches!(RunConfig::resolve(p), Err(CliError::Usage(_))));
    }

    #[test]
    fn blob_syntax() {
        let b = parse_blob("100,100,12,2").unwrap();
        assert_eq!((b.cx, b.cy, b.size, b.class, b.amplitude), (100.0, 100.0, 12.0, 2, 4.0));
        assert_eq!(parse_blob("1,2,3,0,7.5").unwrap().amplitude, 7.5);
        assert!(parse_blob("1,2,3").is_err());
        assert!(parse_blob("1,2,x,0").is_err());
    }
}
