//! Analytic head cost model and the wall-clock benchmark harness.
//!
//! Costs are multiply-accumulates (MACs). Bias additions are counted
//! separately and never folded into MAC totals.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{level_dims, FeaturePyramid, HeadWeights, MAX_LEVEL, MIN_LEVEL, TOWER_DEPTH};
use crate::query::{run_pipeline, QueryConfig, Strategy};

const BRANCHES: u64 = 3;
const TAPS: u64 = 9;

fn predictor_outputs(a: usize, k: usize) -> u64 {
    (a * k + a * 4 + 1) as u64
}

/// MACs for one (position, kernel tap) pair summed over every head layer.
fn macs_per_pair(c: usize, a: usize, k: usize) -> u64 {
    let c = c as u64;
    BRANCHES * TOWER_DEPTH as u64 * c * c + c * predictor_outputs(a, k)
}

/// Nominal dense head cost on an `h × w` level: every position pays all nine
/// taps of every layer, padding included.
///
/// `h·w · [3·4·9C² + 9C·(A·K + 4A + 1)]`
pub fn head_flops_dense(h: usize, w: usize, c: usize, a: usize, k: usize) -> u64 {
    (h * w) as u64 * TAPS * macs_per_pair(c, a, k)
}

/// Number of (position, tap) pairs whose tap lands inside an `h × w` map.
pub fn in_bounds_pairs(h: usize, w: usize) -> u64 {
    if h == 0 || w == 0 {
        return 0;
    }
    (3 * h as u64 - 2) * (3 * w as u64 - 2)
}

/// Dense head cost counting only taps that land inside the map.
pub fn head_flops_dense_in_bounds(h: usize, w: usize, c: usize, a: usize, k: usize) -> u64 {
    in_bounds_pairs(h, w) * macs_per_pair(c, a, k)
}

/// Sparse head cost: each rulebook entry costs `C²` per tower layer and
/// `C` per predictor output. The same rulebook serves all layers.
pub fn head_flops_sparse(num_keys: usize, rulebook_entries: usize, c: usize, a: usize, k: usize) -> u64 {
    debug_assert!(rulebook_entries <= 9 * num_keys);
    if num_keys == 0 {
        return 0;
    }
    rulebook_entries as u64 * macs_per_pair(c, a, k)
}

/// Bias additions for `positions` evaluated outputs.
pub fn head_bias_adds(positions: usize, c: usize, a: usize, k: usize) -> u64 {
    positions as u64 * (BRANCHES * TOWER_DEPTH as u64 * c as u64 + predictor_outputs(a, k))
}

/// Extra head cost of adding P2 relative to the P3–P7 head.
pub fn p2_cost_increase(image_h: usize, image_w: usize, c: usize, a: usize, k: usize) -> Result<f64> {
    let cost = |l| {
        let (h, w) = level_dims(image_h, image_w, l);
        head_flops_dense(h, w, c, a, k)
    };
    let base: u64 = (3..=7).map(cost).sum();
    if base == 0 {
        return Err(Error::config(format!(
            "image {image_h}x{image_w} has empty P3..P7 levels"
        )));
    }
    Ok(cost(2) as f64 / base as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LevelFlops {
    pub level: u8,
    pub height: usize,
    pub width: usize,
    pub dense_macs: u64,
    pub dense_in_bounds_macs: u64,
    pub bias_adds: u64,
    /// Fraction of the P2..P7 dense head total spent on this level.
    pub share: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FlopsReport {
    pub schema: &'static str,
    pub image: [usize; 2],
    pub channels: usize,
    pub num_anchors: usize,
    pub num_classes: usize,
    pub levels: Vec<LevelFlops>,
    pub total_dense_macs: u64,
    pub total_without_p2_macs: u64,
    pub p2_increase: f64,
}

pub fn flops_report(image_h: usize, image_w: usize, c: usize, a: usize, k: usize) -> Result<FlopsReport> {
    let mut levels = Vec::new();
    for l in MIN_LEVEL..=MAX_LEVEL {
        let (h, w) = level_dims(image_h, image_w, l);
        levels.push(LevelFlops {
            level: l,
            height: h,
            width: w,
            dense_macs: head_flops_dense(h, w, c, a, k),
            dense_in_bounds_macs: head_flops_dense_in_bounds(h, w, c, a, k),
            bias_adds: head_bias_adds(h * w, c, a, k),
            share: 0.0,
        });
    }
    let total: u64 = levels.iter().map(|l| l.dense_macs).sum();
    for l in &mut levels {
        l.share = if total == 0 {
            0.0
        } else {
            l.dense_macs as f64 / total as f64
        };
    }
    let without_p2 = total - levels[0].dense_macs;
    Ok(FlopsReport {
        schema: crate::SCHEMA,
        image: [image_h, image_w],
        channels: c,
        num_anchors: a,
        num_classes: k,
        levels,
        total_dense_macs: total,
        total_without_p2_macs: without_p2,
        p2_increase: p2_cost_increase(image_h, image_w, c, a, k)?,
    })
}

pub const MIN_REPEATS: usize = 5;
pub const MIN_WARMUP: usize = 2;

/// σ values 0.05, 0.10, …, 0.95.
pub fn sigma_sweep() -> Vec<f64> {
    (1..=19).map(|i| i as f64 / 20.0).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LevelBench {
    pub level: u8,
    /// Positions the head was evaluated at: computed keys on queried
    /// levels, the full map on dense ones.
    pub keys: usize,
    pub flops: u64,
    pub millis: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchResult {
    pub strategy: Strategy,
    pub sigma: f64,
    pub start_level: u8,
    pub repeats: usize,
    pub warmup: usize,
    /// Median end-to-end wall time.
    pub millis: f64,
    /// Fastest end-to-end run. Stable on hosts whose run times are bimodal.
    pub min_millis: f64,
    pub levels: Vec<LevelBench>,
    /// Set when the clock's resolution exceeds 1% of the measured span.
    pub timer_warning: bool,
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Smallest observable nonzero step of the monotonic clock, in milliseconds.
pub fn timer_resolution_millis() -> f64 {
    let mut best = f64::INFINITY;
    for _ in 0..200 {
        let t0 = Instant::now();
        let mut t1 = Instant::now();
        while t1 == t0 {
            t1 = Instant::now();
        }
        best = best.min((t1 - t0).as_secs_f64() * 1e3);
    }
    best
}

struct Samples {
    totals: Vec<f64>,
    per_level: Vec<Vec<f64>>,
    last: Option<crate::query::CascadeResult>,
}

/// Times configurations in interleaved rounds: `warmup` discarded rounds,
/// then `repeats` timed rounds, each running every configuration once in a
/// seeded shuffled order. Each configuration reports the median of its timed
/// runs. Interleaving spreads slow periods of the host over all
/// configurations instead of one.
pub fn run_benchmark(
    pyr: &FeaturePyramid,
    w: &HeadWeights,
    configs: &[QueryConfig],
    repeats: usize,
    warmup: usize,
) -> Result<Vec<BenchResult>> {
    if repeats < MIN_REPEATS {
        return Err(Error::config(format!(
            "repeats must be at least {MIN_REPEATS}, got {repeats}"
        )));
    }
    if warmup < MIN_WARMUP {
        return Err(Error::config(format!(
            "warmup must be at least {MIN_WARMUP}, got {warmup}"
        )));
    }
    for cfg in configs {
        cfg.validate()?;
    }
    let resolution = timer_resolution_millis();
    for _ in 0..warmup {
        for cfg in configs {
            run_pipeline(pyr, w, cfg)?;
        }
    }
    let mut samples: Vec<Samples> = configs
        .iter()
        .map(|_| Samples {
            totals: Vec::with_capacity(repeats),
            per_level: Vec::new(),
            last: None,
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut order: Vec<usize> = (0..configs.len()).collect();
    for _ in 0..repeats {
        order.shuffle(&mut rng);
        for &i in &order {
            let (cfg, s) = (&configs[i], &mut samples[i]);
            let t0 = Instant::now();
            let res = run_pipeline(pyr, w, cfg)?;
            s.totals.push(t0.elapsed().as_secs_f64() * 1e3);
            if s.per_level.is_empty() {
                s.per_level = vec![Vec::with_capacity(repeats); res.levels.len()];
            }
            for (slot, lr) in s.per_level.iter_mut().zip(res.levels.values().rev()) {
                slot.push(lr.millis);
            }
            s.last = Some(res);
        }
    }
    let mut results = Vec::with_capacity(configs.len());
    for (cfg, mut s) in configs.iter().zip(samples) {
        let res = s.last.take().expect("repeats >= 5");
        let levels = res
            .levels
            .values()
            .rev()
            .zip(s.per_level.iter_mut())
            .map(|(lr, times)| LevelBench {
                level: lr.level,
                keys: lr.computed_keys.as_ref().map_or(lr.height * lr.width, |k| k.len()),
                flops: lr.flops,
                millis: median(times),
            })
            .collect();
        let millis = median(&mut s.totals);
        let min_millis = s.totals[0];
        results.push(BenchResult {
            strategy: cfg.strategy,
            sigma: cfg.sigma,
            start_level: cfg.start_level,
            repeats,
            warmup,
            millis,
            min_millis,
            levels,
            timer_warning: resolution > 0.01 * millis,
        });
    }
    Ok(results)
}

/// One CSV row per (configuration, level): `strategy,sigma,level,keys,flops,millis`.
pub fn bench_csv(results: &[BenchResult]) -> String {
    let mut out = String::from("strategy,sigma,level,keys,flops,millis\n");
    for r in results {
        for l in &r.levels {
            out.push_str(&format!(
                "{},{:.2},{},{},{},{:.4}\n",
                r.strategy, r.sigma, l.level, l.keys, l.flops, l.millis
            ));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sparse::{build_rulebook, KeySet};

    #[test]
    fn single_position_cost() {
        assert_eq!(head_flops_dense(1, 1, 16, 1, 4), 28944);
        assert_eq!(head_flops_dense(0, 5, 16, 1, 4), 0);
    }

    #[test]
    fn quadratic_scaling_between_levels() {
        for (h, w) in [(64, 64), (32, 48), (8, 2)] {
            assert_eq!(
                head_flops_dense(h, w, 16, 1, 4),
                4 * head_flops_dense(h / 2, w / 2, 16, 1, 4)
            );
        }
    }

    #[test]
    fn sparse_cost_edge_cases() {
        assert_eq!(head_flops_sparse(0, 0, 16, 1, 4), 0);
        // Isolated keys: only the center tap fires, a ninth of the dense cost.
        let keys = 10;
        let sparse = head_flops_sparse(keys, keys, 16, 1, 4);
        assert_eq!(sparse * 9, head_flops_dense(1, keys, 16, 1, 4));
    }

    #[test]
    fn in_bounds_pairs_match_rulebook() {
        for (h, w) in [(1, 1), (1, 5), (4, 7), (9, 9)] {
            assert_eq!(
                in_bounds_pairs(h, w),
                build_rulebook(&KeySet::full(2, h, w)).len() as u64
            );
        }
    }

    #[test]
    fn p2_increase_values() {
        let r = p2_cost_increase(512, 512, 16, 1, 4).unwrap();
        let expected = 4.0 / (1.0 + 0.25 + 1.0 / 16.0 + 1.0 / 64.0 + 1.0 / 256.0);
        assert!((r - expected).abs() < 1e-12);
        assert_eq!(p2_cost_increase(1024, 1024, 16, 1, 4).unwrap(), r);
        let odd = p2_cost_increase(500, 500, 16, 1, 4).unwrap();
        assert!((2.9..=3.1).contains(&odd), "{odd}");
        assert!(p2_cost_increase(4, 4, 16, 1, 4).is_err());
    }

    #[test]
    fn report_totals_are_sums() {
        let r = flops_report(512, 512, 256, 9, 80).unwrap();
        assert_eq!(r.total_dense_macs, r.levels.iter().map(|l| l.dense_macs).sum::<u64>());
        assert!(r.levels.iter().all(|l| l.dense_in_bounds_macs <= l.dense_macs));
        assert!((r.levels.iter().map(|l| l.share).sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sweep_has_nineteen_steps() {
        let s = sigma_sweep();
        assert_eq!(s.len(), 19);
        assert_eq!(s[0], 0.05);
        assert_eq!(s[2], 0.15);
        assert_eq!(s[18], 0.95);
    }

    #[test]
    fn median_of_odd_and_even() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
