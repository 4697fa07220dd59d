//! End-to-end acceptance criteria. Prints one PASS/FAIL line per criterion
//! and exits nonzero if any fails.

use std::collections::BTreeSet;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use qd_core::analysis::{head_flops_dense, head_flops_sparse, p2_cost_increase, run_benchmark, sigma_sweep};
use qd_core::model::{level_dims, make_fixture_weights, make_synthetic_pyramid, random_blobs, BlobSpec, HeadOutput};
use qd_core::postproc::{detections, AnchorConfig, NmsConfig};
use qd_core::query::{map_queries_to_keys, run_pipeline, CascadeResult};
use qd_core::sparse::build_rulebook;
use qd_core::targets::{beta_schedule, focal_loss, level_query_target, smooth_l1, GroundTruth, GroundTruthSet};
use qd_core::tensor::max_relative_error;
use qd_core::{FeaturePyramid, GridPos, HeadWeights, KeySet, QueryConfig, Strategy};

const TOLERANCE: f64 = 1e-5;
const SIZE: usize = 512;
const CLASSES: usize = 4;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn fixture(seed: u64, channels: usize) -> (FeaturePyramid, HeadWeights, Vec<BlobSpec>) {
    let blobs = random_blobs(seed, SIZE, SIZE, 8, CLASSES);
    let pyr = make_synthetic_pyramid(seed, SIZE, SIZE, 2, 7, channels, &blobs).unwrap();
    let w = make_fixture_weights(seed, channels, 1, CLASSES);
    (pyr, w, blobs)
}

fn cfg(strategy: Strategy) -> QueryConfig {
    QueryConfig::with_strategy(strategy)
}

fn dense_output(res: &CascadeResult, l: u8) -> &qd_core::model::DenseHeadOutput {
    match &res.level(l).unwrap().output {
        HeadOutput::Dense(d) => d,
        HeadOutput::Sparse(_) => panic!("P{l} ran sparse"),
    }
}

fn sparse_output(res: &CascadeResult, l: u8) -> &qd_core::model::SparseHeadOutput {
    match &res.level(l).unwrap().output {
        HeadOutput::Sparse(s) => s,
        HeadOutput::Dense(_) => panic!("P{l} ran dense"),
    }
}

/// Pairs of (sparse row, dense pixel) for every output branch at `p`.
fn compare_at(res: &CascadeResult, dense: &CascadeResult, l: u8, p: GridPos) -> Vec<(Vec<f32>, Vec<f32>)> {
    let s = sparse_output(res, l);
    let d = dense_output(dense, l);
    let (x, y) = (p.x as usize, p.y as usize);
    vec![
        (s.cls_logits.row_at(p).unwrap().to_vec(), d.cls_logits.pixel(x, y)),
        (s.reg_deltas.row_at(p).unwrap().to_vec(), d.reg_deltas.pixel(x, y)),
        (s.query_logits.row_at(p).unwrap().to_vec(), d.query_logits.pixel(x, y)),
    ]
}

fn queried_levels(c: &QueryConfig) -> impl Iterator<Item = u8> {
    c.min_level..c.start_level
}

fn ccq_exactness() -> Outcome {
    let t0 = Instant::now();
    let (mut kept, mut dets) = (0, 0);
    for seed in 0..10 {
        let (pyr, w, _) = fixture(seed, 16);
        let dense = run_pipeline(&pyr, &w, &cfg(Strategy::Dense)).unwrap();
        let ccq = run_pipeline(&pyr, &w, &cfg(Strategy::Ccq)).unwrap();
        for l in queried_levels(&ccq.config) {
            for &p in ccq.level(l).unwrap().computed_keys.as_ref().unwrap().positions() {
                for (a, b) in compare_at(&ccq, &dense, l, p) {
                    let same = a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits());
                    if !same {
                        return outcome(false, format!("seed {seed} P{l} {p:?}: {a:?} vs {b:?}"));
                    }
                }
                kept += 1;
            }
        }
        let (anchors, nms) = (AnchorConfig::default(), NmsConfig::default());
        let dd = detections(&dense, CLASSES, &anchors, &nms).unwrap();
        let dc = detections(&ccq, CLASSES, &anchors, &nms).unwrap();
        let (jd, jc) = (serde_json::to_string(&dd).unwrap(), serde_json::to_string(&dc).unwrap());
        if jd != jc {
            return outcome(false, format!("seed {seed}: detections differ"));
        }
        dets += dd.len();
    }
    let secs = t0.elapsed().as_secs_f64();
    outcome(
        secs < 30.0 && kept > 0,
        format!("10 fixtures, {kept} kept positions bitwise equal, {dets} detections identical, {secs:.1}s"),
    )
}

/// Accumulates sparse/dense pairs per output branch for one level.
#[derive(Default)]
struct LevelErrors {
    sparse: [Vec<f32>; 3],
    dense: [Vec<f32>; 3],
    per_position: f64,
}

impl LevelErrors {
    fn add(&mut self, pairs: Vec<(Vec<f32>, Vec<f32>)>) {
        for (i, (a, b)) in pairs.into_iter().enumerate() {
            self.per_position = self.per_position.max(max_relative_error(&a, &b));
            self.sparse[i].extend(a);
            self.dense[i].extend(b);
        }
    }

    /// Worst branch error, each branch normalized by its magnitude over the level.
    fn normwise(&self) -> f64 {
        (0..3)
            .map(|i| max_relative_error(&self.sparse[i], &self.dense[i]))
            .fold(0.0, f64::max)
    }
}

fn csq_full_active() -> Outcome {
    let mut worst = 0f64;
    let mut per_position = 0f64;
    let mut positions = 0;
    for seed in 0..10 {
        let (pyr, w, _) = fixture(seed, 16);
        let c = QueryConfig {
            sigma: 0.0,
            ..cfg(Strategy::Csq)
        };
        let dense = run_pipeline(&pyr, &w, &cfg(Strategy::Dense)).unwrap();
        let csq = run_pipeline(&pyr, &w, &c).unwrap();
        for l in queried_levels(&c) {
            let keys = csq.level(l).unwrap().computed_keys.as_ref().unwrap();
            if !keys.covers_level() {
                return outcome(
                    false,
                    format!(
                        "seed {seed} P{l}: σ=0 left {} of {} cells",
                        keys.len(),
                        keys.height() * keys.width()
                    ),
                );
            }
            let mut errs = LevelErrors::default();
            for &p in keys.positions() {
                errs.add(compare_at(&csq, &dense, l, p));
                positions += 1;
            }
            worst = worst.max(errs.normwise());
            per_position = per_position.max(errs.per_position);
        }
    }
    outcome(
        worst <= TOLERANCE,
        format!(
            "10 fixtures, {positions} positions, max relative error {worst:.2e} \
             (largest single-vector error {per_position:.2e})"
        ),
    )
}

fn cq_interior() -> Outcome {
    let margin = 5;
    let mut worst = 0f64;
    let mut per_position = 0f64;
    let mut compared = 0;
    for seed in 0..10 {
        let (pyr, w, _) = fixture(seed, 16);
        let c = cfg(Strategy::Cq);
        let dense = run_pipeline(&pyr, &w, &cfg(Strategy::Dense)).unwrap();
        let cq = run_pipeline(&pyr, &w, &c).unwrap();
        for l in queried_levels(&c) {
            let keys = cq.level(l).unwrap().computed_keys.as_ref().unwrap();
            let (h, wd) = (keys.height(), keys.width());
            let mut errs = LevelErrors::default();
            for &p in keys.positions() {
                let (x, y) = (p.x as usize, p.y as usize);
                if x < margin || y < margin || x + margin >= wd || y + margin >= h {
                    continue;
                }
                errs.add(compare_at(&cq, &dense, l, p));
                compared += 1;
            }
            worst = worst.max(errs.normwise());
            per_position = per_position.max(errs.per_position);
        }
    }
    outcome(
        worst <= TOLERANCE && compared > 0,
        format!(
            "{compared} interior keys, max relative error {worst:.2e} (largest single-vector error {per_position:.2e})"
        ),
    )
}

fn p2_claim() -> Outcome {
    let t0 = Instant::now();
    let at512 = p2_cost_increase(512, 512, 256, 9, 80).unwrap();
    let at500 = p2_cost_increase(500, 500, 256, 9, 80).unwrap();
    let secs = t0.elapsed().as_secs_f64();
    outcome(
        (at512 - 3.0).abs() <= 0.02 && (2.9..=3.1).contains(&at500) && secs < 1.0,
        format!("ratio {at512:.4} at 512x512, {at500:.4} at 500x500"),
    )
}

fn sparse_saving() -> Outcome {
    let t0 = Instant::now();
    let (c, a, k) = (256, 9, 80);
    let (pyr, w, _) = fixture(0, 16);
    let res = run_pipeline(&pyr, &w, &cfg(Strategy::Csq)).unwrap();
    let mut cases: Vec<(String, Vec<KeySet>)> = vec![(
        "cascade keys".into(),
        [2, 3]
            .iter()
            .map(|&l| res.level(l).unwrap().computed_keys.clone().unwrap())
            .collect(),
    )];
    // Densest possible layout of a 1% budget: one solid block per level.
    let block = |l: u8| {
        let (h, wd) = level_dims(SIZE, SIZE, l);
        let budget = h * wd / 100;
        let side = (budget as f64).sqrt().floor() as u32;
        let pos = (0..side).flat_map(|y| (0..side).map(move |x| GridPos::new(x, y)));
        KeySet::new(l, h, wd, pos).unwrap()
    };
    cases.push(("1% solid block".into(), vec![block(2), block(3)]));
    let mut details = Vec::new();
    let mut ok = true;
    for (name, sets) in cases {
        let mut sparse = 0u64;
        let mut dense = 0u64;
        let mut max_fraction = 0f64;
        for keys in &sets {
            let (h, wd) = (keys.height(), keys.width());
            max_fraction = max_fraction.max(keys.len() as f64 / (h * wd) as f64);
            sparse += head_flops_sparse(keys.len(), build_rulebook(keys).len(), c, a, k);
            dense += head_flops_dense(h, wd, c, a, k);
        }
        let ratio = sparse as f64 / dense as f64;
        ok &= max_fraction <= 0.01 && ratio <= 0.01;
        details.push(format!(
            "{name}: active {:.3}%, cost {:.3}% of dense",
            100.0 * max_fraction,
            100.0 * ratio
        ));
    }
    let secs = t0.elapsed().as_secs_f64();
    outcome(ok && secs < 1.0, details.join("; "))
}

fn measured_speedup() -> Outcome {
    let t0 = Instant::now();
    let (pyr, w, _) = fixture(7, 64);
    let csq_cfg = cfg(Strategy::Csq);
    let res = run_pipeline(&pyr, &w, &csq_cfg).unwrap();
    let mut fraction = 0f64;
    for l in [2, 3] {
        let keys = res.level(l).unwrap().computed_keys.as_ref().unwrap();
        fraction = fraction.max(keys.len() as f64 / (keys.height() * keys.width()) as f64);
    }
    let results = run_benchmark(&pyr, &w, &[cfg(Strategy::Dense), csq_cfg], 5, 2).unwrap();
    let (dense, csq) = (results[0].millis, results[1].millis);
    let speedup = dense / csq;
    let secs = t0.elapsed().as_secs_f64();
    outcome(
        fraction <= 0.01 && speedup >= 2.0 && secs < 120.0,
        format!(
            "C=64, active {:.3}% of P2/P3, dense {dense:.1} ms vs csq {csq:.1} ms, {speedup:.1}x",
            100.0 * fraction
        ),
    )
}

/// Cells within 4 grid units of the center cell of any object smaller than
/// `4 · 2^l` pixels, by integer squared distance.
fn target_oracle(objects: &[GroundTruth], l: u8, h: usize, w: usize) -> Vec<f32> {
    let stride = 1i64 << l;
    let mut out = vec![0f32; h * w];
    for o in objects {
        if o.w.max(o.h) >= (4 * stride) as f64 {
            continue;
        }
        let (cx, cy) = (o.cx as i64 / stride, o.cy as i64 / stride);
        for y in 0..h as i64 {
            for x in 0..w as i64 {
                if (x - cx).pow(2) + (y - cy).pow(2) < 16 {
                    out[y as usize * w + x as usize] = 1.0;
                }
            }
        }
    }
    out
}

fn query_target_oracle() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut positives = 0;
    for case in 0..100 {
        let l = rng.gen_range(2..=7u8);
        let (ih, iw) = (rng.gen_range(64..700usize), rng.gen_range(64..700usize));
        let objects: Vec<GroundTruth> = (0..rng.gen_range(0..10))
            .map(|_| GroundTruth {
                cx: rng.gen_range(0..iw) as f64,
                cy: rng.gen_range(0..ih) as f64,
                w: rng.gen_range(1..400) as f64,
                h: rng.gen_range(1..400) as f64,
                class: 0,
            })
            .collect();
        let (h, w) = level_dims(ih, iw, l);
        let gt = GroundTruthSet::new(objects.clone()).unwrap();
        let got = level_query_target(&gt, l, h, w, 4.0);
        let want = target_oracle(&objects, l, h, w);
        if got.data() != want.as_slice() {
            return outcome(false, format!("case {case}: P{l} {ih}x{iw} differs"));
        }
        positives += want.iter().filter(|&&v| v > 0.0).count();
    }
    let secs = t0.elapsed().as_secs_f64();
    outcome(
        secs < 10.0,
        format!("100 cases exact, {positives} positive cells, {secs:.2}s"),
    )
}

fn parent_child_mapping() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut children = 0;
    for case in 0..1000 {
        let (h, w) = (rng.gen_range(1..40usize), rng.gen_range(1..40usize));
        let (ch, cw) = (2 * h + rng.gen_range(0..2), 2 * w + rng.gen_range(0..2));
        let n = rng.gen_range(0..60);
        let queries = KeySet::new(
            5,
            h,
            w,
            (0..n).map(|_| GridPos::new(rng.gen_range(0..w as u32), rng.gen_range(0..h as u32))),
        )
        .unwrap();
        let keys = map_queries_to_keys(&queries, ch, cw);
        let unique: BTreeSet<GridPos> = keys.positions().iter().copied().collect();
        let ok = unique.len() == keys.len()
            && keys.len() <= 4 * queries.len()
            && keys.level() == 4
            && keys.positions().iter().all(|p| {
                (p.x as usize) < cw && (p.y as usize) < ch && queries.contains(GridPos::new(p.x / 2, p.y / 2))
            });
        if !ok {
            return outcome(false, format!("case {case} violates parentage"));
        }
        children += keys.len();
    }
    let secs = t0.elapsed().as_secs_f64();
    outcome(
        secs < 5.0,
        format!("1000 query sets, {children} children checked, {secs:.2}s"),
    )
}

fn sigma_monotonicity() -> Outcome {
    let blobs: Vec<BlobSpec> = random_blobs(5, SIZE, SIZE, 24, CLASSES)
        .into_iter()
        .enumerate()
        .map(|(i, b)| BlobSpec {
            amplitude: 1.0 + 0.2 * i as f32,
            ..b
        })
        .collect();
    let pyr = make_synthetic_pyramid(5, SIZE, SIZE, 2, 7, 16, &blobs).unwrap();
    let w = make_fixture_weights(5, 16, 1, CLASSES);
    let configs: Vec<QueryConfig> = sigma_sweep()
        .into_iter()
        .map(|sigma| QueryConfig {
            sigma,
            ..cfg(Strategy::Csq)
        })
        .collect();
    let results = run_benchmark(&pyr, &w, &configs, 21, 3).unwrap();
    let mut keys_ok = true;
    for pair in results.windows(2) {
        for (a, b) in pair[0].levels.iter().zip(&pair[1].levels) {
            keys_ok &= a.level == b.level && b.keys <= a.keys;
        }
    }
    // This host shows bimodal run times (hypervisor steal), which makes the
    // median jump between modes; the fastest run tracks the work done.
    let within = |t: fn(&qd_core::analysis::BenchResult) -> f64| results.windows(2).all(|p| t(&p[1]) <= 1.1 * t(&p[0]));
    let min_ok = within(|r| r.min_millis);
    let median_ok = within(|r| r.millis);
    let p2: Vec<usize> = results
        .iter()
        .map(|r| r.levels.iter().find(|l| l.level == 2).unwrap().keys)
        .collect();
    let fmt = |t: fn(&qd_core::analysis::BenchResult) -> f64| {
        results
            .iter()
            .map(|r| format!("{:.1}", t(r)))
            .collect::<Vec<_>>()
            .join(", ")
    };
    let verdict = |ok| if ok { "within 10%" } else { "OUTSIDE 10%" };
    outcome(
        keys_ok && min_ok,
        format!(
            "keys {}, min time {} (median {}); P2 keys {:?}, min ms [{}], median ms [{}]",
            if keys_ok { "non-increasing" } else { "INCREASED" },
            verdict(min_ok),
            verdict(median_ok),
            p2,
            fmt(|r| r.min_millis),
            fmt(|r| r.millis)
        ),
    )
}

fn focal_oracle(logits: &[f32], targets: &[f32], alpha: f64, gamma: f64) -> f64 {
    let mut sum = 0.0;
    for (&x, &t) in logits.iter().zip(targets) {
        let p = 1.0 / (1.0 + (-(x as f64)).exp());
        let (pt, at) = if t == 1.0 { (p, alpha) } else { (1.0 - p, 1.0 - alpha) };
        sum += -at * (1.0 - pt).powf(gamma) * pt.ln();
    }
    sum / logits.len() as f64
}

fn smooth_l1_oracle(a: &[f32], b: &[f32]) -> f64 {
    let sum: f64 = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = (x as f64 - y as f64).abs();
            if d < 1.0 {
                d * d / 2.0
            } else {
                d - 0.5
            }
        })
        .sum();
    sum / a.len() as f64
}

fn loss_math() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0f64;
    for _ in 0..200 {
        let n = rng.gen_range(1..300);
        let logits: Vec<f32> = (0..n).map(|_| rng.gen_range(-12.0..12.0)).collect();
        let targets: Vec<f32> = (0..n).map(|_| if rng.gen_bool(0.2) { 1.0 } else { 0.0 }).collect();
        let gamma = [0.0, 1.0, 2.0, 2.5][rng.gen_range(0..4)];
        let fl = focal_loss(&logits, &targets, 0.25, gamma).unwrap();
        worst = worst.max((fl - focal_oracle(&logits, &targets, 0.25, gamma)).abs());
        let pred: Vec<f32> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let tgt: Vec<f32> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
        worst = worst.max((smooth_l1(&pred, &tgt).unwrap() - smooth_l1_oracle(&pred, &tgt)).abs());
    }
    let betas = |end| {
        beta_schedule(2, 7, end)
            .into_iter()
            .map(|(_, b)| b)
            .collect::<Vec<f64>>()
    };
    let b3 = betas(3.0);
    let b26 = betas(2.6);
    let exact = b3 == [1.0, 1.4, 1.8, 2.2, 2.6, 3.0] && b26 == [1.0, 1.32, 1.64, 1.96, 2.28, 2.6];
    outcome(
        worst <= 1e-9 && exact,
        format!("max loss deviation {worst:.2e}; betas {b3:?} and {b26:?}"),
    )
}

fn recall_guarantee() -> Outcome {
    let mut checked = 0;
    for seed in 100..120 {
        let (pyr, w, blobs) = fixture(seed, 16);
        let c = cfg(Strategy::Csq);
        let res = run_pipeline(&pyr, &w, &c).unwrap();
        for parent in (c.min_level + 1..=c.start_level).rev() {
            let lr = res.level(parent).unwrap();
            let child = res.level(parent - 1).unwrap().computed_keys.as_ref().unwrap();
            for b in &blobs {
                let (gx, gy) = b.cell(parent);
                let p = GridPos::new(gx as u32, gy as u32);
                let logit = match &lr.output {
                    HeadOutput::Dense(d) => Some(d.query_logits.get(0, gy as usize, gx as usize)),
                    HeadOutput::Sparse(s) => s.query_logits.row_at(p).map(|r| r[0]),
                };
                let Some(logit) = logit else { continue };
                let score = 1.0 / (1.0 + (-logit).exp());
                if score <= c.sigma as f32 {
                    continue;
                }
                for (i, j) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                    let k = GridPos::new(2 * p.x + i, 2 * p.y + j);
                    let inside = (k.x as usize) < child.width() && (k.y as usize) < child.height();
                    if inside && !child.contains(k) {
                        return outcome(
                            false,
                            format!("seed {seed}: blob {b:?} child {k:?} missing on P{}", parent - 1),
                        );
                    }
                }
                checked += 1;
            }
        }
    }
    outcome(
        checked > 0,
        format!("20 fixtures, {checked} firing (blob, level) pairs, all children present"),
    )
}

fn main() {
    type Criterion = (&'static str, fn() -> Outcome);
    let criteria: [Criterion; 11] = [
        ("ccq exactness", ccq_exactness),
        ("csq full-active limit", csq_full_active),
        ("cq interior exactness", cq_interior),
        ("p2 cost increase", p2_claim),
        ("sparse head saving", sparse_saving),
        ("measured speedup", measured_speedup),
        ("query-target oracle", query_target_oracle),
        ("parent-child mapping", parent_child_mapping),
        ("sigma monotonicity", sigma_monotonicity),
        ("loss math", loss_math),
        ("recall guarantee", recall_guarantee),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let t0 = Instant::now();
        let o = run();
        let verdict = if o.passed { "PASS" } else { "FAIL" };
        println!(
            "{verdict} {:>2} {name} [{:.2}s]: {}",
            i + 1,
            t0.elapsed().as_secs_f64(),
            o.detail
        );
        failed += usize::from(!o.passed);
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
