//! The `qd` command: fixture generation, pipeline runs, verification,
//! benchmarks and cost reports.

pub mod config;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use qd_core::analysis::{bench_csv, flops_report, run_benchmark, BenchResult};
use qd_core::format::{load_pyramid, load_weights, save_pyramid, save_tensor, save_weights, write_file};
use qd_core::model::level_dims;
use qd_core::model::{make_fixture_weights, make_synthetic_pyramid, random_blobs, BlobSpec};
use qd_core::postproc::{detections, AnchorConfig, Detection};
use qd_core::query::run_pipeline;
use qd_core::report::RunReport;
use qd_core::targets::{
    beta_schedule, grid_threshold, is_small_for_level, level_query_target, GroundTruth, GroundTruthSet,
};
use qd_core::verify::{brute_force_query_target, verify, Fault, VerifyOptions};
use qd_core::{FeaturePyramid, HeadWeights, QueryConfig, Strategy, SCHEMA};

pub use config::{parse_blob, PartialConfig, RunConfig};

pub const PYRAMID_FILE: &str = "pyramid.qdp";
pub const WEIGHTS_FILE: &str = "weights.qdw";
pub const GT_FILE: &str = "gt.json";
pub const MANIFEST_FILE: &str = "fixture.json";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] qd_core::Error),
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    /// 2 for usage and configuration errors, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Core(qd_core::Error::Config(_)) => 2,
            _ => 1,
        }
    }
}

type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "qd", version, about = "Cascade sparse query detection-head engine")]
pub struct Cli {
    /// JSON config file; flags override its values.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a seeded synthetic pyramid, head weights and ground truth.
    GenFixture(GenFixtureArgs),
    /// Run one strategy and write detections and a run report.
    Run(RunArgs),
    /// Check every strategy against its dense reference on a fixture.
    Verify(VerifyArgs),
    /// Time strategies over a σ sweep.
    Bench(BenchArgs),
    /// Analytic head cost per level.
    Flops(FlopsArgs),
    /// Write per-level query target maps for a ground-truth file.
    TargetsCheck(TargetsArgs),
}

#[derive(Debug, Default, Args)]
pub struct DimFlags {
    #[arg(long)]
    pub height: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub channels: Option<usize>,
    #[arg(long)]
    pub num_classes: Option<usize>,
    #[arg(long)]
    pub num_anchors: Option<usize>,
    /// Finest pyramid level.
    #[arg(long)]
    pub l_min: Option<u8>,
    /// Coarsest pyramid level.
    #[arg(long)]
    pub l_max: Option<u8>,
}

#[derive(Debug, Default, Args)]
pub struct InputFlags {
    /// Directory written by `gen-fixture`.
    #[arg(long, value_name = "DIR")]
    pub fixture: Option<PathBuf>,
    #[arg(long, value_name = "PATH")]
    pub pyramid: Option<PathBuf>,
    #[arg(long, value_name = "PATH")]
    pub weights: Option<PathBuf>,
}

#[derive(Debug, Default, Args)]
pub struct QueryFlags {
    #[arg(long)]
    pub strategy: Option<Strategy>,
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long)]
    pub start_level: Option<u8>,
    #[arg(long)]
    pub min_level: Option<u8>,
    /// Side of CQ crops.
    #[arg(long)]
    pub cq_patch: Option<usize>,
}

#[derive(Debug, Args)]
pub struct GenFixtureArgs {
    #[command(flatten)]
    pub dims: DimFlags,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Blob as `cx,cy,size,class[,amplitude]`, image pixels. Repeatable.
    #[arg(long = "blob", value_parser = parse_blob)]
    pub blobs: Vec<BlobSpec>,
    /// Seeded blobs drawn when no `--blob` is given.
    #[arg(long)]
    pub num_blobs: Option<usize>,
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub input: InputFlags,
    #[command(flatten)]
    pub query: QueryFlags,
    #[arg(long)]
    pub score_threshold: Option<f64>,
    #[arg(long)]
    pub iou_threshold: Option<f64>,
    #[arg(long)]
    pub top_k: Option<usize>,
    #[arg(long)]
    pub anchor_base: Option<f64>,
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum FaultArg {
    SparseSkipBias,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[command(flatten)]
    pub input: InputFlags,
    #[arg(long, value_name = "PATH")]
    pub gt: Option<PathBuf>,
    #[command(flatten)]
    pub query: QueryFlags,
    /// Also write the verdict here.
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
    #[arg(long, hide = true)]
    pub inject_fault: Option<FaultArg>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[command(flatten)]
    pub input: InputFlags,
    /// Repeatable; defaults to csq.
    #[arg(long = "strategy")]
    pub strategies: Vec<Strategy>,
    /// Repeatable; defaults to 0.05, 0.10, ..., 0.95.
    #[arg(long = "sigma")]
    pub sigmas: Vec<f64>,
    #[arg(long)]
    pub start_level: Option<u8>,
    #[arg(long)]
    pub min_level: Option<u8>,
    #[arg(long)]
    pub repeats: Option<usize>,
    #[arg(long)]
    pub warmup: Option<usize>,
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FlopsArgs {
    #[command(flatten)]
    pub dims: DimFlags,
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TargetsArgs {
    /// Ground truth `[{"cx":..,"cy":..,"w":..,"h":..,"class":..}]`.
    #[arg(long, value_name = "PATH")]
    pub gt: Option<PathBuf>,
    /// Take ground truth and image dims from a fixture directory.
    #[arg(long, value_name = "DIR")]
    pub fixture: Option<PathBuf>,
    #[command(flatten)]
    pub dims: DimFlags,
    #[arg(long)]
    pub anchor_base: Option<f64>,
    /// Final β of the linear level-weight schedule.
    #[arg(long)]
    pub beta_end: Option<f64>,
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

impl DimFlags {
    fn apply(&self, p: &mut PartialConfig) {
        p.height = self.height;
        p.width = self.width;
        p.channels = self.channels;
        p.num_classes = self.num_classes;
        p.num_anchors = self.num_anchors;
        p.l_min = self.l_min;
        p.l_max = self.l_max;
    }
}

impl InputFlags {
    fn apply(&self, p: &mut PartialConfig) {
        p.fixture = self.fixture.clone();
        p.pyramid = self.pyramid.clone();
        p.weights = self.weights.clone();
    }
}

impl QueryFlags {
    fn apply(&self, p: &mut PartialConfig) {
        p.strategy = self.strategy;
        p.sigma = self.sigma;
        p.start_level = self.start_level;
        p.min_level = self.min_level;
        p.cq_patch = self.cq_patch;
    }
}

impl Command {
    /// The options given as flags.
    pub fn flags(&self) -> PartialConfig {
        let mut p = PartialConfig::default();
        match self {
            Command::GenFixture(a) => {
                a.dims.apply(&mut p);
                p.seed = a.seed;
                p.blobs = (!a.blobs.is_empty()).then(|| a.blobs.clone());
                p.num_blobs = a.num_blobs;
                p.out = a.out.clone();
            }
            Command::Run(a) => {
                a.input.apply(&mut p);
                a.query.apply(&mut p);
                p.score_threshold = a.score_threshold;
                p.iou_threshold = a.iou_threshold;
                p.top_k = a.top_k;
                p.anchor_base = a.anchor_base;
                p.out = a.out.clone();
            }
            Command::Verify(a) => {
                a.input.apply(&mut p);
                a.query.apply(&mut p);
                p.gt = a.gt.clone();
                p.out = a.out.clone();
            }
            Command::Bench(a) => {
                a.input.apply(&mut p);
                p.strategies = (!a.strategies.is_empty()).then(|| a.strategies.clone());
                p.sigmas = (!a.sigmas.is_empty()).then(|| a.sigmas.clone());
                p.start_level = a.start_level;
                p.min_level = a.min_level;
                p.repeats = a.repeats;
                p.warmup = a.warmup;
                p.out = a.out.clone();
            }
            Command::Flops(a) => {
                a.dims.apply(&mut p);
                p.out = a.out.clone();
            }
            Command::TargetsCheck(a) => {
                a.dims.apply(&mut p);
                p.gt = a.gt.clone();
                p.fixture = a.fixture.clone();
                p.anchor_base = a.anchor_base;
                p.beta_end = a.beta_end;
                p.out = a.out.clone();
            }
        }
        p
    }
}

/// Sizes the global worker pool from `QD_THREADS` (unset or 0: automatic).
pub fn configure_threads() -> CliResult<()> {
    let Ok(raw) = std::env::var("QD_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .map_err(|_| CliError::Usage(format!("QD_THREADS={raw:?} is not a thread count")))?;
    if n > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Failed(format!("thread pool: {e}")))?;
    }
    Ok(())
}

/// Parses arguments and runs the selected subcommand. Primary output goes
/// to `stdout`.
pub fn run(cli: Cli, stdout: &mut dyn Write) -> CliResult<()> {
    let file = match &cli.config {
        Some(path) => PartialConfig::from_file(path)?,
        None => PartialConfig::default(),
    };
    let mut partial = cli.command.flags().over(file);
    if let Command::TargetsCheck(_) = cli.command {
        if let Some(dir) = partial.fixture.clone() {
            partial = partial.over(manifest_dims(&dir)?);
        }
    }
    let cfg = RunConfig::resolve(partial)?;
    match &cli.command {
        Command::GenFixture(_) => cmd_gen_fixture(&cfg, stdout),
        Command::Run(_) => cmd_run(&cfg, stdout),
        Command::Verify(a) => cmd_verify(
            &cfg,
            a.inject_fault.map(|FaultArg::SparseSkipBias| Fault::SparseSkipBias),
            stdout,
        ),
        Command::Bench(_) => cmd_bench(&cfg, stdout),
        Command::Flops(_) => cmd_flops(&cfg, stdout),
        Command::TargetsCheck(_) => cmd_targets_check(&cfg, stdout),
    }
}

/// Contents of `fixture.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixtureManifest {
    pub schema: String,
    pub seed: u64,
    pub image: [usize; 2],
    pub channels: usize,
    pub num_classes: usize,
    pub num_anchors: usize,
    pub levels: [u8; 2],
    pub blobs: Vec<BlobSpec>,
    /// SHA-256 of each fixture file, hex.
    pub sha256: BTreeMap<String, String>,
}

impl FixtureManifest {
    pub fn load(dir: &Path) -> CliResult<Self> {
        let path = dir.join(MANIFEST_FILE);
        let bytes = read(&path)?;
        serde_json::from_slice(&bytes).map_err(|e| qd_core::Error::Format(format!("{}: {e}", path.display())).into())
    }
}

fn manifest_dims(dir: &Path) -> CliResult<PartialConfig> {
    let m = FixtureManifest::load(dir)?;
    Ok(PartialConfig {
        height: Some(m.image[0]),
        width: Some(m.image[1]),
        channels: Some(m.channels),
        num_classes: Some(m.num_classes),
        num_anchors: Some(m.num_anchors),
        l_min: Some(m.levels[0]),
        l_max: Some(m.levels[1]),
        ..Default::default()
    })
}

fn read(path: &Path) -> CliResult<Vec<u8>> {
    std::fs::read(path).map_err(|e| qd_core::Error::io(path, e).into())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("plain data serializes");
    s.push('\n');
    s
}

fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| qd_core::Error::io(dir, e).into())
}

fn out_dir(cfg: &RunConfig, default: &str) -> CliResult<PathBuf> {
    let dir = cfg.out.clone().unwrap_or_else(|| PathBuf::from(default));
    create_dir(&dir)?;
    Ok(dir)
}

fn input_path(explicit: &Option<PathBuf>, fixture: &Option<PathBuf>, file: &str, flag: &str) -> CliResult<PathBuf> {
    explicit
        .clone()
        .or_else(|| fixture.as_ref().map(|d| d.join(file)))
        .ok_or_else(|| CliError::Usage(format!("--{flag} or --fixture is required")))
}

fn load_inputs(cfg: &RunConfig) -> CliResult<(FeaturePyramid, HeadWeights)> {
    let pyr = load_pyramid(&input_path(&cfg.pyramid, &cfg.fixture, PYRAMID_FILE, "pyramid")?)?;
    let w = load_weights(&input_path(&cfg.weights, &cfg.fixture, WEIGHTS_FILE, "weights")?)?;
    if pyr.channels() != w.channels() {
        return Err(CliError::Usage(format!(
            "pyramid has {} channels, weights expect {}",
            pyr.channels(),
            w.channels()
        )));
    }
    Ok((pyr, w))
}

fn ground_truth(blobs: &[BlobSpec]) -> GroundTruthSet {
    GroundTruthSet {
        objects: blobs
            .iter()
            .map(|b| GroundTruth {
                cx: b.cx,
                cy: b.cy,
                w: b.size,
                h: b.size,
                class: b.class,
            })
            .collect(),
    }
}

pub fn cmd_gen_fixture(cfg: &RunConfig, stdout: &mut dyn Write) -> CliResult<()> {
    let dir = out_dir(cfg, "fixture")?;
    let blobs = match &cfg.blobs {
        Some(b) => b.clone(),
        None => random_blobs(cfg.seed, cfg.height, cfg.width, cfg.num_blobs, cfg.num_classes),
    };
    let pyr = make_synthetic_pyramid(
        cfg.seed,
        cfg.height,
        cfg.width,
        cfg.l_min,
        cfg.l_max,
        cfg.channels,
        &blobs,
    )?;
    let w = make_fixture_weights(cfg.seed, cfg.channels, cfg.num_anchors, cfg.num_classes);
    let gt = ground_truth(&blobs);

    save_pyramid(&pyr, &dir.join(PYRAMID_FILE))?;
    save_weights(&w, &dir.join(WEIGHTS_FILE))?;
    write_file(&dir.join(GT_FILE), format!("{}\n", gt.to_json()).as_bytes())?;
    let mut sha256 = BTreeMap::new();
    for name in [PYRAMID_FILE, WEIGHTS_FILE, GT_FILE] {
        sha256.insert(name.to_string(), sha256_hex(&read(&dir.join(name))?));
    }
    let manifest = FixtureManifest {
        schema: SCHEMA.to_string(),
        seed: cfg.seed,
        image: [cfg.height, cfg.width],
        channels: cfg.channels,
        num_classes: cfg.num_classes,
        num_anchors: cfg.num_anchors,
        levels: [cfg.l_min, cfg.l_max],
        blobs,
        sha256,
    };
    write_file(&dir.join(MANIFEST_FILE), to_json(&manifest).as_bytes())?;
    writeln!(stdout, "{}", dir.display()).ok();
    Ok(())
}

/// Detections file contents. Carries no strategy or timing so that
/// equivalent strategies produce identical files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionsFile {
    pub schema: String,
    pub detections: Vec<Detection>,
}

pub fn cmd_run(cfg: &RunConfig, stdout: &mut dyn Write) -> CliResult<()> {
    let (pyr, w) = load_inputs(cfg)?;
    let result = run_pipeline(&pyr, &w, &cfg.query)?;
    let anchors = AnchorConfig {
        base: cfg.anchors.base,
        num_anchors: w.num_anchors(),
    };
    let dets = detections(&result, w.num_classes(), &anchors, &cfg.nms)?;
    let report = RunReport::new(&result, dets.len());
    let dir = out_dir(cfg, "qd-out")?;
    let file = DetectionsFile {
        schema: SCHEMA.to_string(),
        detections: dets,
    };
    write_file(&dir.join("detections.json"), to_json(&file).as_bytes())?;
    write_file(&dir.join("report.json"), format!("{}\n", report.to_json()).as_bytes())?;
    writeln!(
        stdout,
        "{}: {} detections, {} MACs",
        cfg.query.strategy,
        file.detections.len(),
        report.total_flops
    )
    .ok();
    Ok(())
}

pub fn cmd_verify(cfg: &RunConfig, fault: Option<Fault>, stdout: &mut dyn Write) -> CliResult<()> {
    let (pyr, w) = load_inputs(cfg)?;
    let gt_path = input_path(&cfg.gt, &cfg.fixture, GT_FILE, "gt")?;
    let gt = GroundTruthSet::from_json(&read(&gt_path)?)?;
    let opts = VerifyOptions {
        query: cfg.query.clone(),
        fault,
    };
    let mut report = verify(&pyr, &w, &gt, &opts)?;
    match &cfg.fixture {
        Some(dir) => report.notes.extend(checksum_notes(dir)?),
        None => report.notes.push("no fixture directory; checksums not checked".into()),
    }
    let json = to_json(&report);
    if let Some(path) = &cfg.out {
        write_file(path, json.as_bytes())?;
    }
    stdout.write_all(json.as_bytes()).ok();
    if report.passed {
        Ok(())
    } else {
        let failed: Vec<&str> = report.checks.iter().filter(|c| !c.passed).map(|c| c.name).collect();
        Err(CliError::Failed(format!("failed checks: {}", failed.join(", "))))
    }
}

/// Compares fixture files against the digests recorded at generation time.
pub fn checksum_notes(dir: &Path) -> CliResult<Vec<String>> {
    if !dir.join(MANIFEST_FILE).exists() {
        return Ok(vec![format!("no {MANIFEST_FILE}; checksums not checked")]);
    }
    let manifest = FixtureManifest::load(dir)?;
    let mut notes = Vec::new();
    for (name, recorded) in &manifest.sha256 {
        let path = dir.join(name);
        if !path.exists() {
            notes.push(format!("{name}: missing"));
            continue;
        }
        let found = sha256_hex(&read(&path)?);
        if &found != recorded {
            notes.push(format!("checksum mismatch: {name} recorded {recorded}, found {found}"));
        }
    }
    Ok(notes)
}

#[derive(Clone, Debug, Serialize)]
pub struct SweepCheck {
    pub strategy: Strategy,
    /// Per-level key counts never grow as σ increases.
    pub keys_non_increasing: bool,
    /// Median end-to-end time never grows by more than 10% as σ increases.
    pub time_non_increasing_within_slack: bool,
    /// Same test on the fastest run of each configuration.
    pub min_time_non_increasing_within_slack: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct BenchSummary {
    pub schema: &'static str,
    pub repeats: usize,
    pub warmup: usize,
    pub results: Vec<BenchResult>,
    pub sweep: Vec<SweepCheck>,
}

pub const TIME_SLACK: f64 = 0.10;

/// Monotonicity of one strategy's results, ordered by ascending σ.
pub fn sweep_check(strategy: Strategy, results: &[&BenchResult]) -> SweepCheck {
    let mut sorted = results.to_vec();
    sorted.sort_by(|a, b| a.sigma.total_cmp(&b.sigma));
    let keys_ok = sorted.windows(2).all(|p| {
        p[0].levels
            .iter()
            .zip(&p[1].levels)
            .all(|(a, b)| a.level == b.level && b.keys <= a.keys)
    });
    let within = |t: fn(&BenchResult) -> f64| sorted.windows(2).all(|p| t(p[1]) <= t(p[0]) * (1.0 + TIME_SLACK));
    SweepCheck {
        strategy,
        keys_non_increasing: keys_ok,
        time_non_increasing_within_slack: within(|r| r.millis),
        min_time_non_increasing_within_slack: within(|r| r.min_millis),
    }
}

pub fn cmd_bench(cfg: &RunConfig, stdout: &mut dyn Write) -> CliResult<()> {
    let (pyr, w) = load_inputs(cfg)?;
    let mut configs = Vec::new();
    for &strategy in &cfg.strategies {
        for &sigma in &cfg.sigmas {
            configs.push(QueryConfig {
                strategy,
                sigma,
                ..cfg.query.clone()
            });
        }
    }
    let results = run_benchmark(&pyr, &w, &configs, cfg.repeats, cfg.warmup)?;
    let sweep = cfg
        .strategies
        .iter()
        .map(|&s| {
            let rs: Vec<&BenchResult> = results.iter().filter(|r| r.strategy == s).collect();
            sweep_check(s, &rs)
        })
        .collect();
    let csv = bench_csv(&results);
    let summary = BenchSummary {
        schema: SCHEMA,
        repeats: cfg.repeats,
        warmup: cfg.warmup,
        results,
        sweep,
    };
    let dir = out_dir(cfg, "bench")?;
    write_file(&dir.join("bench.csv"), csv.as_bytes())?;
    write_file(&dir.join("bench.json"), to_json(&summary).as_bytes())?;
    stdout.write_all(csv.as_bytes()).ok();
    Ok(())
}

pub fn cmd_flops(cfg: &RunConfig, stdout: &mut dyn Write) -> CliResult<()> {
    let report = flops_report(cfg.height, cfg.width, cfg.channels, cfg.num_anchors, cfg.num_classes)?;
    let json = to_json(&report);
    if let Some(path) = &cfg.out {
        write_file(path, json.as_bytes())?;
    }
    stdout.write_all(json.as_bytes()).ok();
    Ok(())
}

#[derive(Clone, Debug, Serialize)]
pub struct TargetLevel {
    pub level: u8,
    pub height: usize,
    pub width: usize,
    /// Distance threshold in grid cells.
    pub threshold: f64,
    pub small_objects: usize,
    pub positives: usize,
    pub beta: f64,
    pub file: String,
    /// The map equals an independent per-cell evaluation.
    pub brute_force_match: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct TargetsSummary {
    pub schema: &'static str,
    pub image: [usize; 2],
    pub anchor_base: f64,
    pub num_objects: usize,
    pub levels: Vec<TargetLevel>,
}

pub fn cmd_targets_check(cfg: &RunConfig, stdout: &mut dyn Write) -> CliResult<()> {
    let gt_path = input_path(&cfg.gt, &cfg.fixture, GT_FILE, "gt")?;
    let gt = GroundTruthSet::from_json(&read(&gt_path)?)?;
    gt.check_within(cfg.height, cfg.width)?;
    let base = cfg.anchors.base;
    let betas: BTreeMap<u8, f64> = beta_schedule(cfg.l_min, cfg.l_max, cfg.beta_end).into_iter().collect();
    let dir = out_dir(cfg, "targets")?;
    let mut levels = Vec::new();
    for l in cfg.l_min..=cfg.l_max {
        let (h, w) = level_dims(cfg.height, cfg.width, l);
        let v = level_query_target(&gt, l, h, w, base);
        let file = format!("v_p{l}.qdt");
        save_tensor(&v, &dir.join(&file))?;
        let brute = brute_force_query_target(&gt, l, h, w, base);
        levels.push(TargetLevel {
            level: l,
            height: h,
            width: w,
            threshold: grid_threshold(l, base),
            small_objects: gt.objects.iter().filter(|o| is_small_for_level(o, l, base)).count(),
            positives: v.data().iter().filter(|&&x| x > 0.0).count(),
            beta: betas[&l],
            file,
            brute_force_match: v.data() == brute.as_slice(),
        });
    }
    let summary = TargetsSummary {
        schema: SCHEMA,
        image: [cfg.height, cfg.width],
        anchor_base: base,
        num_objects: gt.objects.len(),
        levels,
    };
    let json = to_json(&summary);
    write_file(&dir.join("summary.json"), json.as_bytes())?;
    stdout.write_all(json.as_bytes()).ok();
    if summary.levels.iter().all(|l| l.brute_force_match) {
        Ok(())
    } else {
        Err(CliError::Failed("target map disagrees with brute force".into()))
    }
}
