use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use depthseg::corpus::{coverage_stats, load_manifest, replay_journal, CorpusStats, COVERAGE_BINS};
use depthseg::fade::{grad_check, GradCheckDims};
use depthseg::metrics::{self, aggregate, evaluate_image, table_header, table_row, validate_ground_truth};
use depthseg::pseudolabel::{
    depth_to_mask, DegenerateScene, FitOptions, HistogramParams, PseudoLabelError, PseudoLabelOptions,
};
use depthseg::raster::{self, Grid, ImageFormat, Raster2D};
use depthseg::selftrain::{build_trimap, run_two_stage, SelfTrainOptions, TrainOptions};
use depthseg::synth::{write_corpus, CorpusOptions, SceneParams};
use depthseg::BinaryMask;
use depthseg_review::{AppState, ServiceConfig};
use rayon::prelude::*;
use serde::Serialize;

use crate::{
    ensure, Command, EvalArgs, FadeCheckArgs, PseudolabelArgs, SelftrainArgs, ServeArgs, StatsArgs, SynthArgs,
    TrimapArgs,
};

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Pseudolabel(a) => pseudolabel(a),
        Command::Trimap(a) => trimap(a),
        Command::Eval(a) => eval(a),
        Command::Stats(a) => stats(a),
        Command::Selftrain(a) => selftrain(a),
        Command::FadeCheck(a) => fade_check(a),
        Command::Serve(a) => serve(a),
        Command::Synth(a) => synth(a),
    }
}

const RASTER_EXTENSIONS: [&str; 4] = ["png", "pgm", "pfm", "ppm"];

/// Raster files in `dir` keyed by file stem.
fn list_rasters(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))? {
        let path = entry?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if !path.is_file() || !ext.is_some_and(|e| RASTER_EXTENSIONS.contains(&e.as_str())) {
            continue;
        }
        let stem = path.file_stem().and_then(|s| s.to_str()).ok_or_else(|| anyhow!("bad file name {}", path.display()))?;
        if let Some(prev) = out.insert(stem.to_string(), path.clone()) {
            bail!("{} and {} share the stem {stem:?}", prev.display(), path.display());
        }
    }
    Ok(out)
}

fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Pairs two files, or the files of two directories by stem.
fn pair_inputs(a: &Path, b: &Path) -> Result<Vec<(String, PathBuf, PathBuf)>> {
    match (a.is_dir(), b.is_dir()) {
        (false, false) => Ok(vec![(stem(a), a.to_path_buf(), b.to_path_buf())]),
        (true, true) => {
            let (la, lb) = (list_rasters(a)?, list_rasters(b)?);
            let mut out = Vec::with_capacity(la.len());
            for (id, pa) in la {
                let pb = lb.get(&id).ok_or_else(|| anyhow!("{id}: no counterpart in {}", b.display()))?;
                out.push((id, pa, pb.clone()));
            }
            if out.is_empty() {
                bail!("no raster files in {}", a.display());
            }
            Ok(out)
        }
        _ => Err(crate::Invalid(format!("{} and {} must both be files or both directories", a.display(), b.display())).into()),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    raster::write_atomic(path, &bytes).with_context(|| format!("writing {}", path.display()))
}

// A closed pipe (`depthseg ... | head`) is not an error.
fn print_stdout(text: &str) -> Result<()> {
    use std::io::Write;
    let mut out = std::io::stdout().lock();
    match writeln!(out, "{text}").and_then(|_| out.flush()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e).context("writing to standard output"),
        _ => Ok(()),
    }
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    print_stdout(&serde_json::to_string_pretty(value)?)
}

fn load_mask(path: &Path) -> Result<BinaryMask> {
    let r = raster::load_gray(path)?;
    BinaryMask::from_raster(&r).with_context(|| format!("reading mask {}", path.display()))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

#[derive(Debug, Serialize)]
struct ImageFailure {
    id: String,
    error: String,
}

#[derive(Debug, Serialize)]
struct ManualReview {
    id: String,
    #[serde(flatten)]
    scene: DegenerateScene,
}

#[derive(Debug, Serialize)]
struct PseudolabelSummary {
    images: usize,
    labelled: usize,
    degenerate: usize,
    failed: Vec<ImageFailure>,
    options: PseudoLabelOptions,
}

enum LabelOutcome {
    Labelled,
    Degenerate(Box<DegenerateScene>),
    Failed(String),
}

fn pseudolabel(a: PseudolabelArgs) -> Result<()> {
    ensure(a.bins >= 2, || format!("--bins must be at least 2, got {}", a.bins))?;
    ensure(a.lambda >= 0.0 && a.lambda.is_finite(), || format!("--lambda must be finite and >= 0, got {}", a.lambda))?;
    ensure(a.gamma > 0.0 && a.gamma.is_finite(), || format!("--gamma must be finite and > 0, got {}", a.gamma))?;
    ensure(a.sigma >= 0.0 && a.sigma.is_finite(), || format!("--sigma must be finite and >= 0, got {}", a.sigma))?;
    ensure((0.0..100.0).contains(&a.p_lo) && a.p_lo < a.p_hi && a.p_hi <= 100.0, || {
        format!("need 0 <= --p-lo < --p-hi <= 100, got {} and {}", a.p_lo, a.p_hi)
    })?;
    ensure(a.workers != Some(0), || "--workers must be at least 1".into())?;

    let opts = PseudoLabelOptions {
        p_lo: a.p_lo,
        p_hi: a.p_hi,
        smoothing_sigma: a.sigma,
        histogram: HistogramParams { bins: a.bins, lambda: a.lambda, exponent: a.gamma },
        fit: FitOptions::default(),
        rule: a.rule,
        polarity: a.polarity,
    };
    let inputs: Vec<(String, PathBuf)> = list_rasters(&a.depth_dir)?.into_iter().collect();
    let rgb = match &a.rgb_dir {
        Some(d) => Some(list_rasters(d)?),
        None => None,
    };
    let (mask_dir, report_dir) = (a.out.join("masks"), a.out.join("reports"));
    create_dir(&mask_dir)?;
    create_dir(&report_dir)?;

    let label_one = |id: &str, path: &Path| -> Result<LabelOutcome> {
        let depth = raster::load_gray(path)?;
        let image = match &rgb {
            Some(m) => {
                let p = m.get(id).ok_or_else(|| anyhow!("no RGB image for {id}"))?;
                Some(raster::load_rgb(p)?)
            }
            None => None,
        };
        match depth_to_mask(&depth, image.as_ref(), &opts) {
            Ok((mask, report)) => {
                raster::save_gray(&mask.to_raster(), &mask_dir.join(format!("{id}.png")), ImageFormat::Png)?;
                write_json(&report_dir.join(format!("{id}.json")), &report)?;
                Ok(LabelOutcome::Labelled)
            }
            Err(PseudoLabelError::Degenerate(scene)) => Ok(LabelOutcome::Degenerate(scene)),
            Err(e) => Err(e.into()),
        }
    };

    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = a.workers {
        pool = pool.num_threads(n);
    }
    let pool = pool.build()?;
    // Results come back in input order, which is sorted by id.
    let outcomes: Vec<(String, LabelOutcome)> = pool.install(|| {
        inputs
            .par_iter()
            .map(|(id, path)| {
                let outcome = label_one(id, path).unwrap_or_else(|e| LabelOutcome::Failed(format!("{e:#}")));
                (id.clone(), outcome)
            })
            .collect()
    });

    let mut review = Vec::new();
    let mut failed = Vec::new();
    let mut labelled = 0;
    for (id, o) in outcomes {
        match o {
            LabelOutcome::Labelled => labelled += 1,
            LabelOutcome::Degenerate(scene) => {
                log::warn!("{id}: {}; queued for manual review", scene.reason);
                review.push(ManualReview { id, scene: *scene });
            }
            LabelOutcome::Failed(error) => {
                log::error!("{id}: {error}");
                failed.push(ImageFailure { id, error });
            }
        }
    }
    let summary = PseudolabelSummary { images: inputs.len(), labelled, degenerate: review.len(), failed, options: opts };
    write_json(&a.out.join("manual_review.json"), &review)?;
    write_json(&a.out.join("summary.json"), &summary)?;
    print_json(&summary)?;
    if !summary.failed.is_empty() {
        bail!("{} of {} images failed", summary.failed.len(), summary.images);
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct TrimapImage {
    id: String,
    ignore_fraction: f64,
}

#[derive(Debug, Serialize)]
struct TrimapSummary {
    images: usize,
    ignore_fraction: f64,
    per_image: Vec<TrimapImage>,
}

fn trimap(a: TrimapArgs) -> Result<()> {
    let pairs = pair_inputs(&a.pseudo, &a.pred)?;
    let to_dir = a.pseudo.is_dir();
    if to_dir {
        create_dir(&a.out)?;
    }
    let mut per_image = Vec::new();
    let (mut ignored, mut total) = (0usize, 0usize);
    for (id, pp, qp) in &pairs {
        let t = build_trimap(&load_mask(pp)?, &load_mask(qp)?).with_context(|| id.clone())?;
        let dest = if to_dir { a.out.join(format!("{id}.png")) } else { a.out.clone() };
        raster::save_gray(&Raster2D::Byte8(t.grid().clone()), &dest, ImageFormat::Png)?;
        ignored += t.ignored();
        total += t.grid().len();
        per_image.push(TrimapImage { id: id.clone(), ignore_fraction: t.ignore_fraction() });
    }
    let ignore_fraction = if total == 0 { 0.0 } else { ignored as f64 / total as f64 };
    print_json(&TrimapSummary { images: pairs.len(), ignore_fraction, per_image })
}

fn load_ground_truth(path: &Path) -> Result<Grid<u8>> {
    let g = match raster::load_gray(path)? {
        Raster2D::Byte8(g) => g,
        Raster2D::Uint16(g) => {
            let bad = g.data().iter().position(|&v| v > 255);
            ensure(bad.is_none(), || format!("{}: label above 255", path.display()))?;
            g.map(|v| v as u8)
        }
        Raster2D::Float64(_) => bail!("{}: ground truth must be an integer raster", path.display()),
    };
    validate_ground_truth(&g).with_context(|| format!("reading ground truth {}", path.display()))?;
    Ok(g)
}

fn eval(a: EvalArgs) -> Result<()> {
    let pairs = pair_inputs(&a.pred, &a.gt)?;
    let evals = pairs
        .par_iter()
        .map(|(id, pp, gp)| -> Result<metrics::ImageEval> {
            let pred = load_mask(pp)?;
            let gt = load_ground_truth(gp)?;
            evaluate_image(&pred, &gt, a.biou_radius).with_context(|| id.clone())
        })
        .collect::<Result<Vec<_>>>()?;
    let report = aggregate(&evals)?;
    if let Some(path) = &a.report {
        write_json(path, &report)?;
    }
    print_stdout(&format!("{}\n{}", table_header(&[a.subset.as_str()]), table_row(&a.method, &[report])))?;
    Ok(())
}

fn stats(a: StatsArgs) -> Result<()> {
    let mut m = load_manifest(&a.manifest)?;
    let cov = coverage_stats(&mut m, COVERAGE_BINS);
    for s in &cov.skipped {
        log::warn!("sample {}: mask skipped: {}", s.id, s.error);
    }
    if let Some(j) = &a.journal {
        m = replay_journal(j, &m)?.manifest;
    }
    let stats = CorpusStats::of(&m);
    match &a.out {
        Some(p) => write_json(p, &stats),
        None => print_json(&stats),
    }
}

fn selftrain(a: SelftrainArgs) -> Result<()> {
    ensure(a.lr > 0.0 && a.lr.is_finite(), || format!("--lr must be finite and > 0, got {}", a.lr))?;
    let m = load_manifest(&a.manifest)?;
    let opts = SelfTrainOptions {
        train: TrainOptions {
            epochs: a.epochs,
            learning_rate: a.lr,
            max_pixels_per_image: (a.max_pixels > 0).then_some(a.max_pixels),
            seed: a.seed,
        },
        polarity: a.polarity,
        ..Default::default()
    };
    let stages = run_two_stage(&m, &opts)?;
    for s in &stages {
        log::info!("stage {}: held-out mIoU {:.2}, ignore fraction {:.4}", s.stage, s.eval_miou, s.ignore_fraction);
    }
    write_json(&a.out, &stages)
}

fn fade_check(a: FadeCheckArgs) -> Result<()> {
    ensure(a.c >= 1 && a.cm >= 1 && a.h >= 1 && a.w >= 1, || "--c, --cm, --h and --w must be at least 1".into())?;
    ensure(a.k % 2 == 1, || format!("--k must be odd, got {}", a.k))?;
    ensure(a.eps > 0.0 && a.eps.is_finite(), || format!("--eps must be finite and > 0, got {}", a.eps))?;
    let dims = GradCheckDims { c: a.c, cm: a.cm, k: a.k, h: a.h, w: a.w };
    let report = grad_check(dims, a.seed, a.eps)?;
    print_json(&report)?;
    let worst = report.max_rel_error();
    if worst > a.tol {
        bail!("max relative error {worst:e} exceeds {:e}", a.tol);
    }
    Ok(())
}

fn serve(a: ServeArgs) -> Result<()> {
    ensure((0.0..=1.0).contains(&a.alpha), || format!("--alpha must lie in [0, 1], got {}", a.alpha))?;
    let mut config = ServiceConfig::new(&a.manifest, &a.journal);
    config.static_dir = a.static_dir;
    config.overlay_alpha = a.alpha;
    config.polarity = a.polarity;
    let state = AppState::load(config)?;
    for w in &state.replay_warnings {
        log::warn!("{w}");
    }
    let addr = SocketAddr::new(a.host, a.port);
    eprintln!("serving on http://{addr}");
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(depthseg_review::serve(state, addr))?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct SynthSummary {
    manifest: PathBuf,
    samples: usize,
}

fn synth(a: SynthArgs) -> Result<()> {
    ensure(a.size >= 16, || format!("--size must be at least 16, got {}", a.size))?;
    ensure((0.0..=1.0).contains(&a.flip), || format!("--flip must lie in [0, 1], got {}", a.flip))?;
    ensure(a.train + a.test > 0, || "need at least one sample".into())?;
    let opts = CorpusOptions {
        train: a.train,
        test: a.test,
        seed: a.seed,
        flip_fraction: a.flip,
        scene: SceneParams { width: a.size, height: a.size, ..Default::default() },
    };
    let m = write_corpus(&a.out, &opts)?;
    print_json(&SynthSummary { manifest: a.out.join("manifest.json"), samples: m.samples.len() })
}
