//! Two-stage self-training with trimaps.
//!
//! Stage 1 fits a model to the depth pseudo-masks. Its own predictions are
//! compared against those masks; pixels where the two disagree become
//! "ignore" in a trimap, and stage 2 retrains from scratch on the trimaps
//! with a loss that skips ignored pixels.
//!
//! The model is deliberately small: per-pixel logistic regression on colour,
//! normalized depth and depth-gradient features. It stands in for a
//! segmentation network so that the training protocol can be exercised
//! end to end.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{self, CorpusError, Manifest, SampleRecord, SampleStatus, Split};
use crate::metrics::{self, ImageEval, MetricsError, IGNORE};
use crate::pseudolabel::{BinaryMask, DepthMap, Polarity, PseudoLabelError};
use crate::raster::{self, Grid, RasterError, RgbImage, DEFAULT_P_HI, DEFAULT_P_LO};

/// Probabilities are clamped to `[P_EPS, 1 - P_EPS]` before taking logs.
pub const P_EPS: f64 = 1e-7;

#[derive(Debug, Error)]
pub enum SelfTrainError {
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    PseudoLabel(#[from] PseudoLabelError),
    #[error("sample {id}: {detail}")]
    Sample { id: String, detail: String },
    #[error("no supervised pixels: every target pixel is ignored")]
    NoSupervision,
    #[error("no {0:?} samples with masks in the manifest")]
    EmptySplit(Split),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T, E = SelfTrainError> = std::result::Result<T, E>;

/// Training target with values 0 (ground), 1 (crop) and 255 (ignore).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trimap(Grid<u8>);

impl Trimap {
    pub fn new(grid: Grid<u8>) -> Result<Self, RasterError> {
        if let Some(index) = grid.data().iter().position(|&v| v > 1 && v != IGNORE) {
            return Err(RasterError::InvalidLabel {
                value: u16::from(grid.data()[index]),
                index,
                allowed: "{0, 1, 255}",
            });
        }
        Ok(Self(grid))
    }

    /// Every pixel supervised.
    pub fn from_mask(mask: &BinaryMask) -> Self {
        Self(mask.grid().clone())
    }

    pub fn grid(&self) -> &Grid<u8> {
        &self.0
    }

    pub fn ignored(&self) -> usize {
        self.0.data().iter().filter(|&&v| v == IGNORE).count()
    }

    pub fn ignore_fraction(&self) -> f64 {
        if self.0.is_empty() { 0.0 } else { self.ignored() as f64 / self.0.len() as f64 }
    }
}

/// Keeps the pseudo label where it agrees with the prediction and marks
/// the pixel ignored otherwise.
pub fn build_trimap(pseudo: &BinaryMask, pred: &BinaryMask) -> Result<Trimap> {
    pseudo.grid().ensure_same_dims(pred.grid())?;
    let data = pseudo.grid().data().iter().zip(pred.grid().data()).map(|(&a, &b)| if a == b { a } else { IGNORE }).collect();
    Ok(Trimap(Grid::new(pseudo.width(), pseudo.height(), data)?))
}

// Loss and d(loss)/dp for one supervised pixel, before dividing by N.
fn bce_term(p: f64, t: f64) -> (f64, f64) {
    let p = p.clamp(P_EPS, 1.0 - P_EPS);
    (-(t * p.ln() + (1.0 - t) * (1.0 - p).ln()), -t / p + (1.0 - t) / (1.0 - p))
}

/// Mean binary cross-entropy over non-ignored pixels and its gradient with
/// respect to each probability (zero on ignored pixels). When every pixel
/// is ignored the loss is 0 with a zero gradient.
pub fn masked_bce_loss(probs: &Grid<f64>, target: &Trimap) -> Result<(f64, Grid<f64>)> {
    probs.ensure_same_dims(target.grid())?;
    if let Some(index) = probs.data().iter().position(|p| !(0.0..=1.0).contains(p)) {
        return Err(SelfTrainError::InvalidArgument(format!("probability {} at pixel {index}", probs.data()[index])));
    }
    let n = target.0.len() - target.ignored();
    let mut grad = Grid::filled(probs.width(), probs.height(), 0.0);
    if n == 0 {
        return Ok((0.0, grad));
    }
    let mut loss = 0.0;
    for ((&p, &t), g) in probs.data().iter().zip(target.0.data()).zip(grad.data_mut()) {
        if t == IGNORE {
            continue;
        }
        let (l, d) = bce_term(p, f64::from(t));
        loss += l;
        *g = d / n as f64;
    }
    Ok((loss / n as f64, grad))
}

pub const FEATURES: usize = 6;

/// Per-pixel features: r, g, b scaled to `[0, 1]`, normalized depth with
/// closer pixels larger, depth gradient magnitude scaled by its maximum,
/// and a constant bias term.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelFeatures {
    width: usize,
    height: usize,
    rows: Vec<[f64; FEATURES]>,
}

impl PixelFeatures {
    pub fn new(rgb: &RgbImage, depth: &DepthMap) -> Result<Self> {
        let d = depth.values();
        rgb.ensure_same_dims(d)?;
        let near = match depth.polarity() {
            Polarity::CloserIsLarger => d.clone(),
            Polarity::CloserIsSmaller => d.map(|v| 1.0 - v),
        };
        let grad = raster::sobel_magnitude(&near);
        let gmax = grad.data().iter().cloned().fold(0.0, f64::max);
        let rows = rgb
            .data()
            .iter()
            .zip(near.data())
            .zip(grad.data())
            .map(|((c, &z), &g)| {
                let gn = if gmax > 0.0 { g / gmax } else { 0.0 };
                [f64::from(c[0]) / 255.0, f64::from(c[1]) / 255.0, f64::from(c[2]) / 255.0, z, gn, 1.0]
            })
            .collect();
        Ok(Self { width: rgb.width(), height: rgb.height(), rows })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn rows(&self) -> &[[f64; FEATURES]] {
        &self.rows
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ToyPixelModel {
    pub weights: [f64; FEATURES],
}

impl ToyPixelModel {
    pub fn probability(&self, x: &[f64; FEATURES]) -> f64 {
        sigmoid(x.iter().zip(&self.weights).map(|(a, b)| a * b).sum())
    }

    pub fn predict_proba(&self, f: &PixelFeatures) -> Grid<f64> {
        Grid::new(f.width, f.height, f.rows.iter().map(|x| self.probability(x)).collect())
            .expect("feature rows match dimensions")
    }

    /// Crop where the probability is at least 0.5.
    pub fn predict_mask(&self, f: &PixelFeatures) -> BinaryMask {
        BinaryMask::from_fn(f.width, f.height, |x, y| self.probability(&f.rows[y * f.width + x]) >= 0.5)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainOptions {
    pub epochs: usize,
    pub learning_rate: f64,
    /// Supervised pixels drawn per image, without replacement. `None` uses
    /// them all.
    pub max_pixels_per_image: Option<usize>,
    /// Seeds the pixel subsampling.
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self { epochs: 300, learning_rate: 2.0, max_pixels_per_image: Some(4096), seed: 0 }
    }
}

/// One training image: features and a trimap of matching size.
#[derive(Debug, Clone)]
pub struct TrainingSample {
    pub features: PixelFeatures,
    pub target: Trimap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub model: ToyPixelModel,
    /// Masked loss of the current weights at the start of each epoch, then
    /// once more for the final weights.
    pub loss_curve: Vec<f64>,
    pub pixels: usize,
}

/// Full-batch gradient descent from zero weights. A step that would raise
/// the loss is rejected and the learning rate halved, so the loss curve
/// never increases.
pub fn train_toy_model(samples: &[TrainingSample], opts: &TrainOptions) -> Result<TrainOutcome> {
    if !(opts.learning_rate > 0.0 && opts.learning_rate.is_finite()) {
        return Err(SelfTrainError::InvalidArgument(format!("learning rate {}", opts.learning_rate)));
    }
    let mut xs: Vec<[f64; FEATURES]> = Vec::new();
    let mut ts: Vec<f64> = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    for s in samples {
        if s.target.0.dims() != s.features.dims() {
            return Err(RasterError::Mismatch { left: s.target.0.dims(), right: s.features.dims() }.into());
        }
        let supervised: Vec<usize> = (0..s.target.0.len()).filter(|&i| s.target.0.data()[i] != IGNORE).collect();
        let picked: Vec<usize> = match opts.max_pixels_per_image {
            Some(k) if k < supervised.len() => {
                let mut idx = rand::seq::index::sample(&mut rng, supervised.len(), k).into_vec();
                idx.sort_unstable();
                idx.into_iter().map(|i| supervised[i]).collect()
            }
            _ => supervised,
        };
        for i in picked {
            xs.push(s.features.rows[i]);
            ts.push(f64::from(s.target.0.data()[i]));
        }
    }
    if xs.is_empty() {
        return Err(SelfTrainError::NoSupervision);
    }

    let n = xs.len() as f64;
    let loss_and_grad = |w: &[f64; FEATURES]| {
        let model = ToyPixelModel { weights: *w };
        let mut loss = 0.0;
        let mut grad = [0.0; FEATURES];
        for (x, &t) in xs.iter().zip(&ts) {
            let p = model.probability(x);
            let (l, dp) = bce_term(p, t);
            loss += l;
            // dp/dz = p(1-p); exact for unclamped p, and the clamp only binds
            // where p(1-p) is below 1e-7 anyway.
            let dz = dp * p * (1.0 - p);
            for (g, xi) in grad.iter_mut().zip(x) {
                *g += dz * xi;
            }
        }
        (loss / n, grad.map(|g| g / n))
    };

    let mut w = [0.0; FEATURES];
    let mut lr = opts.learning_rate;
    let (mut loss, mut grad) = loss_and_grad(&w);
    let mut curve = Vec::with_capacity(opts.epochs + 1);
    for _ in 0..opts.epochs {
        curve.push(loss);
        loop {
            let cand: [f64; FEATURES] = std::array::from_fn(|k| w[k] - lr * grad[k]);
            let (cl, cg) = loss_and_grad(&cand);
            if cl <= loss {
                (w, loss, grad) = (cand, cl, cg);
                break;
            }
            lr *= 0.5;
            if lr < 1e-12 {
                break;
            }
        }
    }
    curve.push(loss);
    Ok(TrainOutcome { model: ToyPixelModel { weights: w }, loss_curve: curve, pixels: xs.len() })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelfTrainOptions {
    pub train: TrainOptions,
    pub p_lo: f64,
    pub p_hi: f64,
    pub polarity: Polarity,
}

impl Default for SelfTrainOptions {
    fn default() -> Self {
        Self { train: TrainOptions::default(), p_lo: DEFAULT_P_LO, p_hi: DEFAULT_P_HI, polarity: Polarity::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: u8,
    pub loss_curve: Vec<f64>,
    pub ignore_fraction: f64,
    pub eval_miou: f64,
    pub model: ToyPixelModel,
}

/// A sample loaded for training or evaluation. `mask` is the pseudo-mask
/// for train samples and the ground truth for test samples.
#[derive(Debug, Clone)]
pub struct LoadedSample {
    pub id: String,
    pub features: PixelFeatures,
    pub mask: BinaryMask,
}

pub fn load_sample(m: &Manifest, s: &SampleRecord, opts: &SelfTrainOptions) -> Result<LoadedSample> {
    let wrap = |e: &dyn std::fmt::Display| SelfTrainError::Sample { id: s.id.clone(), detail: e.to_string() };
    let mask_path = s.mask_path.as_ref().ok_or_else(|| wrap(&"no mask"))?;
    let rgb = raster::load_rgb(&m.resolve(&s.image_path)).map_err(|e| wrap(&e))?;
    let raw = raster::load_gray(&m.resolve(&s.depth_path)).map_err(|e| wrap(&e))?;
    let depth = DepthMap::from_raw(&raw, opts.p_lo, opts.p_hi, opts.polarity).map_err(|e| wrap(&e))?;
    let features = PixelFeatures::new(&rgb, &depth).map_err(|e| wrap(&e))?;
    let mask = corpus::read_mask(&m.resolve(mask_path)).map_err(|e| wrap(&e))?;
    if (mask.width(), mask.height()) != features.dims() {
        return Err(wrap(&format!("mask is {}x{}, image is {}x{}", mask.width(), mask.height(), features.width, features.height)));
    }
    Ok(LoadedSample { id: s.id.clone(), features, mask })
}

/// Samples of `split` that carry a mask and were not rejected in review.
pub fn usable_samples(m: &Manifest, split: Split) -> impl Iterator<Item = &SampleRecord> {
    m.samples.iter().filter(move |s| s.split == split && s.mask_path.is_some() && s.status != SampleStatus::Rejected)
}

/// Pooled mIoU (percent) of the model's masks against the test masks.
pub fn evaluate_model(model: &ToyPixelModel, test: &[LoadedSample]) -> Result<f64> {
    let evals = test
        .iter()
        .map(|s| metrics::evaluate_image(&model.predict_mask(&s.features), s.mask.grid(), None))
        .collect::<Result<Vec<ImageEval>, _>>()?;
    Ok(metrics::aggregate(&evals)?.miou)
}

/// Runs both stages on the manifest's train split and evaluates each on the
/// test split.
pub fn run_two_stage(m: &Manifest, opts: &SelfTrainOptions) -> Result<[StageReport; 2]> {
    let load = |split| -> Result<Vec<LoadedSample>> {
        let v = usable_samples(m, split).map(|s| load_sample(m, s, opts)).collect::<Result<Vec<_>>>()?;
        if v.is_empty() { Err(SelfTrainError::EmptySplit(split)) } else { Ok(v) }
    };
    let train = load(Split::Train)?;
    let test = load(Split::Test)?;

    let stage1_data: Vec<TrainingSample> =
        train.iter().map(|s| TrainingSample { features: s.features.clone(), target: Trimap::from_mask(&s.mask) }).collect();
    let s1 = train_toy_model(&stage1_data, &opts.train)?;
    let stage1 = StageReport {
        stage: 1,
        loss_curve: s1.loss_curve,
        ignore_fraction: 0.0,
        eval_miou: evaluate_model(&s1.model, &test)?,
        model: s1.model,
    };

    let mut ignored = 0usize;
    let mut total = 0usize;
    let stage2_data = train
        .iter()
        .zip(stage1_data)
        .map(|(s, d)| {
            let target = build_trimap(&s.mask, &stage1.model.predict_mask(&s.features))?;
            ignored += target.ignored();
            total += target.grid().len();
            Ok(TrainingSample { features: d.features, target })
        })
        .collect::<Result<Vec<_>>>()?;
    let s2 = train_toy_model(&stage2_data, &opts.train)?;
    let stage2 = StageReport {
        stage: 2,
        loss_curve: s2.loss_curve,
        ignore_fraction: ignored as f64 / total as f64,
        eval_miou: evaluate_model(&s2.model, &test)?,
        model: s2.model,
    };
    Ok([stage1, stage2])
}
