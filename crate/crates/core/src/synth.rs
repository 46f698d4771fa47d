//! Synthetic two-plane scenes with known ground truth.
//!
//! A scene is a flat ground plane at one inverse depth with a few disk
//! shaped plants at a nearer depth, plus Gaussian sensor noise. The RGB
//! image colours plants green and ground brown with per-pixel noise, so
//! colour is informative but not decisive.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use std::path::{Path, PathBuf};

use crate::corpus::{self, CorpusError, Manifest, SampleRecord, SampleStatus, Split};
use crate::pseudolabel::BinaryMask;
use crate::raster::{self, Grid, ImageFormat, Raster2D, RgbImage};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneParams {
    pub width: usize,
    pub height: usize,
    pub fg_depth: f64,
    pub bg_depth: f64,
    pub noise_sigma: f64,
    pub max_blobs: usize,
    /// Accepted foreground fraction range; scenes are redrawn until they fit.
    pub min_fg: f64,
    pub max_fg: f64,
    pub color_noise: f64,
}

impl Default for SceneParams {
    fn default() -> Self {
        Self {
            width: 256,
            height: 256,
            fg_depth: 0.8,
            bg_depth: 0.3,
            noise_sigma: 0.02,
            max_blobs: 4,
            min_fg: 0.05,
            max_fg: 0.6,
            color_noise: 40.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Scene {
    pub depth: Grid<f64>,
    pub rgb: RgbImage,
    pub truth: BinaryMask,
}

const PLANT_RGB: [f64; 3] = [70.0, 140.0, 60.0];
const GROUND_RGB: [f64; 3] = [120.0, 95.0, 70.0];

fn draw_truth(rng: &mut ChaCha8Rng, p: &SceneParams) -> BinaryMask {
    let (w, h) = (p.width as f64, p.height as f64);
    let side = w.min(h);
    for _ in 0..1000 {
        let blobs: Vec<(f64, f64, f64)> = (0..rng.random_range(1..=p.max_blobs.max(1)))
            .map(|_| {
                (
                    rng.random_range(0.15 * w..=0.85 * w),
                    rng.random_range(0.15 * h..=0.85 * h),
                    rng.random_range(0.047 * side..=0.27 * side),
                )
            })
            .collect();
        let mask = BinaryMask::from_fn(p.width, p.height, |x, y| {
            blobs.iter().any(|&(cx, cy, r)| (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2) <= r * r)
        });
        let cov = mask.coverage();
        if (p.min_fg..=p.max_fg).contains(&cov) {
            return mask;
        }
    }
    panic!("no scene satisfies the foreground fraction bounds");
}

/// Deterministic scene for `seed`.
pub fn generate_scene(seed: u64, p: &SceneParams) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let truth = draw_truth(&mut rng, p);
    let depth_noise = Normal::new(0.0, p.noise_sigma.max(0.0)).expect("finite sigma");
    let depth = Grid::from_fn(p.width, p.height, |x, y| {
        let base = if truth.get(x, y) { p.fg_depth } else { p.bg_depth };
        base + depth_noise.sample(&mut rng)
    });
    let color_noise = Normal::new(0.0, p.color_noise.max(0.0)).expect("finite sigma");
    let rgb = Grid::from_fn(p.width, p.height, |x, y| {
        let base = if truth.get(x, y) { PLANT_RGB } else { GROUND_RGB };
        base.map(|c| (c + color_noise.sample(&mut rng)).round().clamp(0.0, 255.0) as u8)
    });
    Scene { depth, rgb, truth }
}

/// Flips a `fraction` of pixels chosen uniformly without replacement.
pub fn flip_pixels(mask: &BinaryMask, fraction: f64, seed: u64) -> BinaryMask {
    let mut grid = mask.grid().clone();
    let n = grid.len();
    let k = ((fraction.clamp(0.0, 1.0) * n as f64).round() as usize).min(n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in rand::seq::index::sample(&mut rng, n, k) {
        grid.data_mut()[i] ^= 1;
    }
    BinaryMask::new(grid).expect("flipping keeps values binary")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusOptions {
    pub train: usize,
    pub test: usize,
    pub seed: u64,
    /// Fraction of pixels flipped when deriving train pseudo-masks from
    /// the ground truth.
    pub flip_fraction: f64,
    pub scene: SceneParams,
}

impl Default for CorpusOptions {
    fn default() -> Self {
        Self { train: 8, test: 4, seed: 0, flip_fraction: 0.2, scene: SceneParams::default() }
    }
}

pub fn scene_id(i: usize) -> String {
    format!("scene_{i:04}")
}

/// Writes a synthetic corpus under `dir`:
///
/// ```text
/// manifest.json
/// images/<id>.png        RGB
/// depth/<id>.pfm         inverse depth, closer is larger
/// gt/<id>.png            ground truth, 0/1
/// masks/pseudo/<id>.png  noisy pseudo-mask (train split only)
/// ```
///
/// Train samples point `mask_path` at the noisy pseudo-mask, test samples
/// at their ground truth.
pub fn write_corpus(dir: &Path, opts: &CorpusOptions) -> Result<Manifest, CorpusError> {
    for sub in ["images", "depth", "gt", "masks/pseudo"] {
        let d = dir.join(sub);
        std::fs::create_dir_all(&d).map_err(|source| CorpusError::Io { path: d, source })?;
    }
    let mut manifest = Manifest::new(dir);
    for i in 0..opts.train + opts.test {
        let id = scene_id(i);
        let scene = generate_scene(opts.seed.wrapping_add(i as u64), &opts.scene);
        let rel = |sub: &str, ext: &str| PathBuf::from(sub).join(format!("{id}.{ext}"));
        let (image_path, depth_path, gt_path) = (rel("images", "png"), rel("depth", "pfm"), rel("gt", "png"));
        raster::save_rgb_png(&scene.rgb, &dir.join(&image_path))?;
        raster::save_gray(&Raster2D::float64(scene.depth)?, &dir.join(&depth_path), ImageFormat::Pfm)?;
        raster::save_gray(&scene.truth.to_raster(), &dir.join(&gt_path), ImageFormat::Png)?;
        let split = if i < opts.train { Split::Train } else { Split::Test };
        let mask_path = match split {
            Split::Train => {
                let noisy = flip_pixels(&scene.truth, opts.flip_fraction, opts.seed ^ (0x5eed_0000 + i as u64));
                let p = rel("masks/pseudo", "png");
                raster::save_gray(&noisy.to_raster(), &dir.join(&p), ImageFormat::Png)?;
                p
            }
            Split::Test => gt_path,
        };
        manifest.samples.push(SampleRecord {
            id,
            image_path,
            depth_path,
            mask_path: Some(mask_path),
            source: "synthetic".into(),
            split,
            status: SampleStatus::Pending,
            coverage: None,
        });
    }
    corpus::save_manifest(&manifest, &dir.join("manifest.json"))?;
    Ok(manifest)
}
