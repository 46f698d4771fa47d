//! Binary segmentation metrics: confusion counts, mIoU over {background,
//! foreground}, and boundary IoU.
//!
//! Dataset figures are pooled: counts are summed over images before any
//! ratio is taken.

use std::ops::{Add, AddAssign};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pseudolabel::BinaryMask;
use crate::raster::{Grid, RasterError};

/// Ground-truth value excluded from evaluation.
pub const IGNORE: u8 = 255;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error("no evaluated pixels")]
    NoPixels,
    #[error("nothing to aggregate")]
    Empty,
}

pub type Result<T, E = MetricsError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
    pub ignored: u64,
}

impl ConfusionCounts {
    pub fn evaluated(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn total(&self) -> u64 {
        self.evaluated() + self.ignored
    }

    /// Foreground IoU in `[0, 1]`; 1 when the class is absent from both.
    pub fn iou_fg(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp + self.fn_)
    }

    /// Background IoU in `[0, 1]`; 1 when the class is absent from both.
    pub fn iou_bg(&self) -> f64 {
        ratio(self.tn, self.tn + self.fn_ + self.fp)
    }
}

impl Add for ConfusionCounts {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        Self {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
            tn: self.tn + o.tn,
            ignored: self.ignored + o.ignored,
        }
    }
}

impl AddAssign for ConfusionCounts {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 { 1.0 } else { num as f64 / den as f64 }
}

/// Checks that every ground-truth value is 0, 1 or 255.
pub fn validate_ground_truth(gt: &Grid<u8>) -> Result<(), RasterError> {
    match gt.data().iter().position(|&v| v > 1 && v != IGNORE) {
        Some(index) => Err(RasterError::InvalidLabel { value: u16::from(gt.data()[index]), index, allowed: "{0, 1, 255}" }),
        None => Ok(()),
    }
}

/// Pixel counts with foreground as the positive class. Ground-truth pixels
/// equal to 255 are only counted as ignored.
pub fn confusion(pred: &BinaryMask, gt: &Grid<u8>) -> Result<ConfusionCounts> {
    pred.grid().ensure_same_dims(gt)?;
    validate_ground_truth(gt)?;
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.grid().data().iter().zip(gt.data()) {
        match (p, g) {
            (_, IGNORE) => c.ignored += 1,
            (1, 1) => c.tp += 1,
            (1, _) => c.fp += 1,
            (_, 1) => c.fn_ += 1,
            _ => c.tn += 1,
        }
    }
    Ok(c)
}

/// Mean of foreground and background IoU, in percent.
pub fn miou(c: &ConfusionCounts) -> Result<f64> {
    if c.evaluated() == 0 {
        return Err(MetricsError::NoPixels);
    }
    Ok(50.0 * (c.iou_fg() + c.iou_bg()))
}

/// `max(1, round(0.02 · diagonal))`.
pub fn default_biou_radius(width: usize, height: usize) -> usize {
    let diag = ((width * width + height * height) as f64).sqrt();
    ((0.02 * diag).round() as usize).max(1)
}

fn boundary_pixels(m: &BinaryMask) -> Grid<u8> {
    let g = m.grid();
    let (w, h) = g.dims();
    let at = |x: isize, y: isize| -> u8 {
        if x < 0 || y < 0 || x >= w as isize || y >= h as isize { 0 } else { g.get(x as usize, y as usize) }
    };
    Grid::from_fn(w, h, |x, y| {
        let (xi, yi) = (x as isize, y as isize);
        let v = g.get(x, y);
        u8::from([(1, 0), (-1, 0), (0, 1), (0, -1)].iter().any(|&(dx, dy)| at(xi + dx, yi + dy) != v))
    })
}

// Separable square max filter (Chebyshev dilation), zero outside the frame.
fn dilate(g: &Grid<u8>, r: usize) -> Grid<u8> {
    let (w, h) = g.dims();
    let rows = Grid::from_fn(w, h, |x, y| {
        let (lo, hi) = (x.saturating_sub(r), (x + r).min(w - 1));
        (lo..=hi).map(|xx| g.get(xx, y)).max().unwrap_or(0)
    });
    Grid::from_fn(w, h, |x, y| {
        let (lo, hi) = (y.saturating_sub(r), (y + r).min(h - 1));
        (lo..=hi).map(|yy| rows.get(x, yy)).max().unwrap_or(0)
    })
}

/// Pixels within Chebyshev distance `radius` of a boundary pixel.
///
/// A boundary pixel differs from at least one 4-neighbour, where positions
/// outside the frame count as background. Radius 0 yields the boundary
/// pixels themselves.
pub fn boundary_region(m: &BinaryMask, radius: usize) -> BinaryMask {
    BinaryMask::from_grid_unchecked(dilate(&boundary_pixels(m), radius))
}

/// Intersection and union of the boundary-restricted foregrounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct BoundaryCounts {
    pub intersection: u64,
    pub union: u64,
}

impl BoundaryCounts {
    /// Percent; 100 when both restricted sets are empty.
    pub fn biou(&self) -> f64 {
        if self.union == 0 { 100.0 } else { 100.0 * self.intersection as f64 / self.union as f64 }
    }
}

impl Add for BoundaryCounts {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        Self { intersection: self.intersection + o.intersection, union: self.union + o.union }
    }
}

/// Boundary counts for a pair. Pixels where `ignore` is set are excluded.
fn boundary_counts_masked(
    pred: &BinaryMask,
    gt: &BinaryMask,
    radius: usize,
    ignore: Option<&Grid<u8>>,
) -> Result<BoundaryCounts> {
    pred.grid().ensure_same_dims(gt.grid())?;
    let pd = boundary_region(pred, radius);
    let gd = boundary_region(gt, radius);
    let mut c = BoundaryCounts::default();
    for i in 0..pred.grid().len() {
        if ignore.is_some_and(|g| g.data()[i] == IGNORE) {
            continue;
        }
        let a = pred.grid().data()[i] == 1 && pd.grid().data()[i] == 1;
        let b = gt.grid().data()[i] == 1 && gd.grid().data()[i] == 1;
        c.intersection += u64::from(a && b);
        c.union += u64::from(a || b);
    }
    Ok(c)
}

pub fn boundary_counts(pred: &BinaryMask, gt: &BinaryMask, radius: usize) -> Result<BoundaryCounts> {
    boundary_counts_masked(pred, gt, radius, None)
}

/// Boundary IoU in percent.
pub fn biou(pred: &BinaryMask, gt: &BinaryMask, radius: usize) -> Result<f64> {
    Ok(boundary_counts(pred, gt, radius)?.biou())
}

/// Per-image terms that [`aggregate`] pools.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageEval {
    pub confusion: ConfusionCounts,
    pub boundary: BoundaryCounts,
    pub radius: usize,
}

/// Evaluates one prediction against a ground truth in `{0, 1, 255}`.
///
/// `radius` defaults to 2% of the image diagonal. For the boundary terms
/// the ground-truth foreground is `gt == 1` and ignored pixels are skipped.
pub fn evaluate_image(pred: &BinaryMask, gt: &Grid<u8>, radius: Option<usize>) -> Result<ImageEval> {
    let confusion = confusion(pred, gt)?;
    let radius = radius.unwrap_or_else(|| default_biou_radius(gt.width(), gt.height()));
    let gt_fg = BinaryMask::from_grid_unchecked(gt.map(|v| u8::from(v == 1)));
    let has_ignore = confusion.ignored > 0;
    let boundary = boundary_counts_masked(pred, &gt_fg, radius, has_ignore.then_some(gt))?;
    Ok(ImageEval { confusion, boundary, radius })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub miou: f64,
    pub iou_fg: f64,
    pub iou_bg: f64,
    pub biou: f64,
    pub images: usize,
    /// Largest radius used by any image.
    pub biou_radius: usize,
}

/// Pools confusion and boundary counts over all images.
pub fn aggregate(images: &[ImageEval]) -> Result<EvalReport> {
    if images.is_empty() {
        return Err(MetricsError::Empty);
    }
    let c = images.iter().fold(ConfusionCounts::default(), |a, e| a + e.confusion);
    let b = images.iter().fold(BoundaryCounts::default(), |a, e| a + e.boundary);
    Ok(EvalReport {
        miou: miou(&c)?,
        iou_fg: 100.0 * c.iou_fg(),
        iou_bg: 100.0 * c.iou_bg(),
        biou: b.biou(),
        images: images.len(),
        biou_radius: images.iter().map(|e| e.radius).max().unwrap_or(0),
    })
}

/// Markdown header for a comparison table with one (mIoU, bIoU) column
/// pair per subset.
pub fn table_header(subsets: &[&str]) -> String {
    let mut head = String::from("| Method |");
    let mut rule = String::from("|---|");
    for s in subsets {
        head.push_str(&format!(" {s} mIoU | {s} bIoU |"));
        rule.push_str("---:|---:|");
    }
    format!("{head}\n{rule}")
}

/// One markdown table row, values to two decimals.
pub fn table_row(method: &str, reports: &[EvalReport]) -> String {
    let mut row = format!("| {method} |");
    for r in reports {
        row.push_str(&format!(" {:.2} | {:.2} |", r.miou, r.biou));
    }
    row
}
