//! Depth map to crop pseudo-mask.
//!
//! The pipeline normalizes raw depth, builds a histogram in which each pixel
//! is weighted by its local gradient energy, fits a four-parameter logistic
//! curve to the cumulative weight, and cuts the depth range at a
//! characteristic point of the fitted curve (its inflection, or one of the
//! two extrema of its curvature).
//!
//! Gradient weighting makes boundary pixels dominate the histogram. Their
//! depths bridge the gap between plant and ground, so the cumulative curve
//! has a single logistic transition centered on the boundary depth instead
//! of one step per surface.

mod histogram;
mod pipeline;
mod sigmoid;
mod threshold;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::raster::{Grid, Raster2D, RasterError};

pub use histogram::{cumulative_curve, weighted_depth_histogram, CurveSample, HistogramParams, WeightedHistogram};
pub use pipeline::{depth_to_mask, DegenerateScene, PseudoLabelOptions, PseudoLabelReport};
pub use sigmoid::{fit_sigmoid, FitOptions, SigmoidFit};
pub(crate) use sigmoid::logistic;
pub use threshold::{deepest_valley, select_threshold, ThresholdRule, CURVATURE_OFFSET};

#[derive(Debug, Error)]
pub enum PseudoLabelError {
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("degenerate scene: {}", .0.reason)]
    Degenerate(Box<DegenerateScene>),
}

pub type Result<T, E = PseudoLabelError> = std::result::Result<T, E>;

/// Which end of the depth range is nearer to the camera.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Polarity {
    /// Inverse-depth style maps: nearer surfaces have larger values.
    #[default]
    CloserIsLarger,
    CloserIsSmaller,
}

impl Polarity {
    /// Foreground decision for a normalized depth value at threshold `t`.
    #[inline]
    pub fn is_foreground(self, value: f64, t: f64) -> bool {
        match self {
            Polarity::CloserIsLarger => value >= t,
            Polarity::CloserIsSmaller => value <= t,
        }
    }
}

impl fmt::Display for Polarity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Polarity::CloserIsLarger => "closer_is_larger",
            Polarity::CloserIsSmaller => "closer_is_smaller",
        })
    }
}

impl FromStr for Polarity {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.replace('-', "_").as_str() {
            "closer_is_larger" => Ok(Polarity::CloserIsLarger),
            "closer_is_smaller" => Ok(Polarity::CloserIsSmaller),
            other => Err(format!("unknown polarity {other:?}")),
        }
    }
}

/// Normalized depth in `[0, 1]` together with its polarity.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    values: Grid<f64>,
    polarity: Polarity,
}

impl DepthMap {
    pub fn new(values: Grid<f64>, polarity: Polarity) -> Result<Self> {
        if let Some(i) = values.data().iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(PseudoLabelError::InvalidInput(format!(
                "normalized depth {} at pixel {i} lies outside [0, 1]",
                values.data()[i]
            )));
        }
        Ok(Self { values, polarity })
    }

    /// Percentile-normalizes a raw depth raster.
    pub fn from_raw(raw: &Raster2D, p_lo: f64, p_hi: f64, polarity: Polarity) -> Result<Self> {
        let values = crate::raster::normalize_percentile(&raw.to_f64(), p_lo, p_hi)?;
        Ok(Self { values, polarity })
    }

    pub fn values(&self) -> &Grid<f64> {
        &self.values
    }

    pub fn polarity(&self) -> Polarity {
        self.polarity
    }

    /// Applies the decision rule at threshold `t`.
    pub fn mask_at(&self, t: f64) -> BinaryMask {
        BinaryMask::from_grid_unchecked(self.values.map(|v| u8::from(self.polarity.is_foreground(v, t))))
    }
}

/// Foreground mask with raw values `{0, 1}` (1 = crop).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask(Grid<u8>);

impl BinaryMask {
    pub fn new(grid: Grid<u8>) -> Result<Self, RasterError> {
        if let Some(index) = grid.data().iter().position(|&v| v > 1) {
            return Err(RasterError::InvalidLabel { value: u16::from(grid.data()[index]), index, allowed: "{0, 1}" });
        }
        Ok(Self(grid))
    }

    pub(crate) fn from_grid_unchecked(grid: Grid<u8>) -> Self {
        debug_assert!(grid.data().iter().all(|&v| v <= 1));
        Self(grid)
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        Self(Grid::from_fn(width, height, |x, y| u8::from(f(x, y))))
    }

    pub fn all_ones(width: usize, height: usize) -> Self {
        Self(Grid::filled(width, height, 1))
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self(Grid::filled(width, height, 0))
    }

    /// Accepts a byte8 or uint16 raster whose values are all 0 or 1.
    pub fn from_raster(raster: &Raster2D) -> Result<Self, RasterError> {
        match raster {
            Raster2D::Byte8(g) => Self::new(g.clone()),
            Raster2D::Uint16(g) => {
                if let Some(index) = g.data().iter().position(|&v| v > 1) {
                    return Err(RasterError::InvalidLabel { value: g.data()[index], index, allowed: "{0, 1}" });
                }
                Ok(Self(g.map(|v| v as u8)))
            }
            Raster2D::Float64(_) => Err(RasterError::InvalidArgument("a mask must be an integer raster".into())),
        }
    }

    pub fn to_raster(&self) -> Raster2D {
        Raster2D::Byte8(self.0.clone())
    }

    pub fn grid(&self) -> &Grid<u8> {
        &self.0
    }

    pub fn into_grid(self) -> Grid<u8> {
        self.0
    }

    pub fn width(&self) -> usize {
        self.0.width()
    }

    pub fn height(&self) -> usize {
        self.0.height()
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.0.get(x, y) == 1
    }

    pub fn foreground_count(&self) -> usize {
        self.0.data().iter().filter(|&&v| v == 1).count()
    }

    /// Fraction of pixels labeled foreground.
    pub fn coverage(&self) -> f64 {
        self.foreground_count() as f64 / self.0.len() as f64
    }

    pub fn complement(&self) -> Self {
        Self(self.0.map(|v| 1 - v))
    }
}
