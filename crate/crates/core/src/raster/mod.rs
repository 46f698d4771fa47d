//! Dense pixel grids, multi-channel feature maps and the image formats the
//! rest of the toolkit reads and writes.
//!
//! [`Grid`] is the generic row-major container. [`Raster2D`] tags a grid with
//! one of the three supported scalar kinds so file I/O can round-trip the
//! exact bit depth of the source.

mod filter;
mod io;

use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use filter::{gaussian_blur, normalize_percentile, percentile_nearest_rank, sobel_magnitude};
pub use io::{
    decode_gray, decode_rgb, encode_gray, encode_rgb_png, image_dimensions, load_feature_map,
    load_gray, load_rgb, read_feature_map, save_feature_map, save_gray, save_rgb_png,
    write_atomic, write_feature_map, ImageFormat,
};

/// Default lower percentile used when normalizing raw depth.
pub const DEFAULT_P_LO: f64 = 1.0;
/// Default upper percentile used when normalizing raw depth.
pub const DEFAULT_P_HI: f64 = 99.0;

#[derive(Debug, Error)]
pub enum RasterError {
    #[error("invalid dimensions {width}x{height} for {len} values")]
    Dimensions { width: usize, height: usize, len: usize },
    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },
    #[error("dimension mismatch: {left:?} vs {right:?}")]
    Mismatch { left: (usize, usize), right: (usize, usize) },
    #[error("label {value} at pixel {index} is not one of {allowed}")]
    InvalidLabel { value: u16, index: usize, allowed: &'static str },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: unsupported image at byte {offset}: {detail}", path.display())]
    Unsupported { path: PathBuf, offset: u64, detail: String },
    #[error("{}: malformed header at byte {offset}: {detail}", path.display())]
    Malformed { path: PathBuf, offset: u64, detail: String },
    #[error("{}: truncated payload at byte {offset}, expected {expected} bytes", path.display())]
    Truncated { path: PathBuf, offset: u64, expected: u64 },
    #[error("cannot encode a {kind} raster as {format:?}")]
    KindMismatch { kind: PixelKind, format: ImageFormat },
    #[error("png encoding failed: {0}")]
    Encode(String),
}

pub type Result<T, E = RasterError> = std::result::Result<T, E>;

/// Row-major 2-D grid with at least one pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Grid<T> {
    width: usize,
    height: usize,
    data: Vec<T>,
}

impl<T: Copy> Grid<T> {
    pub fn new(width: usize, height: usize, data: Vec<T>) -> Result<Self> {
        if width == 0 || height == 0 || width.checked_mul(height) != Some(data.len()) {
            return Err(RasterError::Dimensions { width, height, len: data.len() });
        }
        Ok(Self { width, height, data })
    }

    /// Grid with every pixel set to `value`.
    ///
    /// Panics if either dimension is zero.
    pub fn filled(width: usize, height: usize, value: T) -> Self {
        assert!(width > 0 && height > 0, "grid dimensions must be non-zero");
        Self { width, height, data: vec![value; width * height] }
    }

    /// Builds a grid from `f(x, y)`. Panics if either dimension is zero.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        assert!(width > 0 && height > 0, "grid dimensions must be non-zero");
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> T {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: T) {
        self.data[y * self.width + x] = value;
    }

    /// Replicate-border access: coordinates outside the grid are clamped to
    /// the nearest edge pixel.
    #[inline]
    pub fn get_clamped(&self, x: isize, y: isize) -> T {
        let x = x.clamp(0, self.width as isize - 1) as usize;
        let y = y.clamp(0, self.height as isize - 1) as usize;
        self.get(x, y)
    }

    pub fn map<U: Copy>(&self, f: impl FnMut(T) -> U) -> Grid<U> {
        Grid { width: self.width, height: self.height, data: self.data.iter().copied().map(f).collect() }
    }

    pub fn transpose(&self) -> Self {
        Grid::from_fn(self.height, self.width, |x, y| self.get(y, x))
    }

    pub fn same_dims<U>(&self, other: &Grid<U>) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn ensure_same_dims<U>(&self, other: &Grid<U>) -> Result<()> {
        if self.same_dims(other) {
            Ok(())
        } else {
            Err(RasterError::Mismatch {
                left: (self.width, self.height),
                right: (other.width, other.height),
            })
        }
    }
}

/// 8-bit RGB image.
pub type RgbImage = Grid<[u8; 3]>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PixelKind {
    Byte8,
    Uint16,
    Float64,
}

impl fmt::Display for PixelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PixelKind::Byte8 => "byte8",
            PixelKind::Uint16 => "uint16",
            PixelKind::Float64 => "float64",
        })
    }
}

/// A single-channel raster tagged with its scalar kind.
#[derive(Debug, Clone, PartialEq)]
pub enum Raster2D {
    Byte8(Grid<u8>),
    Uint16(Grid<u16>),
    Float64(Grid<f64>),
}

impl Raster2D {
    /// Wraps a float grid, rejecting NaN and infinities.
    pub fn float64(grid: Grid<f64>) -> Result<Self> {
        if let Some(index) = grid.data().iter().position(|v| !v.is_finite()) {
            return Err(RasterError::NonFinite { index });
        }
        Ok(Raster2D::Float64(grid))
    }

    pub fn kind(&self) -> PixelKind {
        match self {
            Raster2D::Byte8(_) => PixelKind::Byte8,
            Raster2D::Uint16(_) => PixelKind::Uint16,
            Raster2D::Float64(_) => PixelKind::Float64,
        }
    }

    pub fn width(&self) -> usize {
        match self {
            Raster2D::Byte8(g) => g.width(),
            Raster2D::Uint16(g) => g.width(),
            Raster2D::Float64(g) => g.width(),
        }
    }

    pub fn height(&self) -> usize {
        match self {
            Raster2D::Byte8(g) => g.height(),
            Raster2D::Uint16(g) => g.height(),
            Raster2D::Float64(g) => g.height(),
        }
    }

    /// Converts to a float grid holding the raw stored values (no rescaling).
    pub fn to_f64(&self) -> Grid<f64> {
        match self {
            Raster2D::Byte8(g) => g.map(f64::from),
            Raster2D::Uint16(g) => g.map(f64::from),
            Raster2D::Float64(g) => g.clone(),
        }
    }

    pub fn as_byte8(&self) -> Option<&Grid<u8>> {
        match self {
            Raster2D::Byte8(g) => Some(g),
            _ => None,
        }
    }
}

/// A `C x H x W` float tensor in channel-major, row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        let expected = channels.checked_mul(height).and_then(|v| v.checked_mul(width));
        if channels == 0 || height == 0 || width == 0 || expected != Some(data.len()) {
            return Err(RasterError::Dimensions { width, height, len: data.len() });
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(RasterError::NonFinite { index });
        }
        Ok(Self { channels, height, width, data })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        assert!(channels > 0 && height > 0 && width > 0, "feature map dimensions must be non-zero");
        Self { channels, height, width, data: vec![0.0; channels * height * width] }
    }

    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut out = Self::zeros(channels, height, width);
        for c in 0..channels {
            for i in 0..height {
                for j in 0..width {
                    let idx = out.index(c, i, j);
                    out.data[idx] = f(c, i, j);
                }
            }
        }
        out
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, c: usize, i: usize, j: usize) -> usize {
        (c * self.height + i) * self.width + j
    }

    #[inline]
    pub fn get(&self, c: usize, i: usize, j: usize) -> f64 {
        self.data[self.index(c, i, j)]
    }

    /// Replicate-border spatial access.
    #[inline]
    pub fn get_clamped(&self, c: usize, i: isize, j: isize) -> f64 {
        let i = i.clamp(0, self.height as isize - 1) as usize;
        let j = j.clamp(0, self.width as isize - 1) as usize;
        self.get(c, i, j)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_rejects_bad_lengths() {
        assert!(Grid::new(2, 2, vec![0u8; 3]).is_err());
        assert!(Grid::new(0, 2, Vec::<u8>::new()).is_err());
        assert!(Grid::new(2, 2, vec![0u8; 4]).is_ok());
    }

    #[test]
    fn float_raster_rejects_nan() {
        let g = Grid::new(2, 1, vec![0.0, f64::NAN]).unwrap();
        assert!(matches!(Raster2D::float64(g), Err(RasterError::NonFinite { index: 1 })));
    }

    #[test]
    fn clamped_access_replicates_edges() {
        let g = Grid::from_fn(3, 2, |x, y| (x + 10 * y) as u8);
        assert_eq!(g.get_clamped(-5, 0), 0);
        assert_eq!(g.get_clamped(7, 9), 12);
    }

    #[test]
    fn feature_map_layout() {
        let f = FeatureMap::from_fn(2, 3, 4, |c, i, j| (c * 100 + i * 10 + j) as f64);
        assert_eq!(f.get(1, 2, 3), 123.0);
        assert_eq!(f.data()[f.index(1, 0, 0)], 100.0);
        assert_eq!(f.get_clamped(0, -1, 9), 3.0);
    }
}
