use depthseg::pseudolabel::{DepthMap, Polarity, PseudoLabelError};
use depthseg::raster::{Grid, Raster2D, RasterError, RgbImage, DEFAULT_P_HI, DEFAULT_P_LO};
use depthseg::BinaryMask;

pub const DEFAULT_ALPHA: f64 = 0.45;
pub const DEFAULT_TINT: [u8; 3] = [255, 0, 255];

/// `round((1 - alpha) * rgb + alpha * tint)` on mask pixels, the source
/// colour elsewhere.
pub fn composite_overlay(rgb: &RgbImage, mask: &BinaryMask, alpha: f64, tint: [u8; 3]) -> Result<RgbImage, RasterError> {
    rgb.ensure_same_dims(mask.grid())?;
    if !(0.0..=1.0).contains(&alpha) {
        return Err(RasterError::InvalidArgument(format!("alpha {alpha} outside [0, 1]")));
    }
    let data = rgb
        .data()
        .iter()
        .zip(mask.grid().data())
        .map(|(px, &m)| {
            if m == 0 {
                return *px;
            }
            std::array::from_fn(|c| ((1.0 - alpha) * f64::from(px[c]) + alpha * f64::from(tint[c])).round() as u8)
        })
        .collect();
    Grid::new(rgb.width(), rgb.height(), data)
}

/// Percentile-normalized depth as 8-bit grayscale, nearer surfaces bright.
pub fn depth_visualization(raw: &Raster2D, polarity: Polarity) -> Result<Grid<u8>, PseudoLabelError> {
    let d = DepthMap::from_raw(raw, DEFAULT_P_LO, DEFAULT_P_HI, polarity)?;
    Ok(d.values().map(|v| {
        let near = match polarity {
            Polarity::CloserIsLarger => v,
            Polarity::CloserIsSmaller => 1.0 - v,
        };
        (near * 255.0).round() as u8
    }))
}
