use serde::{Deserialize, Serialize};

use super::{
    cumulative_curve, fit_sigmoid, select_threshold, weighted_depth_histogram, BinaryMask, DepthMap, FitOptions,
    HistogramParams, Polarity, PseudoLabelError, Result, SigmoidFit, ThresholdRule,
};
use crate::raster::{gaussian_blur, sobel_magnitude, Raster2D, RgbImage, DEFAULT_P_HI, DEFAULT_P_LO};

/// Amplitude below which a fitted curve is treated as flat.
const MIN_AMPLITUDE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PseudoLabelOptions {
    pub p_lo: f64,
    pub p_hi: f64,
    /// Gaussian σ (pixels) applied to normalized depth before the gradient
    /// and histogram stages. 0 disables smoothing.
    pub smoothing_sigma: f64,
    pub histogram: HistogramParams,
    pub fit: FitOptions,
    pub rule: ThresholdRule,
    pub polarity: Polarity,
}

impl Default for PseudoLabelOptions {
    fn default() -> Self {
        Self {
            p_lo: DEFAULT_P_LO,
            p_hi: DEFAULT_P_HI,
            smoothing_sigma: 2.0,
            histogram: HistogramParams::default(),
            fit: FitOptions::default(),
            rule: ThresholdRule::default(),
            polarity: Polarity::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelReport {
    pub threshold: f64,
    pub rule: ThresholdRule,
    pub polarity: Polarity,
    pub fit: SigmoidFit,
    pub coverage: f64,
    pub bins: usize,
    pub bins_used: usize,
}

/// Why a scene produced no mask, with whatever the pipeline got as far as.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegenerateScene {
    pub reason: String,
    pub rule: ThresholdRule,
    pub polarity: Polarity,
    pub fit: Option<SigmoidFit>,
    pub bins: usize,
    pub bins_used: usize,
}

/// Raw depth to foreground mask.
///
/// Stages: percentile normalization, Gaussian smoothing, Sobel gradient,
/// gradient-weighted histogram of the smoothed depth, cumulative curve,
/// sigmoid fit, threshold selection. The threshold is applied to the
/// unsmoothed normalized depth. `rgb`, when given, must match the depth
/// dimensions.
pub fn depth_to_mask(
    depth_raw: &Raster2D,
    rgb: Option<&RgbImage>,
    opts: &PseudoLabelOptions,
) -> Result<(BinaryMask, PseudoLabelReport)> {
    let depth = DepthMap::from_raw(depth_raw, opts.p_lo, opts.p_hi, opts.polarity)?;
    if let Some(rgb) = rgb {
        depth.values().ensure_same_dims(rgb)?;
    }
    if !(opts.smoothing_sigma >= 0.0 && opts.smoothing_sigma.is_finite()) {
        return Err(PseudoLabelError::InvalidInput(format!(
            "smoothing sigma must be finite and >= 0, got {}",
            opts.smoothing_sigma
        )));
    }
    let smooth = gaussian_blur(depth.values(), opts.smoothing_sigma).map(|v| v.clamp(0.0, 1.0));
    let gradient = sobel_magnitude(&smooth);
    let hist = weighted_depth_histogram(&smooth, &gradient, opts.histogram)?;
    let bins_used = hist.occupied();

    let degenerate = |reason: &str, fit: Option<SigmoidFit>| {
        PseudoLabelError::Degenerate(Box::new(DegenerateScene {
            reason: reason.to_string(),
            rule: opts.rule,
            polarity: opts.polarity,
            fit,
            bins: hist.bins(),
            bins_used,
        }))
    };
    if bins_used < 2 {
        return Err(degenerate("depth occupies a single histogram bin", None));
    }

    let curve = cumulative_curve(&hist)?;
    let fit = fit_sigmoid(&curve, opts.fit)?;
    if !fit.converged {
        return Err(degenerate("sigmoid fit did not converge", Some(fit)));
    }
    if !(fit.l >= MIN_AMPLITUDE) {
        return Err(degenerate("fitted curve has no transition", Some(fit)));
    }
    let threshold = select_threshold(&fit, &hist, opts.rule)?;
    let mask = depth.mask_at(threshold);
    let report = PseudoLabelReport {
        threshold,
        rule: opts.rule,
        polarity: opts.polarity,
        fit,
        coverage: mask.coverage(),
        bins: hist.bins(),
        bins_used,
    };
    Ok((mask, report))
}
