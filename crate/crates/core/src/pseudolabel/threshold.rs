use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{PseudoLabelError, Result, SigmoidFit, WeightedHistogram};

/// `ln(2 + √3)`: distance, in units of `1/k`, from the logistic center to
/// either extremum of its second derivative.
pub const CURVATURE_OFFSET: f64 = 1.316_957_896_924_816_6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdRule {
    /// Center of the sigmoid (maximum slope).
    Inflection,
    /// Curvature extremum nearer the histogram valley.
    #[default]
    MaxCurvatureAuto,
    MaxCurvatureLeft,
    MaxCurvatureRight,
}

impl ThresholdRule {
    pub const ALL: [ThresholdRule; 4] = [
        ThresholdRule::Inflection,
        ThresholdRule::MaxCurvatureAuto,
        ThresholdRule::MaxCurvatureLeft,
        ThresholdRule::MaxCurvatureRight,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ThresholdRule::Inflection => "inflection",
            ThresholdRule::MaxCurvatureAuto => "max_curvature_auto",
            ThresholdRule::MaxCurvatureLeft => "max_curvature_left",
            ThresholdRule::MaxCurvatureRight => "max_curvature_right",
        }
    }
}

impl fmt::Display for ThresholdRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ThresholdRule {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let s = s.replace('-', "_");
        Self::ALL.into_iter().find(|r| r.as_str() == s).ok_or_else(|| format!("unknown threshold rule {s:?}"))
    }
}

// Centered box filter with zero padding.
fn box_smooth(w: &[f64], half: usize) -> Vec<f64> {
    (0..w.len())
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half).min(w.len() - 1);
            w[lo..=hi].iter().sum::<f64>() / (2 * half + 1) as f64
        })
        .collect()
}

/// Depth of the deepest valley between the two largest modes of `h`.
///
/// Modes are local maxima of the 5-bin box-smoothed histogram. The valley is
/// the minimum-weight raw bin strictly between them; when several bins share
/// the minimum, the midpoint of the first and last is returned. `None` when
/// fewer than two modes exist.
pub fn deepest_valley(h: &WeightedHistogram) -> Option<f64> {
    let n = h.bins();
    if n < 3 {
        return None;
    }
    let s = box_smooth(&h.weights, 2);
    let mut modes: Vec<usize> = (0..n)
        .filter(|&i| {
            let left_ok = i == 0 || s[i] > s[i - 1];
            let right_ok = i + 1 == n || s[i] >= s[i + 1];
            left_ok && right_ok && s[i] > 0.0
        })
        .collect();
    if modes.len() < 2 {
        return None;
    }
    modes.sort_by(|&a, &b| s[b].total_cmp(&s[a]).then(a.cmp(&b)));
    let (a, b) = (modes[0].min(modes[1]), modes[0].max(modes[1]));
    if b - a < 2 {
        return None;
    }
    let inner = &h.weights[a + 1..b];
    let min = inner.iter().copied().fold(f64::INFINITY, f64::min);
    let first = a + 1 + inner.iter().position(|&w| w == min)?;
    let last = a + 1 + inner.iter().rposition(|&w| w == min)?;
    Some(0.5 * (h.center(first) + h.center(last)))
}

/// Threshold in `[0, 1]` derived from the fitted curve.
pub fn select_threshold(fit: &SigmoidFit, h: &WeightedHistogram, rule: ThresholdRule) -> Result<f64> {
    if !fit.is_finite() || !(fit.k > 0.0) {
        return Err(PseudoLabelError::InvalidInput(format!(
            "threshold needs finite parameters with k > 0, got b={} L={} k={} x0={}",
            fit.b, fit.l, fit.k, fit.x0
        )));
    }
    let offset = CURVATURE_OFFSET / fit.k;
    let (left, right) = (fit.x0 - offset, fit.x0 + offset);
    let t = match rule {
        ThresholdRule::Inflection => fit.x0,
        ThresholdRule::MaxCurvatureLeft => left,
        ThresholdRule::MaxCurvatureRight => right,
        ThresholdRule::MaxCurvatureAuto => {
            let valley = deepest_valley(h).unwrap_or(fit.x0);
            if (right - valley).abs() < (left - valley).abs() { right } else { left }
        }
    };
    Ok(t.clamp(0.0, 1.0))
}
