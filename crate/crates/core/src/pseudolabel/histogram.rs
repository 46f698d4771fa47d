use serde::{Deserialize, Serialize};

use super::{PseudoLabelError, Result};
use crate::raster::Grid;

/// Histogram construction parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistogramParams {
    pub bins: usize,
    /// Gradient emphasis λ.
    pub lambda: f64,
    /// Exponent γ applied to the scaled gradient before weighting.
    pub exponent: f64,
}

impl Default for HistogramParams {
    fn default() -> Self {
        Self { bins: 256, lambda: 1000.0, exponent: 2.0 }
    }
}

/// Depth histogram in which every pixel contributes `1 + λ·ĝ^γ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedHistogram {
    pub edges: Vec<f64>,
    pub weights: Vec<f64>,
    pub lambda: f64,
    pub exponent: f64,
}

impl WeightedHistogram {
    pub fn bins(&self) -> usize {
        self.weights.len()
    }

    pub fn total(&self) -> f64 {
        self.weights.iter().sum()
    }

    pub fn center(&self, b: usize) -> f64 {
        0.5 * (self.edges[b] + self.edges[b + 1])
    }

    pub fn bin_width(&self) -> f64 {
        1.0 / self.bins() as f64
    }

    /// Number of bins with non-zero weight.
    pub fn occupied(&self) -> usize {
        self.weights.iter().filter(|&&w| w > 0.0).count()
    }

    /// Bin index of a value in `[0, 1]`; 1.0 lands in the last bin.
    #[inline]
    pub fn bin_of(bins: usize, value: f64) -> usize {
        ((value * bins as f64) as usize).min(bins - 1)
    }
}

/// Accumulates the gradient-weighted histogram of `depth` (values in `[0, 1]`).
///
/// `gradient` is rescaled so its maximum is 1. An all-zero gradient leaves
/// every weight at 1 and the result is a plain count histogram.
pub fn weighted_depth_histogram(
    depth: &Grid<f64>,
    gradient: &Grid<f64>,
    params: HistogramParams,
) -> Result<WeightedHistogram> {
    depth.ensure_same_dims(gradient)?;
    let HistogramParams { bins, lambda, exponent } = params;
    if bins < 2 {
        return Err(PseudoLabelError::InvalidInput(format!("need at least 2 bins, got {bins}")));
    }
    if !(lambda >= 0.0 && lambda.is_finite()) || !(exponent > 0.0 && exponent.is_finite()) {
        return Err(PseudoLabelError::InvalidInput(format!(
            "lambda must be finite and >= 0 and exponent finite and > 0, got {lambda} and {exponent}"
        )));
    }
    if let Some(i) = gradient.data().iter().position(|g| !(*g >= 0.0 && g.is_finite())) {
        return Err(PseudoLabelError::InvalidInput(format!("gradient at pixel {i} is negative or non-finite")));
    }
    if let Some(i) = depth.data().iter().position(|d| !(0.0..=1.0).contains(d)) {
        return Err(PseudoLabelError::InvalidInput(format!("depth at pixel {i} lies outside [0, 1]")));
    }

    let gmax = gradient.data().iter().copied().fold(0.0, f64::max);
    let mut weights = vec![0.0; bins];
    for (&d, &g) in depth.data().iter().zip(gradient.data()) {
        let ghat = if gmax > 0.0 { g / gmax } else { 0.0 };
        weights[WeightedHistogram::bin_of(bins, d)] += 1.0 + lambda * ghat.powf(exponent);
    }
    let edges = (0..=bins).map(|b| b as f64 / bins as f64).collect();
    Ok(WeightedHistogram { edges, weights, lambda, exponent })
}

/// One point of the normalized cumulative curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurveSample {
    pub x: f64,
    pub y: f64,
}

/// Normalized cumulative weight at each bin center. The last sample is
/// exactly 1.
pub fn cumulative_curve(h: &WeightedHistogram) -> Result<Vec<CurveSample>> {
    let total = h.total();
    if !(total > 0.0) {
        return Err(PseudoLabelError::InvalidInput("histogram has no weight".into()));
    }
    let mut acc = 0.0;
    let mut out: Vec<CurveSample> = h
        .weights
        .iter()
        .enumerate()
        .map(|(b, w)| {
            acc += w;
            CurveSample { x: h.center(b), y: acc / total }
        })
        .collect();
    if let Some(last) = out.last_mut() {
        last.y = 1.0;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn params(bins: usize, lambda: f64) -> HistogramParams {
        HistogramParams { bins, lambda, exponent: 1.0 }
    }

    #[test]
    fn zero_lambda_counts_pixels() {
        let d = Grid::new(4, 1, vec![0.1, 0.1, 0.6, 1.0]).unwrap();
        let g = Grid::new(4, 1, vec![0.0, 3.0, 1.0, 2.0]).unwrap();
        let h = weighted_depth_histogram(&d, &g, params(2, 0.0)).unwrap();
        assert_eq!(h.weights, vec![2.0, 2.0]);
    }

    #[test]
    fn single_pixel_max_gradient() {
        let d = Grid::filled(1, 1, 0.5);
        let g = Grid::filled(1, 1, 7.0);
        let h = weighted_depth_histogram(&d, &g, params(2, 4.0)).unwrap();
        assert_eq!(h.weights, vec![0.0, 5.0]);
        let h = weighted_depth_histogram(&d, &g, HistogramParams { bins: 2, lambda: 4.0, exponent: 2.0 }).unwrap();
        assert_eq!(h.weights, vec![0.0, 5.0]);
    }

    #[test]
    fn matches_accumulation_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let d = Grid::from_fn(32, 32, |_, _| rng.random::<f64>());
        let g = Grid::from_fn(32, 32, |_, _| rng.random::<f64>() * 3.0);
        for p in [params(16, 4.0), HistogramParams { bins: 256, lambda: 1000.0, exponent: 2.0 }] {
            let h = weighted_depth_histogram(&d, &g, p).unwrap();
            let gmax = g.data().iter().cloned().fold(f64::MIN, f64::max);
            let mut oracle = vec![0.0; p.bins];
            for y in 0..32 {
                for x in 0..32 {
                    let v = d.get(x, y);
                    let mut b = 0;
                    while b + 1 < p.bins && v >= (b + 1) as f64 / p.bins as f64 {
                        b += 1;
                    }
                    oracle[b] += 1.0 + p.lambda * (g.get(x, y) / gmax).powf(p.exponent);
                }
            }
            for (a, o) in h.weights.iter().zip(&oracle) {
                assert!((a - o).abs() <= 1e-9 * o.abs().max(1.0), "{a} vs {o}");
            }
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let d = Grid::filled(2, 2, 0.5);
        assert!(weighted_depth_histogram(&d, &Grid::filled(2, 1, 0.0), params(4, 1.0)).is_err());
        assert!(weighted_depth_histogram(&d, &Grid::filled(2, 2, 0.0), params(1, 1.0)).is_err());
        assert!(weighted_depth_histogram(&d, &Grid::filled(2, 2, -1.0), params(4, 1.0)).is_err());
    }

    #[test]
    fn edges_are_strictly_increasing() {
        let h = weighted_depth_histogram(&Grid::filled(1, 1, 0.0), &Grid::filled(1, 1, 0.0), params(256, 4.0)).unwrap();
        assert_eq!(h.edges.len(), 257);
        assert!(h.edges.windows(2).all(|w| w[0] < w[1]));
        assert_eq!((h.edges[0], h.edges[256]), (0.0, 1.0));
    }

    #[test]
    fn point_mass_is_a_step() {
        let h = WeightedHistogram {
            edges: (0..=4).map(|b| b as f64 / 4.0).collect(),
            weights: vec![0.0, 0.0, 3.0, 0.0],
            lambda: 0.0,
            exponent: 1.0,
        };
        let ys: Vec<f64> = cumulative_curve(&h).unwrap().iter().map(|s| s.y).collect();
        assert_eq!(ys, vec![0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn uniform_weights_give_uniform_cdf() {
        let h = WeightedHistogram {
            edges: (0..=4).map(|b| b as f64 / 4.0).collect(),
            weights: vec![2.0; 4],
            lambda: 0.0,
            exponent: 1.0,
        };
        let c = cumulative_curve(&h).unwrap();
        assert_eq!(c.iter().map(|s| s.y).collect::<Vec<_>>(), vec![0.25, 0.5, 0.75, 1.0]);
        assert_eq!(c.iter().map(|s| s.x).collect::<Vec<_>>(), vec![0.125, 0.375, 0.625, 0.875]);
    }

    #[test]
    fn cumulative_matches_prefix_sums() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let weights: Vec<f64> = (0..64).map(|_| rng.random::<f64>() * 10.0).collect();
        let h = WeightedHistogram {
            edges: (0..=64).map(|b| b as f64 / 64.0).collect(),
            weights: weights.clone(),
            lambda: 0.0,
            exponent: 1.0,
        };
        let total: f64 = weights.iter().sum();
        let c = cumulative_curve(&h).unwrap();
        for b in 0..64 {
            let prefix: f64 = weights[..=b].iter().sum();
            assert!((c[b].y - prefix / total).abs() <= 1e-15, "bin {b}");
        }
        assert!(c.windows(2).all(|w| w[0].y <= w[1].y));
    }

    #[test]
    fn empty_histogram_is_an_error() {
        let h = WeightedHistogram { edges: vec![0.0, 0.5, 1.0], weights: vec![0.0, 0.0], lambda: 0.0, exponent: 1.0 };
        assert!(cumulative_curve(&h).is_err());
    }
}
