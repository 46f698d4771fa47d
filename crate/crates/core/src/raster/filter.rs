//! Neighborhood filters and intensity normalization. All border handling is
//! replicate (clamp-to-edge).

use super::{Grid, RasterError, Result};

/// Gradient magnitude `sqrt(Gx^2 + Gy^2)` with the 3x3 Sobel kernels.
pub fn sobel_magnitude(input: &Grid<f64>) -> Grid<f64> {
    Grid::from_fn(input.width(), input.height(), |x, y| {
        let (x, y) = (x as isize, y as isize);
        let p = |dx: isize, dy: isize| input.get_clamped(x + dx, y + dy);
        let gx = (p(1, -1) + 2.0 * p(1, 0) + p(1, 1)) - (p(-1, -1) + 2.0 * p(-1, 0) + p(-1, 1));
        let gy = (p(-1, 1) + 2.0 * p(0, 1) + p(1, 1)) - (p(-1, -1) + 2.0 * p(0, -1) + p(1, -1));
        gx.hypot(gy)
    })
}

/// Separable Gaussian smoothing with a kernel truncated at `ceil(3 sigma)`.
/// A non-positive `sigma` returns the input unchanged.
pub fn gaussian_blur(input: &Grid<f64>, sigma: f64) -> Grid<f64> {
    if !(sigma > 0.0) {
        return input.clone();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|t| (-((t * t) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= norm);

    let horizontal = Grid::from_fn(input.width(), input.height(), |x, y| -> f64 {
        kernel
            .iter()
            .zip(-radius..=radius)
            .map(|(k, t)| k * input.get_clamped(x as isize + t, y as isize))
            .sum()
    });
    Grid::from_fn(input.width(), input.height(), |x, y| -> f64 {
        kernel
            .iter()
            .zip(-radius..=radius)
            .map(|(k, t)| k * horizontal.get_clamped(x as isize, y as isize + t))
            .sum()
    })
}

/// Nearest-rank percentile of an ascending slice: the element at index
/// `round(p / 100 * (n - 1))`.
pub fn percentile_nearest_rank(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty());
    let idx = ((p / 100.0) * (sorted.len() - 1) as f64).round() as usize;
    sorted[idx.min(sorted.len() - 1)]
}

/// Clips to the `[p_lo, p_hi]` percentiles and maps affinely onto `[0, 1]`.
///
/// A degenerate range (all values clipped to a single level) maps every
/// pixel to 0.5.
pub fn normalize_percentile(input: &Grid<f64>, p_lo: f64, p_hi: f64) -> Result<Grid<f64>> {
    if !(0.0..100.0).contains(&p_lo) || !(p_lo < p_hi && p_hi <= 100.0) {
        return Err(RasterError::InvalidArgument(format!(
            "percentiles must satisfy 0 <= p_lo < p_hi <= 100, got {p_lo} and {p_hi}"
        )));
    }
    if input.is_empty() {
        return Err(RasterError::InvalidArgument("empty raster".into()));
    }
    let mut sorted = input.data().to_vec();
    sorted.sort_by(f64::total_cmp);
    let lo = percentile_nearest_rank(&sorted, p_lo);
    let hi = percentile_nearest_rank(&sorted, p_hi);
    let span = hi - lo;
    if !(span > 0.0) {
        return Ok(input.map(|_| 0.5));
    }
    Ok(input.map(|v| ((v.clamp(lo, hi) - lo) / span).clamp(0.0, 1.0)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn step(width: usize, height: usize) -> Grid<f64> {
        Grid::from_fn(width, height, |x, _| if x < width / 2 { 0.0 } else { 1.0 })
    }

    // Direct 3x3 correlation, written independently of `sobel_magnitude`.
    fn sobel_oracle(g: &Grid<f64>) -> Grid<f64> {
        const KX: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
        const KY: [[f64; 3]; 3] = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];
        Grid::from_fn(g.width(), g.height(), |x, y| {
            let (mut sx, mut sy) = (0.0, 0.0);
            for r in 0..3 {
                for c in 0..3 {
                    let xx = (x as isize + c as isize - 1).clamp(0, g.width() as isize - 1) as usize;
                    let yy = (y as isize + r as isize - 1).clamp(0, g.height() as isize - 1) as usize;
                    sx += KX[r][c] * g.get(xx, yy);
                    sy += KY[r][c] * g.get(xx, yy);
                }
            }
            (sx * sx + sy * sy).sqrt()
        })
    }

    #[test]
    fn sobel_constant_is_zero() {
        let g = Grid::filled(5, 4, 3.25);
        assert!(sobel_magnitude(&g).data().iter().all(|&v| v == 0.0));
        assert_eq!(sobel_magnitude(&Grid::filled(1, 1, 9.0)).data(), &[0.0]);
    }

    #[test]
    fn sobel_step_hits_two_columns() {
        for width in [4, 6, 9] {
            let g = step(width, 5);
            let s = sobel_magnitude(&g);
            for y in 0..5 {
                for x in 0..width {
                    let expected = if x + 1 == width / 2 || x == width / 2 { 4.0 } else { 0.0 };
                    assert_eq!(s.get(x, y), expected, "x={x} y={y} width={width}");
                }
            }
        }
    }

    #[test]
    fn gaussian_preserves_constants_and_mass() {
        let g = Grid::filled(7, 5, 2.5);
        let b = gaussian_blur(&g, 1.7);
        assert!(b.data().iter().all(|v| (v - 2.5).abs() < 1e-12));
        assert_eq!(gaussian_blur(&g, 0.0), g);
    }

    #[test]
    fn percentile_full_range_is_min_max() {
        let g = Grid::from_fn(16, 16, |x, y| (y * 16 + x) as f64);
        let n = normalize_percentile(&g, 0.0, 100.0).unwrap();
        assert_eq!(n.get(0, 0), 0.0);
        assert_eq!(n.get(15, 15), 1.0);
        assert!((n.get(1, 0) - 1.0 / 255.0).abs() < 1e-15);
    }

    #[test]
    fn percentile_constant_is_half() {
        let g = Grid::filled(3, 3, 7.3);
        assert!(normalize_percentile(&g, 1.0, 99.0).unwrap().data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn percentile_clips_tails() {
        // Sort-based oracle: index round(p/100 * 99) of 0..99 gives 1 and 98.
        let values: Vec<f64> = (0..100).map(f64::from).collect();
        let mut sorted = values.clone();
        sorted.sort_by(f64::total_cmp);
        let lo = sorted[(0.01f64 * 99.0).round() as usize];
        let hi = sorted[(0.99f64 * 99.0).round() as usize];
        assert_eq!((lo, hi), (1.0, 98.0));
        let g = Grid::new(100, 1, values).unwrap();
        let n = normalize_percentile(&g, 1.0, 99.0).unwrap();
        assert_eq!(n.get(0, 0), 0.0);
        assert_eq!(n.get(1, 0), 0.0);
        assert_eq!(n.get(98, 0), 1.0);
        assert_eq!(n.get(99, 0), 1.0);
        assert!((n.get(50, 0) - 49.0 / 97.0).abs() < 1e-15);
    }

    #[test]
    fn percentile_rejects_bad_bounds() {
        let g = Grid::filled(2, 2, 1.0);
        assert!(normalize_percentile(&g, 50.0, 50.0).is_err());
        assert!(normalize_percentile(&g, -1.0, 50.0).is_err());
        assert!(normalize_percentile(&g, 1.0, 101.0).is_err());
    }

    fn arb_grid() -> impl Strategy<Value = Grid<f64>> {
        (1usize..9, 1usize..9).prop_flat_map(|(w, h)| {
            prop::collection::vec(-50.0f64..50.0, w * h).prop_map(move |d| Grid::new(w, h, d).unwrap())
        })
    }

    proptest! {
        #[test]
        fn sobel_matches_oracle_and_is_non_negative(g in arb_grid()) {
            let s = sobel_magnitude(&g);
            let o = sobel_oracle(&g);
            for (a, b) in s.data().iter().zip(o.data()) {
                prop_assert!(*a >= 0.0);
                prop_assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
            }
        }

        #[test]
        fn sobel_commutes_with_transpose(g in arb_grid()) {
            let a = sobel_magnitude(&g.transpose());
            let b = sobel_magnitude(&g).transpose();
            for (x, y) in a.data().iter().zip(b.data()) {
                prop_assert!((x - y).abs() <= 1e-12 * (1.0 + y.abs()));
            }
        }

        #[test]
        fn normalized_values_lie_in_unit_interval(g in arb_grid(), lo in 0.0f64..49.0, hi in 51.0f64..=100.0) {
            let n = normalize_percentile(&g, lo, hi).unwrap();
            prop_assert!(n.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }

        #[test]
        fn normalization_is_idempotent_on_unit_span(g in arb_grid()) {
            let n = normalize_percentile(&g, 0.0, 100.0).unwrap();
            let nn = normalize_percentile(&n, 0.0, 100.0).unwrap();
            for (a, b) in n.data().iter().zip(nn.data()) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }
    }
}
