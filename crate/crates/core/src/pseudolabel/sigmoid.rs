use nalgebra::{Matrix4, Vector4};
use serde::{Deserialize, Serialize};

use super::{CurveSample, PseudoLabelError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub max_iter: usize,
    /// Relative parameter-change tolerance.
    pub tol: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self { max_iter: 200, tol: 1e-8 }
    }
}

/// Parameters of `f(x) = b + L / (1 + exp(-k (x - x0)))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SigmoidFit {
    pub b: f64,
    #[serde(rename = "L")]
    pub l: f64,
    pub k: f64,
    pub x0: f64,
    pub residual_rms: f64,
    pub iterations: usize,
    pub converged: bool,
}

#[inline]
pub(crate) fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl SigmoidFit {
    pub fn eval(&self, x: f64) -> f64 {
        self.b + self.l * logistic(self.k * (x - self.x0))
    }

    /// First derivative of the fitted curve.
    pub fn derivative(&self, x: f64) -> f64 {
        let s = logistic(self.k * (x - self.x0));
        self.l * self.k * s * (1.0 - s)
    }

    /// Second derivative of the fitted curve.
    pub fn second_derivative(&self, x: f64) -> f64 {
        let s = logistic(self.k * (x - self.x0));
        self.l * self.k * self.k * s * (1.0 - s) * (1.0 - 2.0 * s)
    }

    pub fn params(&self) -> [f64; 4] {
        [self.b, self.l, self.k, self.x0]
    }

    pub fn is_finite(&self) -> bool {
        self.params().iter().all(|v| v.is_finite())
    }
}

fn cost(p: &Vector4<f64>, samples: &[CurveSample]) -> f64 {
    samples
        .iter()
        .map(|s| {
            let r = p[0] + p[1] * logistic(p[2] * (s.x - p[3])) - s.y;
            r * r
        })
        .sum()
}

// x where the piecewise-linear curve `sign * y` first reaches `level`.
fn crossing(samples: &[CurveSample], sign: f64, level: f64) -> f64 {
    let v = |s: &CurveSample| sign * s.y;
    if v(&samples[0]) >= level {
        return samples[0].x;
    }
    for w in samples.windows(2) {
        let (a, b) = (v(&w[0]), v(&w[1]));
        if b >= level {
            let t = if b > a { (level - a) / (b - a) } else { 1.0 };
            return w[0].x + t * (w[1].x - w[0].x);
        }
    }
    samples[samples.len() - 1].x
}

/// Least-squares fit of the four-parameter logistic by Levenberg-Marquardt.
///
/// The result is always reported in the non-decreasing form `k > 0`.
/// A flat curve (range below 1e-12) returns `converged = false` with `L = 0`.
pub fn fit_sigmoid(samples: &[CurveSample], opts: FitOptions) -> Result<SigmoidFit> {
    if samples.len() < 4 {
        return Err(PseudoLabelError::InvalidInput(format!(
            "need at least 4 curve samples, got {}",
            samples.len()
        )));
    }
    if samples.iter().any(|s| !s.x.is_finite() || !s.y.is_finite()) {
        return Err(PseudoLabelError::InvalidInput("non-finite curve sample".into()));
    }
    let n = samples.len() as f64;
    let (ymin, ymax) = samples.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), s| (lo.min(s.y), hi.max(s.y)));
    let range = ymax - ymin;
    if range < 1e-12 {
        let mean = samples.iter().map(|s| s.y).sum::<f64>() / n;
        let p = Vector4::new(mean, 0.0, 0.0, 0.5);
        return Ok(SigmoidFit {
            b: mean,
            l: 0.0,
            k: 0.0,
            x0: 0.5,
            residual_rms: (cost(&p, samples) / n).sqrt(),
            iterations: 0,
            converged: false,
        });
    }

    let spacing = samples.windows(2).map(|w| (w[1].x - w[0].x).abs()).fold(f64::INFINITY, f64::min).max(1e-12);
    // Decreasing data starts from the mirrored guess (b = max y, L < 0).
    let sign = if samples[samples.len() - 1].y < samples[0].y { -1.0 } else { 1.0 };
    let lo = if sign > 0.0 { ymin } else { -ymax };
    let x25 = crossing(samples, sign, lo + 0.25 * range);
    let x75 = crossing(samples, sign, lo + 0.75 * range);
    let k0 = 4.0 * range / (x75 - x25).max(spacing);
    let x00 = crossing(samples, sign, lo + 0.5 * range);
    let mut p = if sign > 0.0 {
        Vector4::new(ymin, range, k0, x00)
    } else {
        Vector4::new(ymax, -range, k0, x00)
    };
    let mut c = cost(&p, samples);

    let mut mu = 1e-3;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < opts.max_iter {
        iterations += 1;
        let mut jtj = Matrix4::<f64>::zeros();
        let mut jtr = Vector4::<f64>::zeros();
        for s in samples {
            let z = p[2] * (s.x - p[3]);
            let sg = logistic(z);
            let ds = sg * (1.0 - sg);
            let j = Vector4::new(1.0, sg, p[1] * ds * (s.x - p[3]), -p[1] * ds * p[2]);
            let r = p[0] + p[1] * sg - s.y;
            jtj += j * j.transpose();
            jtr += j * r;
        }
        if jtr.amax() == 0.0 {
            converged = true;
            break;
        }
        let diag_floor = 1e-12 * jtj.diagonal().amax().max(1e-300);

        let mut accepted = false;
        while mu < 1e16 {
            let mut a = jtj;
            for i in 0..4 {
                a[(i, i)] += mu * jtj[(i, i)].max(diag_floor);
            }
            let step = a.cholesky().map(|ch| ch.solve(&(-jtr))).or_else(|| a.lu().solve(&(-jtr)));
            if let Some(delta) = step.filter(|d| d.iter().all(|v| v.is_finite())) {
                let candidate = p + delta;
                let cc = cost(&candidate, samples);
                if cc.is_finite() && cc <= c {
                    let small = delta.norm() < opts.tol * (p.norm() + opts.tol);
                    p = candidate;
                    c = cc;
                    mu = (mu / 10.0).max(1e-12);
                    accepted = true;
                    if small {
                        converged = true;
                    }
                    break;
                }
            }
            mu *= 10.0;
        }
        if converged {
            break;
        }
        if !accepted {
            // No descent direction left at any damping: stationary if the
            // gradient vanishes.
            converged = jtr.amax() <= 1e-10;
            break;
        }
    }

    let (mut b, mut l, mut k, x0) = (p[0], p[1], p[2], p[3]);
    if k < 0.0 {
        b += l;
        l = -l;
        k = -k;
    }
    Ok(SigmoidFit { b, l, k, x0, residual_rms: (c / n).sqrt(), iterations, converged })
}
