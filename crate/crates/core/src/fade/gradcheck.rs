use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{fade_backward, fade_forward, init_params, FadeParams, Result};
use crate::raster::FeatureMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GradCheckDims {
    pub c: usize,
    pub cm: usize,
    pub k: usize,
    pub h: usize,
    pub w: usize,
}

impl Default for GradCheckDims {
    fn default() -> Self {
        Self { c: 3, cm: 16, k: 5, h: 4, w: 4 }
    }
}

/// Worst disagreement between analytic and central-difference gradients
/// over one group. Relative error is `|a - n| / max(|a|, |n|)`, taken as 0
/// when both are exactly 0.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct GroupError {
    pub max_abs_error: f64,
    pub max_rel_error: f64,
    pub elements: usize,
}

impl GroupError {
    fn push(&mut self, analytic: f64, numeric: f64) {
        let abs = (analytic - numeric).abs();
        let scale = analytic.abs().max(numeric.abs());
        let rel = if scale == 0.0 { 0.0 } else { abs / scale };
        self.max_abs_error = self.max_abs_error.max(abs);
        self.max_rel_error = self.max_rel_error.max(rel);
        self.elements += 1;
    }
}

/// Biases are reported with their weight matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradReport {
    pub dims: GradCheckDims,
    pub seed: u64,
    pub eps: f64,
    pub decoder: GroupError,
    pub encoder: GroupError,
    pub w_e: GroupError,
    pub w_d: GroupError,
    pub w_k: GroupError,
    pub w_g: GroupError,
}

impl GradReport {
    pub fn groups(&self) -> [(&'static str, &GroupError); 6] {
        [
            ("decoder", &self.decoder),
            ("encoder", &self.encoder),
            ("w_e", &self.w_e),
            ("w_d", &self.w_d),
            ("w_k", &self.w_k),
            ("w_g", &self.w_g),
        ]
    }

    pub fn max_rel_error(&self) -> f64 {
        self.groups().iter().map(|(_, g)| g.max_rel_error).fold(0.0, f64::max)
    }
}

struct Instance {
    decoder: FeatureMap,
    encoder: FeatureMap,
    params: FadeParams,
    weights: FeatureMap,
}

impl Instance {
    fn output(&self, d: &FeatureMap, e: &FeatureMap, p: &FadeParams) -> Result<FeatureMap> {
        Ok(fade_forward(d, e, p)?.y)
    }

    /// `(L(+) - L(-)) / 2ε` for `L = Σ R⊙y`. Outputs are differenced before
    /// the weighted sum, which keeps the large common part of `L` out of
    /// the cancellation.
    fn slope(&self, plus: &FeatureMap, minus: &FeatureMap, eps: f64) -> f64 {
        let r = self.weights.data();
        plus.data().iter().zip(minus.data()).zip(r).map(|((a, b), w)| w * (a - b)).sum::<f64>() / (2.0 * eps)
    }
}

fn random_instance(dims: GradCheckDims, seed: u64) -> Result<Instance> {
    let GradCheckDims { c, cm, k, h, w } = dims;
    let mut params = init_params(c, cm, k, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut fill = |v: &mut [f64], a: f64| v.iter_mut().for_each(|x| *x = rng.random_range(-a..=a));
    fill(&mut params.b_e, 0.1);
    fill(&mut params.b_d, 0.1);
    fill(&mut params.w_k, 0.3);
    fill(&mut params.b_k, 0.3);
    fill(&mut params.w_g, 0.5);
    let mut scalar = [0.0];
    fill(&mut scalar, 0.5);
    params.b_g = scalar[0];
    let mut map = |ch, hh, ww| {
        let mut v = vec![0.0; ch * hh * ww];
        fill(&mut v, 1.0);
        FeatureMap::new(ch, hh, ww, v).expect("finite random values")
    };
    let decoder = map(c, h, w);
    let encoder = map(c, 2 * h, 2 * w);
    let weights = map(c, 2 * h, 2 * w);
    Ok(Instance { decoder, encoder, params, weights })
}

#[allow(clippy::too_many_arguments)]
fn central<T: Clone>(
    inst: &Instance,
    base: &T,
    len: usize,
    eps: f64,
    analytic: impl Fn(usize) -> f64,
    slot: impl Fn(&mut T, usize) -> &mut f64,
    output: impl Fn(&T) -> Result<FeatureMap>,
    into: &mut GroupError,
) -> Result<()> {
    for idx in 0..len {
        let mut plus = base.clone();
        *slot(&mut plus, idx) += eps;
        let mut minus = base.clone();
        *slot(&mut minus, idx) -= eps;
        into.push(analytic(idx), inst.slope(&output(&plus)?, &output(&minus)?, eps));
    }
    Ok(())
}

/// Compares `fade_backward` with central differences of `Σ R⊙y` on a
/// seeded random instance in which every parameter group is non-zero.
pub fn grad_check(dims: GradCheckDims, seed: u64, eps: f64) -> Result<GradReport> {
    let inst = random_instance(dims, seed)?;
    let out = fade_forward(&inst.decoder, &inst.encoder, &inst.params)?;
    let grads = fade_backward(&out, &inst.weights)?;
    let (d, e, p) = (&inst.decoder, &inst.encoder, &inst.params);
    let mut report = GradReport {
        dims,
        seed,
        eps,
        decoder: GroupError::default(),
        encoder: GroupError::default(),
        w_e: GroupError::default(),
        w_d: GroupError::default(),
        w_k: GroupError::default(),
        w_g: GroupError::default(),
    };

    let i = &inst;
    central(i, d, d.data().len(), eps, |k| grads.decoder.data()[k], |m, k| &mut m.data_mut()[k], |m| i.output(m, e, p), &mut report.decoder)?;
    central(i, e, e.data().len(), eps, |k| grads.encoder.data()[k], |m, k| &mut m.data_mut()[k], |m| i.output(d, m, p), &mut report.encoder)?;

    let gp = &grads.params;
    let ploss = |q: &FadeParams| i.output(d, e, q);
    central(i, p, p.w_e.len(), eps, |i| gp.w_e[i], |q, i| &mut q.w_e[i], ploss, &mut report.w_e)?;
    central(i, p, p.b_e.len(), eps, |i| gp.b_e[i], |q, i| &mut q.b_e[i], ploss, &mut report.w_e)?;
    central(i, p, p.w_d.len(), eps, |i| gp.w_d[i], |q, i| &mut q.w_d[i], ploss, &mut report.w_d)?;
    central(i, p, p.b_d.len(), eps, |i| gp.b_d[i], |q, i| &mut q.b_d[i], ploss, &mut report.w_d)?;
    central(i, p, p.w_k.len(), eps, |i| gp.w_k[i], |q, i| &mut q.w_k[i], ploss, &mut report.w_k)?;
    central(i, p, p.b_k.len(), eps, |i| gp.b_k[i], |q, i| &mut q.b_k[i], ploss, &mut report.w_k)?;
    central(i, p, p.w_g.len(), eps, |i| gp.w_g[i], |q, i| &mut q.w_g[i], ploss, &mut report.w_g)?;
    central(i, p, 1, eps, |_| gp.b_g, |q, _| &mut q.b_g, ploss, &mut report.w_g)?;
    Ok(report)
}
