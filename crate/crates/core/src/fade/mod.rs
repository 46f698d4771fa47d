//! Gated dynamic ×2 upsampling of decoder features guided by encoder
//! features, with exact analytic gradients.
//!
//! Shapes: decoder `D` is `C×h×w`, encoder `E` is `C×2h×2w`.
//!
//! ```text
//! Ecomp = W_e·E + b_e              Dcomp = W_d·D + b_d        (1×1 convs to Cm)
//! S     = Ecomp + nearest_x2(Dcomp)
//! kern  = softmax_q(conv3x3(S; W_k) + b_k)                    (K² logits per pixel)
//! U     = Σ_q kern_q · D(⌊i/2⌋+u−r, ⌊j/2⌋+v−r)                (replicate borders)
//! gate  = σ(W_g·E + b_g)
//! y     = gate·E + (1−gate)·U
//! ```

mod gradcheck;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::raster::FeatureMap;

pub use gradcheck::{grad_check, GradCheckDims, GradReport, GroupError};

#[derive(Debug, Error, PartialEq)]
pub enum FadeError {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("forward context missing")]
    MissingContext,
}

pub type Result<T, E = FadeError> = std::result::Result<T, E>;

/// Learnable weights. Matrices are row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FadeParams {
    pub c: usize,
    pub cm: usize,
    pub k: usize,
    pub seed: u64,
    /// `Cm×C`
    pub w_e: Vec<f64>,
    pub b_e: Vec<f64>,
    /// `Cm×C`
    pub w_d: Vec<f64>,
    pub b_d: Vec<f64>,
    /// `K²×Cm×3×3`
    pub w_k: Vec<f64>,
    pub b_k: Vec<f64>,
    /// `C`
    pub w_g: Vec<f64>,
    pub b_g: f64,
}

impl FadeParams {
    /// All-zero parameters of the given shape.
    pub fn zeros(c: usize, cm: usize, k: usize) -> Result<Self> {
        if c == 0 || cm == 0 || k == 0 || k.is_multiple_of(2) {
            return Err(FadeError::InvalidParams(format!(
                "need C >= 1, Cm >= 1 and odd K >= 1, got C={c} Cm={cm} K={k}"
            )));
        }
        let k2 = k * k;
        Ok(Self {
            c,
            cm,
            k,
            seed: 0,
            w_e: vec![0.0; cm * c],
            b_e: vec![0.0; cm],
            w_d: vec![0.0; cm * c],
            b_d: vec![0.0; cm],
            w_k: vec![0.0; k2 * cm * 9],
            b_k: vec![0.0; k2],
            w_g: vec![0.0; c],
            b_g: 0.0,
        })
    }

    pub fn radius(&self) -> usize {
        (self.k - 1) / 2
    }

    pub fn validate(&self) -> Result<()> {
        let shape = Self::zeros(self.c, self.cm, self.k)?;
        let lens = [
            (self.w_e.len(), shape.w_e.len(), "W_e"),
            (self.b_e.len(), shape.b_e.len(), "b_e"),
            (self.w_d.len(), shape.w_d.len(), "W_d"),
            (self.b_d.len(), shape.b_d.len(), "b_d"),
            (self.w_k.len(), shape.w_k.len(), "W_k"),
            (self.b_k.len(), shape.b_k.len(), "b_k"),
            (self.w_g.len(), shape.w_g.len(), "W_g"),
        ];
        for (got, want, name) in lens {
            if got != want {
                return Err(FadeError::InvalidParams(format!("{name} has {got} values, expected {want}")));
            }
        }
        if !self.groups().iter().all(|(_, g)| g.iter().all(|v| v.is_finite())) || !self.b_g.is_finite() {
            return Err(FadeError::NonFinite("parameters"));
        }
        Ok(())
    }

    fn groups(&self) -> [(&'static str, &[f64]); 7] {
        [
            ("w_e", &self.w_e),
            ("b_e", &self.b_e),
            ("w_d", &self.w_d),
            ("b_d", &self.b_d),
            ("w_k", &self.w_k),
            ("b_k", &self.b_k),
            ("w_g", &self.w_g),
        ]
    }

    #[inline]
    fn wk_index(&self, q: usize, m: usize, du: usize, dv: usize) -> usize {
        ((q * self.cm + m) * 3 + du) * 3 + dv
    }
}

/// Seeded initialization: compressors uniform in `±sqrt(1/C)`, kernel and
/// gate weights zero (uniform kernels, gate 0.5).
pub fn init_params(c: usize, cm: usize, k: usize, seed: u64) -> Result<FadeParams> {
    let mut p = FadeParams::zeros(c, cm, k)?;
    p.seed = seed;
    let a = (1.0 / c as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    p.w_e.iter_mut().for_each(|v| *v = rng.random_range(-a..=a));
    p.w_d.iter_mut().for_each(|v| *v = rng.random_range(-a..=a));
    Ok(p)
}

/// Intermediates kept for the backward pass.
#[derive(Debug, Clone)]
pub struct FadeContext {
    decoder: FeatureMap,
    encoder: FeatureMap,
    params: FadeParams,
    fused: FeatureMap,
    upsampled: FeatureMap,
}

#[derive(Debug, Clone)]
pub struct FadeOutput {
    pub y: FeatureMap,
    /// `K²×2h×2w`, a probability simplex at every pixel.
    pub kernels: FeatureMap,
    /// `1×2h×2w`
    pub gate: FeatureMap,
    pub context: Option<FadeContext>,
}

#[derive(Debug, Clone)]
pub struct FadeGrads {
    pub decoder: FeatureMap,
    pub encoder: FeatureMap,
    /// Same layout as the parameters; `seed` is copied through.
    pub params: FadeParams,
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    crate::pseudolabel::logistic(z)
}

#[inline]
fn clamp_idx(v: isize, n: usize) -> usize {
    v.clamp(0, n as isize - 1) as usize
}

fn check_inputs(decoder: &FeatureMap, encoder: &FeatureMap, p: &FadeParams) -> Result<()> {
    p.validate()?;
    let (dc, dh, dw) = decoder.shape();
    let (ec, eh, ew) = encoder.shape();
    if dc != p.c || ec != p.c {
        return Err(FadeError::Shape(format!("channels: decoder {dc}, encoder {ec}, params {}", p.c)));
    }
    if eh != 2 * dh || ew != 2 * dw {
        return Err(FadeError::Shape(format!("encoder {eh}x{ew} is not twice decoder {dh}x{dw}")));
    }
    if !decoder.is_finite() {
        return Err(FadeError::NonFinite("decoder"));
    }
    if !encoder.is_finite() {
        return Err(FadeError::NonFinite("encoder"));
    }
    Ok(())
}

// Replicate-padded 3×3 neighborhood of every channel, laid out like a
// row of W_k: index (m·3 + du)·3 + dv.
fn gather_patch(x: &FeatureMap, i: usize, j: usize, patch: &mut [f64]) {
    let (cm, h, w) = x.shape();
    let rows = [clamp_idx(i as isize - 1, h), i, clamp_idx(i as isize + 1, h)];
    let cols = [clamp_idx(j as isize - 1, w), j, clamp_idx(j as isize + 1, w)];
    for m in 0..cm {
        for (du, &ii) in rows.iter().enumerate() {
            for (dv, &jj) in cols.iter().enumerate() {
                patch[(m * 3 + du) * 3 + dv] = x.get(m, ii, jj);
            }
        }
    }
}

// out[m] = W[m,:]·x + b[m] at every pixel.
fn pointwise(x: &FeatureMap, w: &[f64], b: &[f64], out_ch: usize) -> FeatureMap {
    let (c, h, wd) = x.shape();
    let mut out = FeatureMap::zeros(out_ch, h, wd);
    let hw = h * wd;
    let xd = x.data();
    let od = out.data_mut();
    for m in 0..out_ch {
        let o = &mut od[m * hw..(m + 1) * hw];
        o.fill(b[m]);
        for ci in 0..c {
            let wv = w[m * c + ci];
            if wv != 0.0 {
                for (ov, xv) in o.iter_mut().zip(&xd[ci * hw..(ci + 1) * hw]) {
                    *ov += wv * xv;
                }
            }
        }
    }
    out
}

pub fn fade_forward(decoder: &FeatureMap, encoder: &FeatureMap, p: &FadeParams) -> Result<FadeOutput> {
    check_inputs(decoder, encoder, p)?;
    let (c, h2, w2) = encoder.shape();
    let (k2, cm, r) = (p.k * p.k, p.cm, p.radius() as isize);

    let ecomp = pointwise(encoder, &p.w_e, &p.b_e, cm);
    let dcomp = pointwise(decoder, &p.w_d, &p.b_d, cm);
    let fused = FeatureMap::from_fn(cm, h2, w2, |m, i, j| ecomp.get(m, i, j) + dcomp.get(m, i / 2, j / 2));

    let mut kernels = FeatureMap::zeros(k2, h2, w2);
    let mut logits = vec![0.0; k2];
    let mut patch = vec![0.0; cm * 9];
    for i in 0..h2 {
        for j in 0..w2 {
            gather_patch(&fused, i, j, &mut patch);
            for (q, l) in logits.iter_mut().enumerate() {
                let row = &p.w_k[q * cm * 9..(q + 1) * cm * 9];
                *l = p.b_k[q] + row.iter().zip(&patch).map(|(a, b)| a * b).sum::<f64>();
            }
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for l in logits.iter_mut() {
                *l = (*l - max).exp();
                z += *l;
            }
            for (q, l) in logits.iter().enumerate() {
                let idx = kernels.index(q, i, j);
                kernels.data_mut()[idx] = l / z;
            }
        }
    }

    let upsampled = FeatureMap::from_fn(c, h2, w2, |ch, i, j| {
        let (ci, cj) = ((i / 2) as isize, (j / 2) as isize);
        let mut acc = 0.0;
        for u in 0..p.k {
            for v in 0..p.k {
                let wq = kernels.get(u * p.k + v, i, j);
                acc += wq * decoder.get_clamped(ch, ci + u as isize - r, cj + v as isize - r);
            }
        }
        acc
    });

    let gate = FeatureMap::from_fn(1, h2, w2, |_, i, j| {
        let z: f64 = (0..c).map(|ch| p.w_g[ch] * encoder.get(ch, i, j)).sum::<f64>() + p.b_g;
        sigmoid(z)
    });
    let y = FeatureMap::from_fn(c, h2, w2, |ch, i, j| {
        let g = gate.get(0, i, j);
        g * encoder.get(ch, i, j) + (1.0 - g) * upsampled.get(ch, i, j)
    });

    Ok(FadeOutput {
        y,
        kernels,
        gate,
        context: Some(FadeContext {
            decoder: decoder.clone(),
            encoder: encoder.clone(),
            params: p.clone(),
            fused,
            upsampled,
        }),
    })
}

pub fn fade_backward(out: &FadeOutput, grad_y: &FeatureMap) -> Result<FadeGrads> {
    let ctx = out.context.as_ref().ok_or(FadeError::MissingContext)?;
    if grad_y.shape() != out.y.shape() {
        return Err(FadeError::Shape(format!("grad_y {:?} vs y {:?}", grad_y.shape(), out.y.shape())));
    }
    if !grad_y.is_finite() {
        return Err(FadeError::NonFinite("grad_y"));
    }
    let (p, e, d) = (&ctx.params, &ctx.encoder, &ctx.decoder);
    let (c, h2, w2) = e.shape();
    let (_, h, w) = d.shape();
    let (k2, cm, r) = (p.k * p.k, p.cm, p.radius() as isize);
    let mut gp = FadeParams::zeros(p.c, p.cm, p.k)?;
    gp.seed = p.seed;
    let mut ge = FeatureMap::zeros(c, h2, w2);
    let mut gd = FeatureMap::zeros(c, h, w);

    // Gate and skip path.
    let mut gz = vec![0.0; h2 * w2];
    for i in 0..h2 {
        for j in 0..w2 {
            let g = out.gate.get(0, i, j);
            let mut ggate = 0.0;
            for ch in 0..c {
                let gy = grad_y.get(ch, i, j);
                let idx = ge.index(ch, i, j);
                ge.data_mut()[idx] += gy * g;
                ggate += gy * (e.get(ch, i, j) - ctx.upsampled.get(ch, i, j));
            }
            gz[i * w2 + j] = ggate * g * (1.0 - g);
        }
    }
    for i in 0..h2 {
        for j in 0..w2 {
            let z = gz[i * w2 + j];
            gp.b_g += z;
            for ch in 0..c {
                gp.w_g[ch] += z * e.get(ch, i, j);
                let idx = ge.index(ch, i, j);
                ge.data_mut()[idx] += z * p.w_g[ch];
            }
        }
    }

    // Reassembly and softmax.
    let mut glogit = FeatureMap::zeros(k2, h2, w2);
    let mut gkern = vec![0.0; k2];
    for i in 0..h2 {
        for j in 0..w2 {
            let g = out.gate.get(0, i, j);
            let (ci, cj) = ((i / 2) as isize, (j / 2) as isize);
            gkern.fill(0.0);
            for ch in 0..c {
                let gu = grad_y.get(ch, i, j) * (1.0 - g);
                if gu == 0.0 {
                    continue;
                }
                for u in 0..p.k {
                    let a = clamp_idx(ci + u as isize - r, h);
                    for v in 0..p.k {
                        let b = clamp_idx(cj + v as isize - r, w);
                        let q = u * p.k + v;
                        gkern[q] += gu * d.get(ch, a, b);
                        let idx = gd.index(ch, a, b);
                        gd.data_mut()[idx] += gu * out.kernels.get(q, i, j);
                    }
                }
            }
            let dot: f64 = (0..k2).map(|q| out.kernels.get(q, i, j) * gkern[q]).sum();
            for (q, gk) in gkern.iter().enumerate() {
                let idx = glogit.index(q, i, j);
                glogit.data_mut()[idx] = out.kernels.get(q, i, j) * (gk - dot);
            }
        }
    }

    // Kernel-logit convolution.
    let mut gs = FeatureMap::zeros(cm, h2, w2);
    for q in 0..k2 {
        for i in 0..h2 {
            for j in 0..w2 {
                let gl = glogit.get(q, i, j);
                if gl == 0.0 {
                    continue;
                }
                gp.b_k[q] += gl;
                for m in 0..cm {
                    for du in 0..3 {
                        let ii = clamp_idx(i as isize + du as isize - 1, h2);
                        for dv in 0..3 {
                            let jj = clamp_idx(j as isize + dv as isize - 1, w2);
                            let wi = p.wk_index(q, m, du, dv);
                            gp.w_k[wi] += gl * ctx.fused.get(m, ii, jj);
                            let si = gs.index(m, ii, jj);
                            gs.data_mut()[si] += gl * p.w_k[wi];
                        }
                    }
                }
            }
        }
    }

    // Compressors. The encoder branch sees gS directly, the decoder branch
    // sums it over each 2×2 block.
    let gdcomp = FeatureMap::from_fn(cm, h, w, |m, a, b| {
        gs.get(m, 2 * a, 2 * b) + gs.get(m, 2 * a + 1, 2 * b) + gs.get(m, 2 * a, 2 * b + 1) + gs.get(m, 2 * a + 1, 2 * b + 1)
    });
    compressor_backward(&gs, e, &p.w_e, &mut gp.w_e, &mut gp.b_e, &mut ge);
    compressor_backward(&gdcomp, d, &p.w_d, &mut gp.w_d, &mut gp.b_d, &mut gd);

    Ok(FadeGrads { decoder: gd, encoder: ge, params: gp })
}

fn compressor_backward(
    gout: &FeatureMap,
    x: &FeatureMap,
    w: &[f64],
    gw: &mut [f64],
    gb: &mut [f64],
    gx: &mut FeatureMap,
) {
    let (cm, h, wd) = gout.shape();
    let c = x.channels();
    let hw = h * wd;
    for m in 0..cm {
        let go = &gout.data()[m * hw..(m + 1) * hw];
        gb[m] += go.iter().sum::<f64>();
        for ci in 0..c {
            let xs = &x.data()[ci * hw..(ci + 1) * hw];
            gw[m * c + ci] += go.iter().zip(xs).map(|(a, b)| a * b).sum::<f64>();
            let wv = w[m * c + ci];
            let gxs = &mut gx.data_mut()[ci * hw..(ci + 1) * hw];
            for (g, o) in gxs.iter_mut().zip(go) {
                *g += wv * o;
            }
        }
    }
}

/// Bilinear ×2 upsampling with half-pixel centers (align-corners off) and
/// replicate borders.
pub fn bilinear_upsample_x2(x: &FeatureMap) -> FeatureMap {
    let (c, h, w) = x.shape();
    let axis = |o: usize, n: usize| {
        let s = ((o as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = s.floor() as usize;
        (i0, (i0 + 1).min(n - 1), s - i0 as f64)
    };
    FeatureMap::from_fn(c, 2 * h, 2 * w, |ch, i, j| {
        let (i0, i1, fi) = axis(i, h);
        let (j0, j1, fj) = axis(j, w);
        let top = (1.0 - fj) * x.get(ch, i0, j0) + fj * x.get(ch, i0, j1);
        let bot = (1.0 - fj) * x.get(ch, i1, j0) + fj * x.get(ch, i1, j1);
        (1.0 - fi) * top + fi * bot
    })
}
