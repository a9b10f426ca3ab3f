//! Synthetic forward ISP with an exact inverse.
//!
//! Stages: white balance, 3x3 color matrix, clip to `[0, 1]`, knee tone curve,
//! gamma encode. Every stage after the clip maps `[0, 1]` onto itself
//! monotonically with fixed endpoints, so any clipped value lands exactly on
//! 0 or 1 in the output and everything else inverts analytically.

use candle_core::{Device, Tensor};
use nalgebra::Matrix3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::ModelConfig;
use crate::ops::to_f64_vec;

pub const GAIN_RANGE: (f64, f64) = (0.5, 2.5);
pub const GAMMA_RANGE: (f64, f64) = (1.5, 2.8);
/// Knee values drawn by [`IspParams::sample`]; any value in `(0, 1]` is accepted.
pub const KNEE_SAMPLE_RANGE: (f64, f64) = (0.5, 1.0);
/// Largest off-diagonal color-matrix entry drawn by [`IspParams::sample`].
pub const CCM_SPREAD: f64 = 0.2;
pub const MAX_CONDITION: f64 = 1e3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "IspRecord", into = "IspRecord")]
pub struct IspParams {
    pub wb_gains: [f64; 3],
    /// Row-major; output channel `i` is `Σ_j m[i][j]·in[j]`.
    pub color_matrix: [[f64; 3]; 3],
    pub gamma: f64,
    pub tone_knee: f64,
    pub seed: u64,
    inverse: [[f64; 3]; 3],
}

#[derive(Serialize, Deserialize)]
struct IspRecord {
    wb_gains: [f64; 3],
    color_matrix: [[f64; 3]; 3],
    gamma: f64,
    tone_knee: f64,
    seed: u64,
}

impl TryFrom<IspRecord> for IspParams {
    type Error = Error;

    fn try_from(r: IspRecord) -> Result<Self> {
        Self::new(r.wb_gains, r.color_matrix, r.gamma, r.tone_knee, r.seed)
    }
}

impl From<IspParams> for IspRecord {
    fn from(p: IspParams) -> Self {
        Self {
            wb_gains: p.wb_gains,
            color_matrix: p.color_matrix,
            gamma: p.gamma,
            tone_knee: p.tone_knee,
            seed: p.seed,
        }
    }
}

impl IspParams {
    /// Validates the parameters and precomputes the color-matrix inverse.
    ///
    /// The gamma only needs to be positive here so that the identity
    /// transform (gamma 1) is expressible; sampling stays in [`GAMMA_RANGE`].
    pub fn new(wb_gains: [f64; 3], color_matrix: [[f64; 3]; 3], gamma: f64, tone_knee: f64, seed: u64) -> Result<Self> {
        if let Some(g) = wb_gains.iter().find(|g| !(GAIN_RANGE.0..=GAIN_RANGE.1).contains(*g)) {
            return Err(Error::Config(format!(
                "white-balance gain {g} outside [{}, {}]",
                GAIN_RANGE.0, GAIN_RANGE.1
            )));
        }
        if !(gamma.is_finite() && gamma > 0.0) {
            return Err(Error::Config(format!("gamma {gamma} must be positive")));
        }
        if !(tone_knee > 0.0 && tone_knee <= 1.0) {
            return Err(Error::Config(format!("tone knee {tone_knee} outside (0, 1]")));
        }
        let m = Matrix3::from_fn(|i, j| color_matrix[i][j]);
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("color matrix has non-finite entries".into()));
        }
        let sv = m.singular_values();
        let (hi, lo) = (sv.max(), sv.min());
        if lo <= 0.0 || hi / lo >= MAX_CONDITION {
            return Err(Error::Config(format!(
                "color matrix is singular or ill-conditioned (condition number {})",
                if lo > 0.0 { hi / lo } else { f64::INFINITY }
            )));
        }
        let inv = m
            .try_inverse()
            .ok_or_else(|| Error::Config("color matrix is singular".into()))?;
        Ok(Self {
            wb_gains,
            color_matrix,
            gamma,
            tone_knee,
            seed,
            inverse: std::array::from_fn(|i| std::array::from_fn(|j| inv[(i, j)])),
        })
    }

    pub fn identity() -> Self {
        let eye = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        Self::new([1.0; 3], eye, 1.0, 1.0, 0).expect("identity parameters are valid")
    }

    /// Deterministic draw from the documented ranges.
    ///
    /// The color matrix is the identity plus off-diagonal terms, with the
    /// diagonal set so that each row sums to one (neutral grays stay gray).
    pub fn sample(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::sample_with(&mut rng, seed)
    }

    fn sample_with(rng: &mut ChaCha8Rng, seed: u64) -> Self {
        let wb_gains = std::array::from_fn(|_| rng.random_range(GAIN_RANGE.0..=GAIN_RANGE.1));
        let mut color_matrix = [[0.0; 3]; 3];
        for (i, row) in color_matrix.iter_mut().enumerate() {
            let mut off = 0.0;
            for (j, v) in row.iter_mut().enumerate() {
                if i != j {
                    *v = rng.random_range(-CCM_SPREAD..=CCM_SPREAD);
                    off += *v;
                }
            }
            row[i] = 1.0 - off;
        }
        let gamma = rng.random_range(GAMMA_RANGE.0..=GAMMA_RANGE.1);
        let tone_knee = rng.random_range(KNEE_SAMPLE_RANGE.0..=KNEE_SAMPLE_RANGE.1);
        // Diagonally dominant by construction, so validation cannot fail.
        Self::new(wb_gains, color_matrix, gamma, tone_knee, seed).expect("sampled parameters are valid")
    }

    /// Curvature of the tone curve `t(z) = (1+c)z / (1+cz)`.
    fn tone_c(&self) -> f64 {
        (1.0 - self.tone_knee) / self.tone_knee
    }

    /// Forward transform of one RAW pixel; the flag reports clipping.
    pub fn forward_pixel(&self, raw: [f64; 3]) -> ([f64; 3], bool) {
        let balanced: [f64; 3] = std::array::from_fn(|k| raw[k] * self.wb_gains[k]);
        let mut clipped = false;
        let c = self.tone_c();
        let out = std::array::from_fn(|i| {
            let mixed: f64 = (0..3).map(|j| self.color_matrix[i][j] * balanced[j]).sum();
            if !(0.0..=1.0).contains(&mixed) {
                clipped = true;
            }
            let z = mixed.clamp(0.0, 1.0);
            let t = (1.0 + c) * z / (1.0 + c * z);
            t.powf(1.0 / self.gamma).clamp(0.0, 1.0)
        });
        (out, clipped)
    }

    /// Exact inverse of [`IspParams::forward_pixel`] on unclipped pixels.
    pub fn inverse_pixel(&self, srgb: [f64; 3]) -> [f64; 3] {
        let c = self.tone_c();
        let z: [f64; 3] = std::array::from_fn(|k| {
            let t = srgb[k].clamp(0.0, 1.0).powf(self.gamma);
            t / (1.0 + c - c * t)
        });
        std::array::from_fn(|i| {
            let balanced: f64 = (0..3).map(|j| self.inverse[i][j] * z[j]).sum();
            balanced / self.wb_gains[i]
        })
    }
}

fn check_image(op: &'static str, x: &Tensor) -> Result<(usize, usize, usize)> {
    let (b, c, h, w) = x.dims4()?;
    if c != 3 {
        return Err(Error::ShapeMismatch {
            op,
            lhs: x.dims().to_vec(),
            rhs: vec![b, 3, h, w],
        });
    }
    Ok((b, h, w))
}

fn map_pixels<F: FnMut([f64; 3]) -> [f64; 3]>(x: &Tensor, mut f: F) -> Result<Tensor> {
    let (b, h, w) = check_image("isp", x)?;
    let plane = h * w;
    let src = to_f64_vec(x)?;
    let mut out = vec![0.0; src.len()];
    for n in 0..b {
        let base = n * 3 * plane;
        for p in 0..plane {
            let px = std::array::from_fn(|k| src[base + k * plane + p]);
            let y = f(px);
            for k in 0..3 {
                out[base + k * plane + p] = y[k];
            }
        }
    }
    Ok(Tensor::from_vec(out, x.dims(), x.device())?.to_dtype(x.dtype())?)
}

/// Applies the forward ISP to a `(B, 3, H, W)` RAW batch.
pub fn forward_isp(raw: &Tensor, p: &IspParams) -> Result<Tensor> {
    map_pixels(raw, |px| p.forward_pixel(px).0)
}

/// RAW estimate and saturation mask, both `(B, 3, H, W)`; the mask is 1 on
/// every channel of a pixel that has any channel at 0 or 1 and 0 elsewhere.
pub fn inverse_isp(srgb: &Tensor, p: &IspParams) -> Result<(Tensor, Tensor)> {
    let raw = map_pixels(srgb, |px| p.inverse_pixel(px))?;
    let mask = map_pixels(srgb, |px| {
        let sat = px.iter().any(|&v| v <= 0.0 || v >= 1.0);
        [if sat { 1.0 } else { 0.0 }; 3]
    })?;
    Ok((raw, mask))
}

/// Smooth RAW-like image of shape `(3, size, size)` in roughly `[0.02, 0.4]`.
///
/// Low-frequency sinusoids and Gaussian blobs give the luminance, a few
/// hard-edged rectangles add edges, and slowly varying per-channel tints add color.
fn synthetic_raw(rng: &mut ChaCha8Rng, size: usize) -> Vec<f64> {
    let s = size as f64;
    let waves: Vec<(f64, f64, f64, f64)> = (0..4)
        .map(|_| {
            (
                rng.random_range(0.5..3.0),
                rng.random_range(0.5..3.0),
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(0.2..1.0),
            )
        })
        .collect();
    let blobs: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.random_range(0.0..1.0),
                rng.random_range(0.0..1.0),
                rng.random_range(0.08..0.3),
                rng.random_range(-1.0..1.5),
            )
        })
        .collect();
    let rects: Vec<(f64, f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            let x0 = rng.random_range(0.0..0.8);
            let y0 = rng.random_range(0.0..0.8);
            (
                x0,
                y0,
                x0 + rng.random_range(0.1..0.4),
                y0 + rng.random_range(0.1..0.4),
                rng.random_range(-0.6..0.8),
            )
        })
        .collect();
    let tint: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.55..1.0));
    let tint_wave: [(f64, f64, f64); 3] = std::array::from_fn(|_| {
        (
            rng.random_range(0.3..1.5),
            rng.random_range(0.0..std::f64::consts::TAU),
            rng.random_range(0.0..0.2),
        )
    });

    let mut lum = vec![0.0; size * size];
    for y in 0..size {
        for x in 0..size {
            let (u, v) = ((x as f64 + 0.5) / s, (y as f64 + 0.5) / s);
            let mut l = 0.0;
            for &(fx, fy, ph, a) in &waves {
                l += a * (std::f64::consts::TAU * (fx * u + fy * v) + ph).sin();
            }
            for &(cx, cy, r, a) in &blobs {
                let d2 = (u - cx).powi(2) + (v - cy).powi(2);
                l += a * (-d2 / (2.0 * r * r)).exp();
            }
            for &(x0, y0, x1, y1, a) in &rects {
                if u >= x0 && u < x1 && v >= y0 && v < y1 {
                    l += a;
                }
            }
            lum[y * size + x] = l;
        }
    }
    let lo = lum.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = lum.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(1e-9);

    let mut raw = vec![0.0; 3 * size * size];
    for y in 0..size {
        for x in 0..size {
            let u = (x as f64 + y as f64) / (2.0 * s);
            let l = 0.02 + 0.4 * (lum[y * size + x] - lo) / span;
            for k in 0..3 {
                let (f, ph, a) = tint_wave[k];
                let t = (tint[k] + a * (std::f64::consts::TAU * f * u + ph).sin()).clamp(0.3, 1.0);
                raw[k * size * size + y * size + x] = (l * t).clamp(0.0, 1.0);
            }
        }
    }
    raw
}

/// A deterministic `(srgb, raw, params)` triple; the images are `(1, 3, size, size)` f64.
pub fn make_synthetic_pair(seed: u64, size: usize) -> Result<(Tensor, Tensor, IspParams)> {
    let d = ModelConfig::default().divisor();
    if size == 0 || size % d != 0 {
        return Err(Error::Indivisible {
            op: "make_synthetic_pair",
            height: size,
            width: size,
            divisor: d,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = IspParams::sample_with(&mut rng, seed);
    let raw = Tensor::from_vec(synthetic_raw(&mut rng, size), (1, 3, size, size), &Device::Cpu)?;
    let srgb = forward_isp(&raw, &params)?;
    Ok((srgb, raw, params))
}
