//! Evaluation metrics and training objectives.
//!
//! All image arguments are `(B, C, H, W)` tensors. Objectives return scalar
//! tensors so they can be differentiated; evaluation metrics return `f64`.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, D};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::{ensure_same_shape, scalar_f64, to_f64_vec};

/// The canonical five-scale weights of multi-scale SSIM.
pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

/// Weights of the composite training objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_ssim: f64,
    pub lambda_tv: f64,
    pub lambda_adv: f64,
    pub lambda_gp: f64,
}

impl Default for LossWeights {
    /// `lambda_gp = 10` is the usual WGAN-GP weight; the other three were tuned on synthetic data.
    fn default() -> Self {
        Self {
            lambda_ssim: 1.0,
            lambda_tv: 0.1,
            lambda_adv: 0.001,
            lambda_gp: 10.0,
        }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        Self {
            lambda_ssim: 0.0,
            lambda_tv: 0.0,
            lambda_adv: 0.0,
            lambda_gp: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in self.named() {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be a finite non-negative number, got {v}")));
            }
        }
        Ok(())
    }

    /// `(term name, weight)` pairs in objective order.
    pub fn named(&self) -> [(&'static str, f64); 4] {
        [
            (TERM_SSIM, self.lambda_ssim),
            (TERM_TV, self.lambda_tv),
            (TERM_ADV, self.lambda_adv),
            (TERM_GP, self.lambda_gp),
        ]
    }
}

pub const TERM_SSIM: &str = "ssim";
pub const TERM_TV: &str = "tv";
pub const TERM_ADV: &str = "adv";
pub const TERM_GP: &str = "gp";

/// Scalar summary of one evaluation of the composite objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    /// Unweighted term values keyed by term name.
    pub per_term: BTreeMap<String, f64>,
}

impl LossReport {
    pub fn term(&self, name: &str) -> f64 {
        self.per_term.get(name).copied().unwrap_or(f64::NAN)
    }
}

/// Peak signal-to-noise ratio in dB; `+inf` when the images are identical.
pub fn psnr(pred: &Tensor, target: &Tensor, max_val: f64) -> Result<f64> {
    ensure_same_shape("psnr", pred, target)?;
    if !(max_val > 0.0) {
        return Err(Error::Contract(format!("psnr: max_val must be positive, got {max_val}")));
    }
    let a = to_f64_vec(pred)?;
    let b = to_f64_vec(target)?;
    let mse = a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (max_val * max_val / mse).log10())
}

/// Gaussian-window SSIM parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SsimParams {
    pub window_size: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    /// Dynamic range `L` of the pixel values.
    pub data_range: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self {
            window_size: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            data_range: 1.0,
        }
    }
}

impl SsimParams {
    pub fn c1(&self) -> f64 {
        (self.k1 * self.data_range).powi(2)
    }

    pub fn c2(&self) -> f64 {
        (self.k2 * self.data_range).powi(2)
    }

    /// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
    pub fn taps(&self) -> Vec<f64> {
        let half = (self.window_size as f64 - 1.0) / 2.0;
        let g: Vec<f64> = (0..self.window_size)
            .map(|i| {
                let d = i as f64 - half;
                (-d * d / (2.0 * self.sigma * self.sigma)).exp()
            })
            .collect();
        let s: f64 = g.iter().sum();
        g.into_iter().map(|v| v / s).collect()
    }
}

/// `(n, n - k + 1)` matrix whose columns are the window shifted along `n` samples.
fn band_matrix(taps: &[f64], n: usize, dtype: DType) -> Result<Tensor> {
    let k = taps.len();
    let m = n - k + 1;
    let mut data = vec![0.0; n * m];
    for j in 0..m {
        for (t, &v) in taps.iter().enumerate() {
            data[(j + t) * m + j] = v;
        }
    }
    Ok(Tensor::from_vec(data, (n, m), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Separable "valid" Gaussian filtering of every plane of a `(N, C, H, W)` tensor.
fn gaussian_blur(x: &Tensor, taps: &[f64]) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let k = taps.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let gw = band_matrix(taps, w, x.dtype())?;
    let gh = band_matrix(taps, h, x.dtype())?;
    let rows = x.reshape((n * c * h, w))?.matmul(&gw)?;
    let cols = rows
        .reshape((n, c, h, ow))?
        .transpose(2, 3)?
        .reshape((n * c * ow, h))?
        .matmul(&gh)?;
    Ok(cols.reshape((n, c, ow, oh))?.transpose(2, 3)?)
}

/// Per-window SSIM and contrast-structure maps, each `(B, C, H-k+1, W-k+1)`.
struct SsimMaps {
    ssim: Tensor,
    cs: Tensor,
}

fn check_window(op: &'static str, x: &Tensor, window: usize) -> Result<()> {
    let (_, _, h, w) = x.dims4()?;
    if h < window || w < window {
        return Err(Error::TooSmall {
            op,
            height: h,
            width: w,
            min: window,
        });
    }
    Ok(())
}

fn ssim_maps(x: &Tensor, y: &Tensor, params: &SsimParams) -> Result<SsimMaps> {
    let b = x.dims()[0];
    let taps = params.taps();
    let stacked = Tensor::cat(&[x, y, &x.sqr()?, &y.sqr()?, &(x * y)?], 0)?;
    let blurred = gaussian_blur(&stacked, &taps)?;
    let part = |i: usize| blurred.narrow(0, i * b, b);
    let (mu_x, mu_y, e_xx, e_yy, e_xy) = (part(0)?, part(1)?, part(2)?, part(3)?, part(4)?);
    let mu_xx = mu_x.sqr()?;
    let mu_yy = mu_y.sqr()?;
    let mu_xy = (&mu_x * &mu_y)?;
    let var_x = (e_xx - &mu_xx)?;
    let var_y = (e_yy - &mu_yy)?;
    let cov = (e_xy - &mu_xy)?;
    let (c1, c2) = (params.c1(), params.c2());
    let cs = ((cov.affine(2.0, c2))? / (var_x + var_y)?.affine(1.0, c2)?)?;
    let lum = (mu_xy.affine(2.0, c1)? / (mu_xx + mu_yy)?.affine(1.0, c1)?)?;
    Ok(SsimMaps { ssim: (lum * &cs)?, cs })
}

/// Mean SSIM over all valid window positions, channels and batch items.
pub fn ssim(pred: &Tensor, target: &Tensor, params: &SsimParams) -> Result<f64> {
    ensure_same_shape("ssim", pred, target)?;
    check_window("ssim", pred, params.window_size)?;
    scalar_f64(&ssim_maps(pred, target, params)?.ssim.mean_all()?)
}

/// Configuration of the multi-scale SSIM objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MsSsimParams {
    pub window: SsimParams,
    /// Per-scale exponents, finest first. Their count is the number of scales.
    pub weights: Vec<f64>,
}

impl Default for MsSsimParams {
    fn default() -> Self {
        Self {
            window: SsimParams::default(),
            weights: MS_SSIM_WEIGHTS.to_vec(),
        }
    }
}

impl MsSsimParams {
    /// The first `scales` canonical weights, renormalized to sum to one.
    pub fn with_scales(window: SsimParams, scales: usize) -> Result<Self> {
        if scales == 0 || scales > MS_SSIM_WEIGHTS.len() {
            return Err(Error::Config(format!(
                "MS-SSIM scale count must be in 1..={}, got {scales}",
                MS_SSIM_WEIGHTS.len()
            )));
        }
        let w = &MS_SSIM_WEIGHTS[..scales];
        let s: f64 = w.iter().sum();
        Ok(Self {
            window,
            weights: w.iter().map(|v| v / s).collect(),
        })
    }

    /// Largest canonical configuration whose coarsest scale still fits the window.
    pub fn fitted(window: SsimParams, height: usize, width: usize) -> Result<Self> {
        let feasible = max_scales(height, width, window.window_size).min(MS_SSIM_WEIGHTS.len());
        if feasible == 0 {
            return Err(Error::TooSmall {
                op: "ms_ssim",
                height,
                width,
                min: window.window_size,
            });
        }
        Self::with_scales(window, feasible)
    }

    pub fn scales(&self) -> usize {
        self.weights.len()
    }
}

/// Number of 2x average-pooled scales whose spatial size still covers `window`.
pub fn max_scales(height: usize, width: usize, window: usize) -> usize {
    let (mut h, mut w, mut n) = (height, width, 0);
    while h >= window && w >= window {
        n += 1;
        h /= 2;
        w /= 2;
    }
    n
}

const MS_SSIM_FLOOR: f64 = 1e-6;

fn downsample2(x: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    let x = x.narrow(2, 0, h - h % 2)?.narrow(3, 0, w - w % 2)?;
    Ok(x.avg_pool2d(2)?)
}

/// `1 - MS-SSIM(pred, target)`; per-image products of per-scale terms, averaged over `B·C`.
///
/// Contrast-structure means and the coarsest-scale SSIM mean are floored at 1e-6
/// before exponentiation so the fractional powers stay real.
pub fn ms_ssim_loss(pred: &Tensor, target: &Tensor, params: &MsSsimParams) -> Result<Tensor> {
    ensure_same_shape("ms_ssim_loss", pred, target)?;
    let (_, _, h, w) = pred.dims4()?;
    let scales = params.scales();
    if scales == 0 {
        return Err(Error::Config("MS-SSIM needs at least one scale".into()));
    }
    let feasible = max_scales(h, w, params.window.window_size);
    if feasible < scales {
        return Err(Error::TooFewScales {
            op: "ms_ssim_loss",
            requested: scales,
            feasible,
            height: h,
            width: w,
        });
    }
    let mut x = pred.clone();
    let mut y = target.clone();
    let mut product: Option<Tensor> = None;
    for (j, &weight) in params.weights.iter().enumerate() {
        let maps = ssim_maps(&x, &y, &params.window)?;
        let map = if j + 1 == scales { &maps.ssim } else { &maps.cs };
        let term = map
            .flatten_from(2)?
            .mean(D::Minus1)?
            .maximum(MS_SSIM_FLOOR)?
            .powf(weight)?;
        product = Some(match product {
            None => term,
            Some(p) => (p * term)?,
        });
        if j + 1 < scales {
            x = downsample2(&x)?;
            y = downsample2(&y)?;
        }
    }
    let ms = product.expect("at least one scale").mean_all()?;
    Ok(ms.affine(-1.0, 1.0)?)
}

/// Anisotropic total variation: mean |horizontal difference| + mean |vertical difference|.
pub fn tv_loss(img: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = img.dims4()?;
    if h < 2 || w < 2 {
        return Err(Error::TooSmall {
            op: "tv_loss",
            height: h,
            width: w,
            min: 2,
        });
    }
    let dh = (img.narrow(3, 1, w - 1)? - img.narrow(3, 0, w - 1)?)?.abs()?.mean_all()?;
    let dv = (img.narrow(2, 1, h - 1)? - img.narrow(2, 0, h - 1)?)?.abs()?.mean_all()?;
    Ok((dh + dv)?)
}

/// Wasserstein critic and generator losses.
#[derive(Debug, Clone)]
pub struct AdversarialLosses {
    /// `-mean(d_fake)`
    pub g_loss: Tensor,
    /// `mean(d_fake) - mean(d_real)`
    pub d_loss: Tensor,
}

pub fn adversarial_losses(d_real: &Tensor, d_fake: &Tensor) -> Result<AdversarialLosses> {
    if d_real.elem_count() == 0 || d_fake.elem_count() == 0 {
        return Err(Error::Contract("adversarial_losses: empty score tensor".into()));
    }
    let fake_mean = d_fake.mean_all()?;
    let real_mean = d_real.mean_all()?;
    Ok(AdversarialLosses {
        g_loss: fake_mean.neg()?,
        d_loss: (fake_mean - real_mean)?,
    })
}

/// An adversarial critic producing one unbounded score per batch item.
pub trait Critic {
    /// Per-sample scores of shape `(B,)`, differentiable in the input and the parameters.
    fn score(&self, x: &Tensor) -> Result<Tensor>;

    /// Scores together with `d(Σ scores)/dx`, shaped like `x`.
    ///
    /// The input gradient must itself be differentiable with respect to the
    /// critic's parameters so that a penalty on its norm can be trained.
    fn score_and_input_grad(&self, x: &Tensor) -> Result<(Tensor, Tensor)>;
}

/// Mean over the batch of `(‖∇D(x̂)‖₂ - 1)²` at random interpolates
/// `x̂ = ε·real + (1-ε)·fake`, one `ε ~ U(0,1)` per sample.
pub fn gradient_penalty<C: Critic + ?Sized, R: Rng + ?Sized>(
    critic: &C,
    real: &Tensor,
    fake: &Tensor,
    rng: &mut R,
) -> Result<Tensor> {
    ensure_same_shape("gradient_penalty", real, fake)?;
    let b = real.dims()[0];
    let eps: Vec<f64> = (0..b).map(|_| rng.random::<f64>()).collect();
    let mut shape = vec![1; real.rank()];
    shape[0] = b;
    let eps = Tensor::from_vec(eps, shape, &Device::Cpu)?.to_dtype(real.dtype())?;
    let real = real.detach();
    let fake = fake.detach();
    let mixed = (real.broadcast_mul(&eps)? + fake.broadcast_mul(&eps.affine(-1.0, 1.0)?)?)?;
    let (scores, grad) = critic.score_and_input_grad(&mixed)?;
    for (index, s) in to_f64_vec(&scores)?.into_iter().enumerate() {
        if !s.is_finite() {
            return Err(Error::NonFiniteScore { index });
        }
    }
    let norm = (grad.sqr()?.flatten_from(1)?.sum(1)? + 1e-12)?.sqrt()?;
    Ok((norm - 1.0)?.sqr()?.mean_all()?)
}

/// The composite objective: a differentiable total plus its scalar report.
#[derive(Debug, Clone)]
pub struct CompositeLoss {
    pub total: Tensor,
    pub report: LossReport,
}

/// `λ_SSIM·L_SSIM + λ_TV·L_TV + λ_adv·L_adv + λ_gp·L_gp`, with `L_adv` the generator's
/// Wasserstein loss on `d_fake` and `L_TV` evaluated on `pred`.
pub fn composite_loss(
    pred: &Tensor,
    target: &Tensor,
    d_fake: &Tensor,
    gp_value: &Tensor,
    weights: &LossWeights,
    ms_ssim: &MsSsimParams,
) -> Result<CompositeLoss> {
    weights.validate()?;
    let terms = [
        (TERM_SSIM, weights.lambda_ssim, ms_ssim_loss(pred, target, ms_ssim)?),
        (TERM_TV, weights.lambda_tv, tv_loss(pred)?),
        (TERM_ADV, weights.lambda_adv, adversarial_losses(d_fake, d_fake)?.g_loss),
        (TERM_GP, weights.lambda_gp, gp_value.flatten_all()?.sum_all()?),
    ];
    let mut per_term = BTreeMap::new();
    let mut total_value = 0.0;
    let mut total: Option<Tensor> = None;
    for (name, lambda, t) in terms {
        let v = scalar_f64(&t)?;
        if !v.is_finite() {
            return Err(Error::NonFinite {
                term: name.to_string(),
                step: None,
            });
        }
        per_term.insert(name.to_string(), v);
        total_value += lambda * v;
        let weighted = t.affine(lambda, 0.0)?;
        total = Some(match total {
            None => weighted,
            Some(acc) => (acc + weighted)?,
        });
    }
    Ok(CompositeLoss {
        total: total.expect("four terms"),
        report: LossReport {
            total: total_value,
            per_term,
        },
    })
}
