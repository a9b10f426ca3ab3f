use candle_core::{DType, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::haar::{haar_dwt, haar_idwt, HaarSubbands};
use super::{ModelConfig, IMAGE_CHANNELS};
use crate::error::{Error, Result};
use crate::metrics::Critic;
use crate::nn::{Conv2d, Init, ParamStore};
use crate::ops::leaky_relu_with_mask;

/// Offset mixed into the model seed so the critic does not share the generator's stream.
const CRITIC_SEED_OFFSET: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Debug, Clone)]
struct CriticScale {
    conv_a: Conv2d,
    conv_b: Conv2d,
    conv_out: Conv2d,
}

/// Saved forward quantities of one scale, enough to replay the input gradient.
struct ScaleTrace {
    patches: Tensor,
    mask_a: Tensor,
    mask_b: Tensor,
    height: usize,
    width: usize,
}

/// Multi-scale patch critic operating on Haar subbands.
///
/// At each scale the image is split into its four subbands, scored by a small
/// conv stack, and its LL band is passed on to the next scale.
#[derive(Debug, Clone)]
pub struct WaveletDiscriminator {
    params: ParamStore,
    scales: Vec<CriticScale>,
    slope: f64,
}

impl WaveletDiscriminator {
    pub fn new(config: &ModelConfig, dtype: DType) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new(dtype);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ CRITIC_SEED_OFFSET);
        let mut init = Init {
            store: &mut params,
            rng: &mut rng,
        };
        let cw = config.critic_width;
        let mut scales = Vec::with_capacity(config.critic_scales);
        for s in 0..config.critic_scales {
            let p = format!("scale{}", s + 1);
            scales.push(CriticScale {
                conv_a: Conv2d::new(&mut init, &format!("{p}.conv_a"), 4 * IMAGE_CHANNELS, cw, 3, 1, 1, 1.0)?,
                conv_b: Conv2d::new(&mut init, &format!("{p}.conv_b"), cw, cw, 3, 1, 1, 1.0)?,
                conv_out: Conv2d::new(&mut init, &format!("{p}.conv_out"), cw, 1, 1, 1, 0, 1.0)?,
            });
        }
        Ok(Self {
            params,
            scales,
            slope: config.leaky_slope,
        })
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn num_scales(&self) -> usize {
        self.scales.len()
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let (_, c, h, w) = x.dims4()?;
        if c != IMAGE_CHANNELS {
            return Err(Error::ShapeMismatch {
                op: "critic_forward",
                lhs: x.dims().to_vec(),
                rhs: vec![x.dims()[0], IMAGE_CHANNELS, h, w],
            });
        }
        let d = 1 << self.scales.len();
        if h % d != 0 || w % d != 0 || h == 0 || w == 0 {
            return Err(Error::Indivisible {
                op: "critic_forward",
                height: h,
                width: w,
                divisor: d,
            });
        }
        Ok(())
    }

    fn trace(&self, x: &Tensor) -> Result<Vec<ScaleTrace>> {
        self.check_input(x)?;
        let mut current = x.clone();
        let mut traces = Vec::with_capacity(self.scales.len());
        for scale in &self.scales {
            let bands = haar_dwt(&current)?;
            let z = bands.concat()?;
            let (_, _, height, width) = z.dims4()?;
            let (a, mask_a) = leaky_relu_with_mask(&scale.conv_a.forward(&z)?, self.slope)?;
            let (b, mask_b) = leaky_relu_with_mask(&scale.conv_b.forward(&a)?, self.slope)?;
            traces.push(ScaleTrace {
                patches: scale.conv_out.forward(&b)?,
                mask_a,
                mask_b,
                height,
                width,
            });
            current = bands.ll;
        }
        Ok(traces)
    }

    /// Patch logits of every scale, each `(B, 1, H/2^s, W/2^s)`.
    pub fn patch_scores(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        Ok(self.trace(x)?.into_iter().map(|t| t.patches).collect())
    }

    fn reduce(&self, traces: &[ScaleTrace]) -> Result<Tensor> {
        let n = traces.len() as f64;
        let mut total: Option<Tensor> = None;
        for t in traces {
            let s = t.patches.flatten_from(1)?.mean(1)?;
            total = Some(match total {
                Some(acc) => (acc + s)?,
                None => s,
            });
        }
        let total = total.ok_or_else(|| Error::Contract("critic has no scales".into()))?;
        Ok((total / n)?)
    }
}

impl Critic for WaveletDiscriminator {
    /// Mean over scales of the mean patch logit.
    fn score(&self, x: &Tensor) -> Result<Tensor> {
        let traces = self.trace(x)?;
        self.reduce(&traces)
    }

    fn score_and_input_grad(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let traces = self.trace(x)?;
        let scores = self.reduce(&traces)?;
        let n = traces.len() as f64;
        let mut upstream: Option<Tensor> = None;
        for (scale, t) in self.scales.iter().zip(&traces).rev() {
            let (b, _, ph, pw) = t.patches.dims4()?;
            let g = Tensor::full(1.0 / (n * (ph * pw) as f64), (b, 1, ph, pw), x.device())?.to_dtype(x.dtype())?;
            let g = scale.conv_out.input_grad(&g, t.height, t.width)?.mul(&t.mask_b)?;
            let g = scale.conv_b.input_grad(&g, t.height, t.width)?.mul(&t.mask_a)?;
            let g = scale.conv_a.input_grad(&g, t.height, t.width)?;
            let mut bands = HaarSubbands::split(&g)?;
            if let Some(u) = upstream {
                bands.ll = (bands.ll + u)?;
            }
            upstream = Some(haar_idwt(&bands)?);
        }
        let grad = upstream.ok_or_else(|| Error::Contract("critic has no scales".into()))?;
        Ok((scores, grad))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::gradient_penalty;
    use crate::network::critic_param_count;
    use crate::ops::{scalar_f64, to_f64_vec};
    use candle_core::{Device, Var};

    fn config() -> ModelConfig {
        let mut c = ModelConfig::default();
        c.critic_width = 4;
        c.critic_scales = 2;
        c.seed = 5;
        c
    }

    fn image(seed: f64) -> Tensor {
        let v: Vec<f64> = (0..2 * 3 * 8 * 8).map(|i| 0.5 + 0.4 * ((i as f64) * seed).sin()).collect();
        Tensor::from_vec(v, (2, 3, 8, 8), &Device::Cpu).unwrap()
    }

    #[test]
    fn closed_form_param_count() {
        let c = config();
        let d = WaveletDiscriminator::new(&c, DType::F32).unwrap();
        assert_eq!(d.params().numel(), critic_param_count(&c));
    }

    #[test]
    fn scores_have_one_entry_per_sample() {
        let d = WaveletDiscriminator::new(&config(), DType::F64).unwrap();
        let s = d.score(&image(0.3)).unwrap();
        assert_eq!(s.dims(), &[2]);
        let p = d.patch_scores(&image(0.3)).unwrap();
        assert_eq!(p[0].dims(), &[2, 1, 4, 4]);
        assert_eq!(p[1].dims(), &[2, 1, 2, 2]);
    }

    #[test]
    fn indivisible_input_is_rejected() {
        let d = WaveletDiscriminator::new(&config(), DType::F64).unwrap();
        let x = Tensor::zeros((1, 3, 6, 8), DType::F64, &Device::Cpu).unwrap();
        assert!(d.score(&x).is_err());
    }

    #[test]
    fn explicit_input_grad_matches_autodiff() {
        let d = WaveletDiscriminator::new(&config(), DType::F64).unwrap();
        let x = Var::from_tensor(&image(0.7)).unwrap();
        let (_, grad) = d.score_and_input_grad(x.as_tensor()).unwrap();
        let auto = d.score(x.as_tensor()).unwrap().sum_all().unwrap().backward().unwrap();
        let auto = auto.get(x.as_tensor()).unwrap();
        for (a, b) in to_f64_vec(&grad).unwrap().iter().zip(to_f64_vec(auto).unwrap()) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn penalty_gradient_matches_finite_difference() {
        let d = WaveletDiscriminator::new(&config(), DType::F64).unwrap();
        let real = image(0.7);
        let fake = image(1.3);
        let penalty = |d: &WaveletDiscriminator| {
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            gradient_penalty(d, &real, &fake, &mut rng).unwrap()
        };
        let grads = penalty(&d).backward().unwrap();
        let w = d.params().get("scale1.conv_b.weight").unwrap();
        let analytic = to_f64_vec(grads.get(w.as_tensor()).unwrap()).unwrap();
        let base = w.as_tensor().copy().unwrap();
        let flat = to_f64_vec(&base).unwrap();
        let h = 1e-6;
        for idx in [0usize, 7, 20, 35] {
            let mut plus = flat.clone();
            plus[idx] += h;
            w.set(&Tensor::from_vec(plus, base.dims(), &Device::Cpu).unwrap()).unwrap();
            let fp = scalar_f64(&penalty(&d)).unwrap();
            let mut minus = flat.clone();
            minus[idx] -= h;
            w.set(&Tensor::from_vec(minus, base.dims(), &Device::Cpu).unwrap()).unwrap();
            let fm = scalar_f64(&penalty(&d)).unwrap();
            w.set(&base).unwrap();
            let numeric = (fp - fm) / (2.0 * h);
            assert!(
                (numeric - analytic[idx]).abs() < 1e-6 * (1.0 + numeric.abs()),
                "idx {idx}: {numeric} vs {}",
                analytic[idx]
            );
        }
    }
}
