use candle_core::{DType, Tensor};

use crate::data::PairSet;
use crate::error::{Error, Result};
use crate::isp::{inverse_isp, IspParams};
use crate::metrics::{psnr, ssim, SsimParams};
use crate::network::Generator;

/// Anything that maps a `(1, 3, H, W)` sRGB image to a RAW estimate.
pub trait Reconstructor {
    fn reconstruct(&self, srgb: &Tensor, params: Option<&IspParams>) -> Result<Tensor>;
}

impl Reconstructor for Generator {
    fn reconstruct(&self, srgb: &Tensor, _: Option<&IspParams>) -> Result<Tensor> {
        self.forward(&srgb.to_dtype(self.params().dtype())?)
    }
}

/// Baseline that returns its input unchanged.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityModel;

impl Reconstructor for IdentityModel {
    fn reconstruct(&self, srgb: &Tensor, _: Option<&IspParams>) -> Result<Tensor> {
        Ok(srgb.clone())
    }
}

/// The analytic inverse of the synthetic ISP, given each pair's true parameters.
#[derive(Debug, Clone, Copy, Default)]
pub struct IspOracle;

impl Reconstructor for IspOracle {
    fn reconstruct(&self, srgb: &Tensor, params: Option<&IspParams>) -> Result<Tensor> {
        let p = params.ok_or_else(|| Error::Contract("ISP oracle needs per-pair ISP parameters".into()))?;
        Ok(inverse_isp(&srgb.to_dtype(DType::F64)?, p)?.0.clamp(0.0, 1.0)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub psnr: f64,
    pub ssim: f64,
    /// `(psnr, ssim)` per pair in dataset order.
    pub per_pair: Vec<(f64, f64)>,
}

/// Mean PSNR and SSIM against the ground-truth RAW, one pair at a time, no preprocessing.
pub fn evaluate<M: Reconstructor + ?Sized>(model: &M, data: &PairSet) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let window = SsimParams::default();
    let mut per_pair = Vec::with_capacity(data.len());
    for i in 0..data.len() {
        let (srgb, raw) = data.batch(&[i], DType::F64)?;
        let pred = model.reconstruct(&srgb, data.params[i].as_ref())?.to_dtype(DType::F64)?;
        per_pair.push((psnr(&pred, &raw, 1.0)?, ssim(&pred, &raw, &window)?));
    }
    let n = per_pair.len() as f64;
    Ok(EvalReport {
        psnr: per_pair.iter().map(|p| p.0).sum::<f64>() / n,
        ssim: per_pair.iter().map(|p| p.1).sum::<f64>() / n,
        per_pair,
    })
}
