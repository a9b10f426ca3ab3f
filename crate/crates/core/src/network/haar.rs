//! Single-level orthonormal 2-D Haar transform.

use candle_core::Tensor;

use crate::error::{Error, Result};

/// Subbands of one analysis step, each `(B, C, H/2, W/2)`.
///
/// For a 2x2 block `[[a, b], [c, d]]`:
/// `ll = (a+b+c+d)/2`, `lh = (a-b+c-d)/2` (horizontal detail),
/// `hl = (a+b-c-d)/2` (vertical detail), `hh = (a-b-c+d)/2`.
#[derive(Debug, Clone)]
pub struct HaarSubbands {
    pub ll: Tensor,
    pub lh: Tensor,
    pub hl: Tensor,
    pub hh: Tensor,
}

impl HaarSubbands {
    /// Channel-wise concatenation `[ll, lh, hl, hh]`, `(B, 4C, H/2, W/2)`.
    pub fn concat(&self) -> Result<Tensor> {
        Ok(Tensor::cat(&[&self.ll, &self.lh, &self.hl, &self.hh], 1)?)
    }

    /// Inverse of [`HaarSubbands::concat`].
    pub fn split(stacked: &Tensor) -> Result<Self> {
        let c4 = stacked.dims()[1];
        if c4 % 4 != 0 {
            return Err(Error::ChannelsIndivisible {
                op: "HaarSubbands::split",
                channels: c4,
                factor: 2,
            });
        }
        let c = c4 / 4;
        Ok(Self {
            ll: stacked.narrow(1, 0, c)?,
            lh: stacked.narrow(1, c, c)?,
            hl: stacked.narrow(1, 2 * c, c)?,
            hh: stacked.narrow(1, 3 * c, c)?,
        })
    }
}

pub fn haar_dwt(x: &Tensor) -> Result<HaarSubbands> {
    let (b, c, h, w) = x.dims4()?;
    if h % 2 != 0 || w % 2 != 0 || h == 0 || w == 0 {
        return Err(Error::Indivisible {
            op: "haar_dwt",
            height: h,
            width: w,
            divisor: 2,
        });
    }
    let (oh, ow) = (h / 2, w / 2);
    let blocks = x.reshape(vec![b, c, oh, 2, ow, 2])?;
    let pick = |r: usize, s: usize| -> Result<Tensor> {
        Ok(blocks.narrow(3, r, 1)?.narrow(5, s, 1)?.reshape((b, c, oh, ow))?)
    };
    let (a, bb, cc, d) = (pick(0, 0)?, pick(0, 1)?, pick(1, 0)?, pick(1, 1)?);
    let s_ab = (&a + &bb)?;
    let s_cd = (&cc + &d)?;
    let d_ab = (&a - &bb)?;
    let d_cd = (&cc - &d)?;
    Ok(HaarSubbands {
        ll: ((&s_ab + &s_cd)? * 0.5)?,
        lh: ((&d_ab + &d_cd)? * 0.5)?,
        hl: ((&s_ab - &s_cd)? * 0.5)?,
        hh: ((&d_ab - &d_cd)? * 0.5)?,
    })
}

pub fn haar_idwt(bands: &HaarSubbands) -> Result<Tensor> {
    let (b, c, h, w) = bands.ll.dims4()?;
    for t in [&bands.lh, &bands.hl, &bands.hh] {
        if t.dims() != bands.ll.dims() {
            return Err(Error::ShapeMismatch {
                op: "haar_idwt",
                lhs: bands.ll.dims().to_vec(),
                rhs: t.dims().to_vec(),
            });
        }
    }
    let p = (&bands.ll + &bands.hl)?;
    let q = (&bands.ll - &bands.hl)?;
    let r = (&bands.lh + &bands.hh)?;
    let s = (&bands.lh - &bands.hh)?;
    let a = ((&p + &r)? * 0.5)?;
    let bb = ((&p - &r)? * 0.5)?;
    let cc = ((&q + &s)? * 0.5)?;
    let d = ((&q - &s)? * 0.5)?;
    let top = Tensor::stack(&[&a, &bb], 4)?;
    let bottom = Tensor::stack(&[&cc, &d], 4)?;
    Ok(Tensor::stack(&[&top, &bottom], 3)?.reshape((b, c, 2 * h, 2 * w))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::to_f64_vec;
    use candle_core::{DType, Device};

    #[test]
    fn two_by_two_block() {
        let x = Tensor::new(&[[[[1.0f64, 2.0], [3.0, 4.0]]]], &Device::Cpu).unwrap();
        let s = haar_dwt(&x).unwrap();
        assert_eq!(to_f64_vec(&s.ll).unwrap(), vec![5.0]);
        assert_eq!(to_f64_vec(&s.lh).unwrap(), vec![-1.0]);
        assert_eq!(to_f64_vec(&s.hl).unwrap(), vec![-2.0]);
        assert_eq!(to_f64_vec(&s.hh).unwrap(), vec![0.0]);
        assert_eq!(to_f64_vec(&haar_idwt(&s).unwrap()).unwrap(), vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn constant_image_has_no_detail() {
        let x = Tensor::full(0.25f64, (2, 3, 4, 6), &Device::Cpu).unwrap();
        let s = haar_dwt(&x).unwrap();
        for band in [&s.lh, &s.hl, &s.hh] {
            assert!(to_f64_vec(band).unwrap().iter().all(|&v| v == 0.0));
        }
        assert!(to_f64_vec(&s.ll).unwrap().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn odd_dims_are_rejected() {
        let x = Tensor::zeros((1, 1, 3, 4), DType::F64, &Device::Cpu).unwrap();
        let err = haar_dwt(&x).unwrap_err();
        assert!(err.to_string().contains("divisible by 2"), "{err}");
    }

    #[test]
    fn concat_split_round_trip() {
        let x = Tensor::arange(0f64, 32.0, &Device::Cpu).unwrap().reshape((1, 2, 4, 4)).unwrap();
        let s = haar_dwt(&x).unwrap();
        let back = HaarSubbands::split(&s.concat().unwrap()).unwrap();
        assert_eq!(to_f64_vec(&haar_idwt(&back).unwrap()).unwrap(), to_f64_vec(&x).unwrap());
    }
}
