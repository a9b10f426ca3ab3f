use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::Tensor;

use super::config::AdamConfig;
use crate::error::{Error, Result};
use crate::nn::ParamStore;

/// Adam over one [`ParamStore`], with moments kept by parameter name so they can be saved.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub config: AdamConfig,
    /// Number of updates taken.
    pub t: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(params: &ParamStore, lr: f64, config: AdamConfig) -> Result<Self> {
        let mut m = BTreeMap::new();
        for (name, var) in params.iter() {
            m.insert(name.clone(), var.as_tensor().zeros_like()?);
        }
        Ok(Self {
            lr,
            config,
            t: 0,
            v: m.clone(),
            m,
        })
    }

    /// One update of every parameter; parameters absent from `grads` see a zero gradient.
    pub fn step(&mut self, params: &ParamStore, grads: &GradStore) -> Result<()> {
        self.t += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let t = self.t as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (name, var) in params.iter() {
            let w = var.as_tensor();
            let g = match grads.get(w) {
                Some(g) => g.clone(),
                None => w.zeros_like()?,
            };
            let m = self.m.get_mut(name).ok_or_else(|| missing(name))?;
            *m = ((m.affine(beta1, 0.0)? + g.affine(1.0 - beta1, 0.0)?)?).detach();
            let v = self.v.get_mut(name).ok_or_else(|| missing(name))?;
            *v = ((v.affine(beta2, 0.0)? + g.sqr()?.affine(1.0 - beta2, 0.0)?)?).detach();
            let denom = (v.affine(1.0 / bc2, 0.0)?.sqrt()? + eps)?;
            let update = m.affine(self.lr / bc1, 0.0)?.div(&denom)?;
            var.set(&(w - update)?.detach())?;
        }
        Ok(())
    }

    /// Moment tensors as `(m, v)` maps keyed by parameter name.
    pub fn moments(&self) -> (&BTreeMap<String, Tensor>, &BTreeMap<String, Tensor>) {
        (&self.m, &self.v)
    }

    /// Replaces the moments; names and shapes must match the current ones.
    pub fn load_moments(&mut self, m: BTreeMap<String, Tensor>, v: BTreeMap<String, Tensor>, t: u64) -> Result<()> {
        for (name, cur) in self.m.iter().chain(self.v.iter()) {
            for src in [&m, &v] {
                let got = src.get(name).ok_or_else(|| missing(name))?;
                if got.dims() != cur.dims() {
                    return Err(Error::ShapeMismatch {
                        op: "Adam::load_moments",
                        lhs: cur.dims().to_vec(),
                        rhs: got.dims().to_vec(),
                    });
                }
            }
        }
        if m.len() != self.m.len() || v.len() != self.v.len() {
            return Err(Error::Contract("optimizer state has unexpected entries".into()));
        }
        let dtype = self.m.values().next().map(|t| t.dtype());
        let cast = |map: BTreeMap<String, Tensor>| -> Result<BTreeMap<String, Tensor>> {
            map.into_iter()
                .map(|(k, t)| Ok((k, match dtype {
                    Some(d) => t.to_dtype(d)?,
                    None => t,
                })))
                .collect()
        };
        self.m = cast(m)?;
        self.v = cast(v)?;
        self.t = t;
        Ok(())
    }
}

fn missing(name: &str) -> Error {
    Error::Contract(format!("no optimizer state for parameter `{name}`"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Init, Linear};
    use candle_core::{DType, Device};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn first_step_moves_each_weight_by_lr() {
        // With bias correction the first Adam step is lr·sign(g) (up to eps).
        let mut store = ParamStore::new(DType::F64);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let lin = Linear::new(
            &mut Init {
                store: &mut store,
                rng: &mut rng,
            },
            "fc",
            3,
            2,
        )
        .unwrap();
        let before = lin.weight.as_tensor().to_vec2::<f64>().unwrap();
        let x = Tensor::new(&[[1.0f64, -2.0, 0.5]], &Device::Cpu).unwrap();
        let loss = lin.forward(&x).unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        let mut opt = Adam::new(&store, 0.01, AdamConfig::default()).unwrap();
        opt.step(&store, &grads).unwrap();
        let after = lin.weight.as_tensor().to_vec2::<f64>().unwrap();
        let sign = [1.0, -1.0, 1.0];
        for r in 0..2 {
            for c in 0..3 {
                assert!((before[r][c] - after[r][c] - 0.01 * sign[c]).abs() < 1e-8);
            }
        }
        assert_eq!(opt.t, 1);
    }
}
