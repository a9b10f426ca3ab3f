//! Parameter storage and the two trainable layer types.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::ops;

/// Named trainable tensors, ordered by their hierarchical name.
#[derive(Debug, Clone)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
}

impl ParamStore {
    pub fn new(dtype: DType) -> Self {
        Self {
            vars: BTreeMap::new(),
            dtype,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    fn register(&mut self, name: String, values: Vec<f64>, shape: &[usize]) -> Result<Var> {
        if self.vars.contains_key(&name) {
            return Err(Error::Contract(format!("parameter `{name}` registered twice")));
        }
        let t = Tensor::from_vec(values, shape, &Device::Cpu)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        self.vars.insert(name, var.clone());
        Ok(var)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Detached copies of every tensor, keyed by name.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Tensor>> {
        self.vars
            .iter()
            .map(|(k, v)| Ok((k.clone(), v.as_tensor().copy()?.detach())))
            .collect()
    }

    /// Overwrites every parameter in place from `tensors`; names and shapes must match exactly.
    pub fn load(&self, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        if tensors.len() != self.vars.len() {
            return Err(Error::Contract(format!(
                "expected {} parameter tensors, got {}",
                self.vars.len(),
                tensors.len()
            )));
        }
        for (name, var) in &self.vars {
            let t = tensors
                .get(name)
                .ok_or_else(|| Error::Contract(format!("missing parameter `{name}`")))?;
            if t.dims() != var.dims() {
                return Err(Error::ShapeMismatch {
                    op: "ParamStore::load",
                    lhs: var.dims().to_vec(),
                    rhs: t.dims().to_vec(),
                });
            }
            var.set(&t.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }
}

/// Seeded initializer that registers parameters under a name prefix.
pub struct Init<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut ChaCha8Rng,
}

impl Init<'_> {
    fn normal(&mut self, n: usize, std: f64) -> Vec<f64> {
        let dist = Normal::new(0.0, std).expect("finite std");
        (0..n).map(|_| dist.sample(&mut *self.rng)).collect()
    }

    pub fn uniform(&mut self, n: usize, bound: f64) -> Vec<f64> {
        (0..n).map(|_| self.rng.random_range(-bound..bound)).collect()
    }
}

/// Square-kernel convolution with bias.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Var,
    pub bias: Var,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    /// He-normal weights for a leaky rectifier with slope `slope` (use `gain_scale` to damp).
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        init: &mut Init<'_>,
        name: &str,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        gain_scale: f64,
    ) -> Result<Self> {
        let fan_in = (in_c * kernel * kernel) as f64;
        let std = gain_scale * (2.0 / ((1.0 + 0.2f64.powi(2)) * fan_in)).sqrt();
        let w = init.normal(out_c * in_c * kernel * kernel, std);
        let weight = init.store.register(format!("{name}.weight"), w, &[out_c, in_c, kernel, kernel])?;
        let bias = init.store.register(format!("{name}.bias"), vec![0.0; out_c], &[out_c])?;
        Ok(Self {
            weight,
            bias,
            stride,
            padding,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        ops::conv2d(x, self.weight.as_tensor(), Some(self.bias.as_tensor()), self.stride, self.padding)
    }

    /// Gradient of `<forward(x), grad>` with respect to `x`.
    pub fn input_grad(&self, grad: &Tensor, height: usize, width: usize) -> Result<Tensor> {
        ops::conv2d_input_grad(grad, self.weight.as_tensor(), height, width, self.stride, self.padding)
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn param_count(in_c: usize, out_c: usize, kernel: usize) -> usize {
        out_c * in_c * kernel * kernel + out_c
    }
}

/// Fully-connected layer `y = x W^T + b` over `(B, in)` inputs.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Var,
    pub bias: Var,
}

impl Linear {
    pub fn new(init: &mut Init<'_>, name: &str, in_f: usize, out_f: usize) -> Result<Self> {
        let bound = (1.0 / in_f as f64).sqrt() * 3f64.sqrt();
        let w = init.uniform(out_f * in_f, bound);
        let weight = init.store.register(format!("{name}.weight"), w, &[out_f, in_f])?;
        let bias = init.store.register(format!("{name}.bias"), vec![0.0; out_f], &[out_f])?;
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.weight.as_tensor().t()?)?.broadcast_add(self.bias.as_tensor())?)
    }

    pub fn in_features(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn out_features(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn param_count(in_f: usize, out_f: usize) -> usize {
        in_f * out_f + out_f
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn linear_param_count_closed_form() {
        let mut store = ParamStore::new(DType::F64);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut init = Init {
            store: &mut store,
            rng: &mut rng,
        };
        Linear::new(&mut init, "fc", 7, 3).unwrap();
        assert_eq!(store.numel(), 7 * 3 + 3);
        assert_eq!(Linear::param_count(7, 3), 24);
    }

    #[test]
    fn duplicate_names_are_rejected() {
        let mut store = ParamStore::new(DType::F32);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut init = Init {
            store: &mut store,
            rng: &mut rng,
        };
        Linear::new(&mut init, "fc", 2, 2).unwrap();
        assert!(Linear::new(&mut init, "fc", 2, 2).is_err());
    }

    #[test]
    fn load_overwrites_shared_vars() {
        let mut store = ParamStore::new(DType::F64);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let lin = Linear::new(
            &mut Init {
                store: &mut store,
                rng: &mut rng,
            },
            "fc",
            2,
            2,
        )
        .unwrap();
        let mut snap = store.snapshot().unwrap();
        snap.insert("fc.bias".into(), Tensor::new(&[5.0f64, 6.0], &Device::Cpu).unwrap());
        store.load(&snap).unwrap();
        assert_eq!(lin.bias.as_tensor().to_vec1::<f64>().unwrap(), vec![5.0, 6.0]);
    }
}
