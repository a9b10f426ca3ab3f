//! Independent reference implementations shared by the integration and acceptance tests.
#![allow(dead_code)]

use candle_core::{DType, Device, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rst_isp::network::ModelConfig;

pub fn tensor(values: Vec<f64>, shape: &[usize]) -> Tensor {
    Tensor::from_vec(values, shape, &Device::Cpu).unwrap()
}

pub fn values(t: &Tensor) -> Vec<f64> {
    t.flatten_all().unwrap().to_dtype(DType::F64).unwrap().to_vec1().unwrap()
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    tensor((0..n).map(|_| rng.random_range(lo..hi)).collect(), shape)
}

/// Small generator/critic configuration that keeps integration tests fast.
pub fn tiny_model(seed: u64) -> ModelConfig {
    ModelConfig {
        n_levels: 3,
        encoder_widths: vec![4, 6, 8],
        decoder_blocks: 2,
        decoder_upscales: vec![4, 2],
        latent_dim: 8,
        critic_scales: 2,
        critic_width: 4,
        leaky_slope: 0.2,
        seed,
    }
}

/// Mean squared error based PSNR computed from first principles.
pub fn psnr_reference(a: &[f64], b: &[f64], max_val: f64) -> f64 {
    let mse = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64;
    10.0 * (max_val * max_val / mse).log10()
}

/// Sliding-window SSIM: explicit 2-D Gaussian window at every valid position of
/// every plane, averaged over positions, channels and batch.
pub fn ssim_reference(a: &[f64], b: &[f64], shape: [usize; 4], window: usize, sigma: f64, k1: f64, k2: f64) -> f64 {
    let [n, c, h, w] = shape;
    let half = (window as f64 - 1.0) / 2.0;
    let mut kernel = vec![0.0; window * window];
    for i in 0..window {
        for j in 0..window {
            let (di, dj) = (i as f64 - half, j as f64 - half);
            kernel[i * window + j] = (-(di * di + dj * dj) / (2.0 * sigma * sigma)).exp();
        }
    }
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|v| *v /= total);
    let (c1, c2) = (k1 * k1, k2 * k2);
    let mut acc = 0.0;
    let mut count = 0usize;
    for plane in 0..n * c {
        let off = plane * h * w;
        for y in 0..=h - window {
            for x in 0..=w - window {
                let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..window {
                    for j in 0..window {
                        let k = kernel[i * window + j];
                        let p = off + (y + i) * w + x + j;
                        ma += k * a[p];
                        mb += k * b[p];
                        saa += k * a[p] * a[p];
                        sbb += k * b[p] * b[p];
                        sab += k * a[p] * b[p];
                    }
                }
                let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
                acc += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
    }
    acc / count as f64
}

/// Largest relative error between `analytic` and central differences of `f` at `x`.
pub fn max_fd_error(f: &dyn Fn(&[f64]) -> f64, x: &[f64], analytic: &[f64], h: f64) -> f64 {
    let mut worst: f64 = 0.0;
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let fp = f(&probe);
        probe[i] = x[i] - h;
        let fm = f(&probe);
        probe[i] = x[i];
        let numeric = (fp - fm) / (2.0 * h);
        let err = (numeric - analytic[i]).abs() / numeric.abs().max(analytic[i].abs()).max(1e-4);
        worst = worst.max(err);
    }
    worst
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation of `v` against its index.
pub fn spearman_trend(v: &[f64]) -> f64 {
    let rv = ranks(v);
    let ri: Vec<f64> = (0..v.len()).map(|i| i as f64).collect();
    let n = v.len() as f64;
    let (mv, mi) = (rv.iter().sum::<f64>() / n, ri.iter().sum::<f64>() / n);
    let cov: f64 = rv.iter().zip(&ri).map(|(a, b)| (a - mv) * (b - mi)).sum();
    let sv: f64 = rv.iter().map(|a| (a - mv).powi(2)).sum::<f64>().sqrt();
    let si: f64 = ri.iter().map(|b| (b - mi).powi(2)).sum::<f64>().sqrt();
    cov / (sv * si)
}

/// Symmetric eigenvalues by cyclic Jacobi rotations.
pub fn jacobi_eigenvalues(mut a: Vec<f64>, n: usize) -> Vec<f64> {
    for _ in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * n + j].powi(2))
            .sum();
        if off < 1e-24 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
            }
        }
    }
    (0..n).map(|i| a[i * n + i]).collect()
}
