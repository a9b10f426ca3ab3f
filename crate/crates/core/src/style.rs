//! Style representation and removal: Gram matrices, channel statistics,
//! adaptive instance normalization and the fully-connected style extractor.

use candle_core::{Tensor, D};

use crate::error::{Error, Result};
use crate::nn::{Init, Linear};
use crate::ops;

/// Variance floor used by [`channel_stats`] and added to predicted scales.
pub const STYLE_EPS: f64 = 1e-5;

/// Batched Gram matrices `(B, K, K)` of one feature level.
#[derive(Debug, Clone)]
pub struct GramFeatures {
    pub matrix: Tensor,
    pub level: usize,
}

impl GramFeatures {
    pub fn channels(&self) -> usize {
        self.matrix.dims()[1]
    }

    /// Row-major `(B, K²)` view fed to the style extractor.
    pub fn flatten(&self) -> Result<Tensor> {
        Ok(self.matrix.flatten_from(1)?)
    }
}

/// `G[i][j] = Σ_p f_i(p) f_j(p)` per batch item, divided by `K·H·W` when `normalize` is set.
///
/// The result is symmetrized so it is exactly symmetric in floating point.
pub fn gram_matrix(features: &Tensor, level: usize, normalize: bool) -> Result<GramFeatures> {
    let (b, k, h, w) = features.dims4()?;
    if h * w == 0 {
        return Err(Error::TooSmall {
            op: "gram_matrix",
            height: h,
            width: w,
            min: 1,
        });
    }
    let f = features.reshape((b, k, h * w))?;
    let g = f.matmul(&f.t()?)?;
    let g = ((&g + g.t()?)? * 0.5)?;
    let g = if normalize {
        (g / (k * h * w) as f64)?
    } else {
        g
    };
    Ok(GramFeatures { matrix: g, level })
}

/// Per-channel spatial mean and floored standard deviation `sqrt(var + ε)`, each `(B, C)`.
pub fn channel_stats(features: &Tensor) -> Result<(Tensor, Tensor)> {
    let (b, c, h, w) = features.dims4()?;
    if h * w == 0 {
        return Err(Error::TooSmall {
            op: "channel_stats",
            height: h,
            width: w,
            min: 1,
        });
    }
    let flat = features.reshape((b, c, h * w))?;
    let mu = flat.mean_keepdim(D::Minus1)?;
    let var = flat.broadcast_sub(&mu)?.sqr()?.mean(D::Minus1)?;
    let sigma = (var + STYLE_EPS)?.sqrt()?;
    Ok((mu.squeeze(D::Minus1)?, sigma))
}

/// Per-level AdaIN target statistics, each `(B, C_i)`.
#[derive(Debug, Clone)]
pub struct StyleCode {
    pub level: usize,
    pub mu: Tensor,
    pub sigma: Tensor,
}

impl StyleCode {
    pub fn new(level: usize, mu: Tensor, sigma: Tensor) -> Result<Self> {
        if mu.dims() != sigma.dims() || mu.rank() != 2 {
            return Err(Error::ShapeMismatch {
                op: "StyleCode::new",
                lhs: mu.dims().to_vec(),
                rhs: sigma.dims().to_vec(),
            });
        }
        Ok(Self { level, mu, sigma })
    }

    /// The statistics of `features` themselves, which makes [`adain`] the identity.
    pub fn of(level: usize, features: &Tensor) -> Result<Self> {
        let (mu, sigma) = channel_stats(features)?;
        Self::new(level, mu, sigma)
    }

    pub fn width(&self) -> usize {
        self.mu.dims()[1]
    }
}

/// `σ(y)·(x − μ(x))/σ(x) + μ(y)` per batch item and channel.
pub fn adain(content: &Tensor, style: &StyleCode) -> Result<Tensor> {
    let (b, c, _, _) = content.dims4()?;
    if style.width() != c || style.mu.dims()[0] != b {
        return Err(Error::StyleWidth {
            level: style.level,
            expected: c,
            got: style.width(),
        });
    }
    let (mu_x, sigma_x) = channel_stats(content)?;
    let col = |t: &Tensor| t.reshape((b, c, 1, 1));
    let scale = (style.sigma.clone() / sigma_x)?;
    let normalized = content.broadcast_sub(&col(&mu_x)?)?.broadcast_mul(&col(&scale)?)?;
    Ok(normalized.broadcast_add(&col(&style.mu)?)?)
}

/// Output of the fully-connected style extractor, `(B, D)`.
#[derive(Debug, Clone)]
pub struct StyleLatent(pub Tensor);

impl StyleLatent {
    pub fn dim(&self) -> usize {
        self.0.dims()[1]
    }
}

/// Five fully-connected layers from a flattened Gram matrix to the style latent.
#[derive(Debug, Clone)]
pub struct StyleExtractor {
    layers: Vec<Linear>,
    slope: f64,
}

pub const STYLE_FC_LAYERS: usize = 5;

impl StyleExtractor {
    pub fn new(init: &mut Init<'_>, prefix: &str, gram_channels: usize, latent_dim: usize, slope: f64) -> Result<Self> {
        let mut layers = Vec::with_capacity(STYLE_FC_LAYERS);
        let mut in_f = gram_channels * gram_channels;
        for i in 0..STYLE_FC_LAYERS {
            layers.push(Linear::new(init, &format!("{prefix}.fc{i}"), in_f, latent_dim)?);
            in_f = latent_dim;
        }
        Ok(Self { layers, slope })
    }

    pub fn param_count(gram_channels: usize, latent_dim: usize) -> usize {
        Linear::param_count(gram_channels * gram_channels, latent_dim)
            + (STYLE_FC_LAYERS - 1) * Linear::param_count(latent_dim, latent_dim)
    }

    pub fn forward(&self, gram: &GramFeatures) -> Result<StyleLatent> {
        let mut h = gram.flatten()?;
        let expected = self.layers[0].in_features();
        if h.dims()[1] != expected {
            return Err(Error::ShapeMismatch {
                op: "style_extract",
                lhs: h.dims().to_vec(),
                rhs: vec![h.dims()[0], expected],
            });
        }
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h)?;
            if i + 1 < self.layers.len() {
                h = ops::leaky_relu(&h, self.slope)?;
            }
        }
        Ok(StyleLatent(h))
    }
}

/// One fully-connected head per encoder level, mapping the latent to `(μ_i, σ_i)`.
#[derive(Debug, Clone)]
pub struct StyleHeads {
    heads: Vec<Linear>,
    widths: Vec<usize>,
}

impl StyleHeads {
    pub fn new(init: &mut Init<'_>, prefix: &str, latent_dim: usize, widths: &[usize]) -> Result<Self> {
        let heads = widths
            .iter()
            .enumerate()
            .map(|(i, &c)| Linear::new(init, &format!("{prefix}.{}", i + 1), latent_dim, 2 * c))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            heads,
            widths: widths.to_vec(),
        })
    }

    pub fn param_count(latent_dim: usize, widths: &[usize]) -> usize {
        widths.iter().map(|&c| Linear::param_count(latent_dim, 2 * c)).sum()
    }

    pub fn levels(&self) -> usize {
        self.heads.len()
    }

    /// Code for level `level` (1-based). `σ = softplus(·) + ε` is strictly positive.
    pub fn forward(&self, latent: &StyleLatent, level: usize) -> Result<StyleCode> {
        if level == 0 || level > self.heads.len() {
            return Err(Error::LevelOutOfRange {
                level,
                levels: self.heads.len(),
            });
        }
        let c = self.widths[level - 1];
        let out = self.heads[level - 1].forward(&latent.0)?;
        let mu = out.narrow(1, 0, c)?;
        let sigma = (ops::softplus(&out.narrow(1, c, c)?)? + STYLE_EPS)?;
        StyleCode::new(level, mu, sigma)
    }

    pub fn forward_all(&self, latent: &StyleLatent) -> Result<Vec<StyleCode>> {
        (1..=self.heads.len()).map(|i| self.forward(latent, i)).collect()
    }
}
