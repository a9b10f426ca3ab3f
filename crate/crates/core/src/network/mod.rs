//! Generator, wavelet critic and their configuration.

mod discriminator;
mod generator;
pub mod haar;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Conv2d;
use crate::style::{StyleExtractor, StyleHeads};

pub use discriminator::WaveletDiscriminator;
pub use generator::{EncoderState, Generator};
pub use haar::{haar_dwt, haar_idwt, HaarSubbands};

/// Per-level channel widths at multiplier 1.
pub const BASE_WIDTHS: [usize; 5] = [64, 128, 256, 512, 512];
pub const BASE_LATENT: usize = 512;
pub const BASE_CRITIC_WIDTH: usize = 64;
/// Width multiplier of the small model used for tests and CPU experiments.
pub const DESK_MULTIPLIER: f64 = 0.25;

pub const IMAGE_CHANNELS: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Number of encoder levels (residual blocks, each halving resolution).
    pub n_levels: usize,
    pub encoder_widths: Vec<usize>,
    pub decoder_blocks: usize,
    /// Total upscale of each decoder block; each must be a power of two.
    pub decoder_upscales: Vec<usize>,
    pub latent_dim: usize,
    pub critic_scales: usize,
    pub critic_width: usize,
    pub leaky_slope: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::scaled(DESK_MULTIPLIER)
    }
}

impl ModelConfig {
    /// Five levels, widths `BASE_WIDTHS · multiplier`, four decoder blocks upscaling 4,2,2,2.
    pub fn scaled(multiplier: f64) -> Self {
        let scale = |w: usize| ((w as f64 * multiplier).round() as usize).max(1);
        Self {
            n_levels: BASE_WIDTHS.len(),
            encoder_widths: BASE_WIDTHS.iter().map(|&w| scale(w)).collect(),
            decoder_blocks: 4,
            decoder_upscales: vec![4, 2, 2, 2],
            latent_dim: scale(BASE_LATENT),
            critic_scales: 3,
            critic_width: scale(BASE_CRITIC_WIDTH),
            leaky_slope: 0.2,
            seed: 0,
        }
    }

    pub fn full() -> Self {
        Self::scaled(1.0)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_levels == 0 {
            return bad("n_levels must be positive".into());
        }
        if self.encoder_widths.len() != self.n_levels {
            return bad(format!(
                "{} encoder widths given for {} levels",
                self.encoder_widths.len(),
                self.n_levels
            ));
        }
        if self.encoder_widths.iter().any(|&w| w == 0) || self.latent_dim == 0 || self.critic_width == 0 {
            return bad("widths must be positive".into());
        }
        if self.decoder_upscales.len() != self.decoder_blocks || self.decoder_blocks == 0 {
            return bad(format!(
                "{} decoder upscales given for {} blocks",
                self.decoder_upscales.len(),
                self.decoder_blocks
            ));
        }
        if self.decoder_upscales.iter().any(|&r| r < 2 || !r.is_power_of_two()) {
            return bad("decoder upscales must be powers of two >= 2".into());
        }
        let total: usize = self.decoder_upscales.iter().product();
        if total != 1 << self.n_levels {
            return bad(format!(
                "decoder upscales multiply to {total}, encoder downsamples by {}",
                1usize << self.n_levels
            ));
        }
        if self.critic_scales == 0 {
            return bad("critic needs at least one scale".into());
        }
        if !(self.leaky_slope >= 0.0 && self.leaky_slope < 1.0) {
            return bad(format!("leaky slope {} outside [0, 1)", self.leaky_slope));
        }
        Ok(())
    }

    /// Spatial dims must be divisible by this for the generator.
    pub fn divisor(&self) -> usize {
        1 << self.n_levels
    }

    /// Number of 2x upsampling stages in each decoder block, coarse to fine.
    pub(crate) fn decoder_stages(&self) -> Vec<usize> {
        self.decoder_upscales.iter().map(|r| r.trailing_zeros() as usize).collect()
    }
}

/// Trainable generator parameters, from a per-layer closed form.
pub fn param_count(config: &ModelConfig) -> usize {
    let w = &config.encoder_widths;
    let stem = Conv2d::param_count(IMAGE_CHANNELS, w[0], 3);
    let style = StyleExtractor::param_count(w[0], config.latent_dim) + StyleHeads::param_count(config.latent_dim, w);
    let mut encoder = 0;
    let mut in_c = w[0];
    for &c in w {
        encoder += Conv2d::param_count(in_c, c, 3) + Conv2d::param_count(c, c, 3) + Conv2d::param_count(c, c, 3);
        if in_c != c {
            encoder += Conv2d::param_count(in_c, c, 1);
        }
        in_c = c;
    }
    let mut decoder = 0;
    let mut level = config.n_levels;
    let mut in_c = w[config.n_levels - 1];
    for stages in config.decoder_stages() {
        for _ in 0..stages {
            let c = w[level - 1];
            decoder += Conv2d::param_count(in_c, 4 * c, 3);
            in_c = c;
            level -= 1;
        }
        decoder += 2 * Conv2d::param_count(in_c, in_c, 3);
    }
    let head = Conv2d::param_count(w[0] + IMAGE_CHANNELS, IMAGE_CHANNELS, 1);
    stem + style + encoder + decoder + head
}

/// Trainable critic parameters, from a per-layer closed form.
pub fn critic_param_count(config: &ModelConfig) -> usize {
    let cw = config.critic_width;
    config.critic_scales
        * (Conv2d::param_count(4 * IMAGE_CHANNELS, cw, 3) + Conv2d::param_count(cw, cw, 3) + Conv2d::param_count(cw, 1, 1))
}
