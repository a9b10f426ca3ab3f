use candle_core::{DType, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ModelConfig, IMAGE_CHANNELS};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Init, ParamStore};
use crate::ops::{leaky_relu, pixel_shuffle, sigmoid};
use crate::style::{adain, gram_matrix, GramFeatures, StyleCode, StyleExtractor, StyleHeads, StyleLatent};

#[derive(Debug, Clone)]
struct EncoderLevel {
    conv_a: Conv2d,
    conv_b: Conv2d,
    shortcut: Option<Conv2d>,
    down: Conv2d,
}

#[derive(Debug, Clone)]
struct DecoderBlock {
    ups: Vec<Conv2d>,
    refine_a: Conv2d,
    refine_b: Conv2d,
}

/// Intermediate encoder tensors.
#[derive(Debug, Clone)]
pub struct EncoderState {
    /// The sRGB input, reused by the output head.
    pub input: Tensor,
    /// Post-AdaIN features of each level at the level's input resolution.
    pub skips: Vec<Tensor>,
    /// Downsampled output of each level.
    pub features: Vec<Tensor>,
    pub bottleneck: Tensor,
}

/// The sRGB-to-RAW generator.
///
/// stem conv → Gram matrix → style extractor → per-level heads → AdaIN residual
/// encoder → PixelShuffle decoder with additive skips → 1x1 head → sigmoid.
#[derive(Debug, Clone)]
pub struct Generator {
    config: ModelConfig,
    params: ParamStore,
    stem: Conv2d,
    style: StyleExtractor,
    heads: StyleHeads,
    levels: Vec<EncoderLevel>,
    blocks: Vec<DecoderBlock>,
    head: Conv2d,
}

impl Generator {
    pub fn new(config: &ModelConfig, dtype: DType) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new(dtype);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut init = Init {
            store: &mut params,
            rng: &mut rng,
        };
        let w = &config.encoder_widths;
        let slope = config.leaky_slope;

        let stem = Conv2d::new(&mut init, "stem", IMAGE_CHANNELS, w[0], 3, 1, 1, 1.0)?;
        let style = StyleExtractor::new(&mut init, "style.fc", w[0], config.latent_dim, slope)?;
        let heads = StyleHeads::new(&mut init, "style.head", config.latent_dim, w)?;

        let mut levels = Vec::with_capacity(config.n_levels);
        let mut in_c = w[0];
        for (i, &c) in w.iter().enumerate() {
            let p = format!("encoder.{}", i + 1);
            levels.push(EncoderLevel {
                conv_a: Conv2d::new(&mut init, &format!("{p}.conv_a"), in_c, c, 3, 1, 1, 1.0)?,
                conv_b: Conv2d::new(&mut init, &format!("{p}.conv_b"), c, c, 3, 1, 1, 0.5)?,
                shortcut: if in_c != c {
                    Some(Conv2d::new(&mut init, &format!("{p}.shortcut"), in_c, c, 1, 1, 0, 1.0)?)
                } else {
                    None
                },
                down: Conv2d::new(&mut init, &format!("{p}.down"), c, c, 3, 2, 1, 1.0)?,
            });
            in_c = c;
        }

        let mut blocks = Vec::with_capacity(config.decoder_blocks);
        let mut level = config.n_levels;
        for (b, stages) in config.decoder_stages().into_iter().enumerate() {
            let p = format!("decoder.{}", b + 1);
            let mut ups = Vec::with_capacity(stages);
            for s in 0..stages {
                let c = w[level - 1];
                ups.push(Conv2d::new(&mut init, &format!("{p}.up{}", s + 1), in_c, 4 * c, 3, 1, 1, 1.0)?);
                in_c = c;
                level -= 1;
            }
            blocks.push(DecoderBlock {
                ups,
                refine_a: Conv2d::new(&mut init, &format!("{p}.refine_a"), in_c, in_c, 3, 1, 1, 1.0)?,
                refine_b: Conv2d::new(&mut init, &format!("{p}.refine_b"), in_c, in_c, 3, 1, 1, 0.5)?,
            });
        }
        let head = Conv2d::new(&mut init, "head", w[0] + IMAGE_CHANNELS, IMAGE_CHANNELS, 1, 1, 0, 0.5)?;

        Ok(Self {
            config: config.clone(),
            params,
            stem,
            style,
            heads,
            levels,
            blocks,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let (_, c, h, w) = x.dims4()?;
        if c != IMAGE_CHANNELS {
            return Err(Error::ShapeMismatch {
                op: "model_forward",
                lhs: x.dims().to_vec(),
                rhs: vec![x.dims()[0], IMAGE_CHANNELS, h, w],
            });
        }
        let d = self.config.divisor();
        if h % d != 0 || w % d != 0 || h == 0 || w == 0 {
            return Err(Error::Indivisible {
                op: "model_forward",
                height: h,
                width: w,
                divisor: d,
            });
        }
        Ok(())
    }

    pub fn stem_features(&self, x: &Tensor) -> Result<Tensor> {
        leaky_relu(&self.stem.forward(x)?, self.config.leaky_slope)
    }

    pub fn gram(&self, stem: &Tensor) -> Result<GramFeatures> {
        gram_matrix(stem, 1, true)
    }

    pub fn style_latent(&self, gram: &GramFeatures) -> Result<StyleLatent> {
        self.style.forward(gram)
    }

    pub fn style_heads(&self) -> &StyleHeads {
        &self.heads
    }

    /// The per-level AdaIN codes predicted from an input image.
    pub fn style_codes(&self, x: &Tensor) -> Result<Vec<StyleCode>> {
        self.check_input(x)?;
        let stem = self.stem_features(x)?;
        self.heads.forward_all(&self.style.forward(&self.gram(&stem)?)?)
    }

    /// Runs the encoder on `x` with externally supplied per-level codes.
    pub fn encode(&self, x: &Tensor, codes: &[StyleCode]) -> Result<EncoderState> {
        self.check_input(x)?;
        let stem = self.stem_features(x)?;
        self.encode_stem(x, &stem, codes)
    }

    fn encode_stem(&self, x: &Tensor, stem: &Tensor, codes: &[StyleCode]) -> Result<EncoderState> {
        if codes.len() != self.levels.len() {
            return Err(Error::Contract(format!(
                "encoder has {} levels but {} style codes were given",
                self.levels.len(),
                codes.len()
            )));
        }
        let slope = self.config.leaky_slope;
        let mut h = stem.clone();
        let mut skips = Vec::with_capacity(self.levels.len());
        let mut features = Vec::with_capacity(self.levels.len());
        for (level, code) in self.levels.iter().zip(codes) {
            let a = leaky_relu(&level.conv_a.forward(&h)?, slope)?;
            let shortcut = match &level.shortcut {
                Some(s) => s.forward(&h)?,
                None => h.clone(),
            };
            let b = (level.conv_b.forward(&a)? + shortcut)?;
            let normalized = adain(&b, code)?;
            h = leaky_relu(&level.down.forward(&normalized)?, slope)?;
            skips.push(normalized);
            features.push(h.clone());
        }
        Ok(EncoderState {
            input: x.clone(),
            skips,
            features,
            bottleneck: h,
        })
    }

    /// Upsamples the bottleneck back to input resolution; output in `[0, 1]`.
    pub fn decode(&self, state: &EncoderState) -> Result<Tensor> {
        let n = self.config.n_levels;
        if state.skips.len() != n {
            return Err(Error::Contract(format!(
                "decoder expects {n} skip tensors, state has {}",
                state.skips.len()
            )));
        }
        let slope = self.config.leaky_slope;
        let mut h = state.bottleneck.clone();
        let mut level = n;
        for block in &self.blocks {
            for up in &block.ups {
                let y = leaky_relu(&pixel_shuffle(&up.forward(&h)?, 2)?, slope)?;
                let skip = &state.skips[level - 1];
                if skip.dims() != y.dims() {
                    return Err(Error::ShapeMismatch {
                        op: "decoder_forward",
                        lhs: y.dims().to_vec(),
                        rhs: skip.dims().to_vec(),
                    });
                }
                h = (y + skip)?;
                level -= 1;
            }
            let r = leaky_relu(&block.refine_a.forward(&h)?, slope)?;
            let r = block.refine_b.forward(&r)?;
            h = leaky_relu(&(h + r)?, slope)?;
        }
        let joined = Tensor::cat(&[&h, &state.input], 1)?;
        sigmoid(&self.head.forward(&joined)?)
    }

    /// Full sRGB → RAW reconstruction.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let stem = self.stem_features(x)?;
        let latent = self.style.forward(&self.gram(&stem)?)?;
        let codes = self.heads.forward_all(&latent)?;
        let state = self.encode_stem(x, &stem, &codes)?;
        self.decode(&state)
    }
}
