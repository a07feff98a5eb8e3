//! Analysis, synthesis, hyper-analysis and hyper-synthesis maps.
//!
//! The analysis map is a chain of stride-2 5x5 convolutions, one per factor of two in
//! `downsample_factor_y`; synthesis mirrors it with 4x4 stride-2 transposed
//! convolutions and clamps to `[0, 1]`. The hyper maps bridge the remaining
//! `downsample_factor_z / downsample_factor_y` ratio. All four take and return
//! `[N, C, H, W]` batches.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Collection, Conv, ConvSpec, ConvStack, Init, ParamStore};
use crate::ops;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TransformConfig {
    pub latent_channels: usize,
    pub hyper_channels: usize,
    pub base_width: usize,
    #[serde(default = "default_factor_y")]
    pub downsample_factor_y: usize,
    #[serde(default = "default_factor_z")]
    pub downsample_factor_z: usize,
}

fn default_factor_y() -> usize {
    16
}

fn default_factor_z() -> usize {
    64
}

impl Default for TransformConfig {
    fn default() -> Self {
        Self {
            latent_channels: 32,
            hyper_channels: 16,
            base_width: 32,
            downsample_factor_y: 16,
            downsample_factor_z: 64,
        }
    }
}

impl TransformConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_channels == 0 || self.hyper_channels == 0 || self.base_width == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if !self.downsample_factor_y.is_power_of_two() || self.downsample_factor_y < 2 {
            return Err(Error::Config(
                "downsample_factor_y must be a power of two >= 2".into(),
            ));
        }
        if self.downsample_factor_z % self.downsample_factor_y != 0
            || !(self.downsample_factor_z / self.downsample_factor_y).is_power_of_two()
        {
            return Err(Error::Config(
                "downsample_factor_z must be a power-of-two multiple of downsample_factor_y".into(),
            ));
        }
        Ok(())
    }

    pub fn analysis_stages(&self) -> usize {
        self.downsample_factor_y.trailing_zeros() as usize
    }

    pub fn hyper_stages(&self) -> usize {
        (self.downsample_factor_z / self.downsample_factor_y).trailing_zeros() as usize
    }

    /// Images are padded to a multiple of this before analysis.
    pub fn padding_multiple(&self) -> usize {
        self.downsample_factor_z
    }

    /// Channels of the hyper-synthesis output: a mean and a scale feature per latent channel.
    pub fn context_channels(&self) -> usize {
        2 * self.latent_channels
    }
}

#[derive(Debug, Clone)]
pub struct Transforms {
    config: TransformConfig,
    analysis: ConvStack,
    synthesis: ConvStack,
    hyper_analysis: ConvStack,
    hyper_synthesis: ConvStack,
}

impl Transforms {
    /// Builds all four maps, registering analysis/hyper-analysis under the encoder
    /// collection, synthesis under the decoder and hyper-synthesis under the entropy model.
    pub fn new(config: &TransformConfig, store: &mut ParamStore, init: &mut Init) -> Result<Self> {
        config.validate()?;
        let n = config.base_width;
        let cy = config.latent_channels;
        let cz = config.hyper_channels;
        let gain = 1.7;

        let stages = config.analysis_stages();
        let mut layers = Vec::with_capacity(stages);
        for i in 0..stages {
            let inp = if i == 0 { 3 } else { n };
            let out = if i + 1 == stages { cy } else { n };
            layers.push(Conv::trainable(
                store,
                Collection::Encoder,
                &format!("analysis.{i}"),
                ConvSpec::down(inp, out, 5, 2),
                init,
                gain,
                0.0,
            )?);
        }
        let analysis = ConvStack::new(layers);

        let mut layers = Vec::with_capacity(stages);
        for i in 0..stages {
            let inp = if i == 0 { cy } else { n };
            let out = if i + 1 == stages { 3 } else { n };
            let last = i + 1 == stages;
            layers.push(Conv::trainable(
                store,
                Collection::Decoder,
                &format!("synthesis.{i}"),
                ConvSpec::up2(inp, out),
                init,
                if last { 0.3 } else { gain },
                if last { 0.5 } else { 0.0 },
            )?);
        }
        let synthesis = ConvStack::new(layers);

        let hs = config.hyper_stages();
        let mut layers = Vec::new();
        if hs == 0 {
            layers.push(Conv::trainable(
                store,
                Collection::Encoder,
                "hyper_analysis.0",
                ConvSpec::down(cy, cz, 3, 1),
                init,
                gain,
                0.0,
            )?);
        } else {
            layers.push(Conv::trainable(
                store,
                Collection::Encoder,
                "hyper_analysis.0",
                ConvSpec::down(cy, n, 3, 1),
                init,
                gain,
                0.0,
            )?);
            for i in 0..hs {
                let out = if i + 1 == hs { cz } else { n };
                layers.push(Conv::trainable(
                    store,
                    Collection::Encoder,
                    &format!("hyper_analysis.{}", i + 1),
                    ConvSpec::down(n, out, 5, 2),
                    init,
                    gain,
                    0.0,
                )?);
            }
        }
        let hyper_analysis = ConvStack::new(layers);

        let ctx = config.context_channels();
        let mut layers = Vec::new();
        if hs == 0 {
            layers.push(Conv::trainable(
                store,
                Collection::Entropy,
                "hyper_synthesis.0",
                ConvSpec::down(cz, n, 3, 1),
                init,
                gain,
                0.0,
            )?);
        } else {
            for i in 0..hs {
                let inp = if i == 0 { cz } else { n };
                layers.push(Conv::trainable(
                    store,
                    Collection::Entropy,
                    &format!("hyper_synthesis.{i}"),
                    ConvSpec::up2(inp, n),
                    init,
                    gain,
                    0.0,
                )?);
            }
        }
        layers.push(Conv::trainable(
            store,
            Collection::Entropy,
            &format!("hyper_synthesis.{}", hs.max(1)),
            ConvSpec::down(n, ctx, 3, 1),
            init,
            1.0,
            0.0,
        )?);
        let hyper_synthesis = ConvStack::new(layers);

        Ok(Self {
            config: config.clone(),
            analysis,
            synthesis,
            hyper_analysis,
            hyper_synthesis,
        })
    }

    pub fn config(&self) -> &TransformConfig {
        &self.config
    }

    /// `[N, 3, H, W] -> [N, C_y, H/f_y, W/f_y]`. Input dims must be multiples of `f_y`.
    pub fn analyze(&self, x: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = x.dims4()?;
        let f = self.config.downsample_factor_y;
        if c != 3 || h % f != 0 || w % f != 0 || h == 0 || w == 0 {
            return Err(Error::shape(format!(
                "analysis input must be [N, 3, k*{f}, k*{f}], got {:?}",
                x.dims()
            )));
        }
        ops::ensure_finite(x, "analysis input")?;
        self.analysis.forward(x)
    }

    /// `[N, C_y, h, w] -> [N, 3, h*f_y, w*f_y]`, clamped to `[0, 1]`.
    pub fn synthesize(&self, y_hat: &Tensor) -> Result<Tensor> {
        self.check_latent(y_hat)?;
        Ok(self.synthesis.forward(y_hat)?.clamp(0.0, 1.0)?)
    }

    pub fn hyper_analyze(&self, y: &Tensor) -> Result<Tensor> {
        self.check_latent(y)?;
        let (_, _, h, w) = y.dims4()?;
        let r = self.config.downsample_factor_z / self.config.downsample_factor_y;
        if h % r != 0 || w % r != 0 {
            return Err(Error::shape(format!(
                "latent dims {h}x{w} not divisible by hyper ratio {r}"
            )));
        }
        self.hyper_analysis.forward(y)
    }

    /// `[N, C_z, h', w'] -> [N, 2 C_y, h' r, w' r]` context features aligned with `y`.
    pub fn hyper_synthesize(&self, z_hat: &Tensor) -> Result<Tensor> {
        let (_, c, _, _) = z_hat.dims4()?;
        if c != self.config.hyper_channels {
            return Err(Error::shape(format!(
                "hyper latent has {c} channels, expected {}",
                self.config.hyper_channels
            )));
        }
        self.hyper_synthesis.forward(z_hat)
    }

    fn check_latent(&self, y: &Tensor) -> Result<()> {
        let (_, c, _, _) = y.dims4()?;
        if c != self.config.latent_channels {
            return Err(Error::shape(format!(
                "latent has {c} channels, expected {}",
                self.config.latent_channels
            )));
        }
        Ok(())
    }
}
