//! Distortion terms, the rate-target switch and the rate–distortion objective.
//!
//! All image-level functions take `[N, C, H, W]` batches and return scalar tensors so
//! they can sit inside an autograd graph.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Conv, ConvSpec, Init};
use crate::ops;

/// Weights of the reconstruction, perceptual, style and adversarial terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistortionWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub delta: f64,
}

impl Default for DistortionWeights {
    fn default() -> Self {
        Self {
            alpha: 10.0,
            beta: 1.0,
            gamma: 80.0,
            delta: 0.008,
        }
    }
}

impl DistortionWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.alpha, self.beta, self.gamma, self.delta];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config(format!(
                "distortion weights must be finite and non-negative: {self:?}"
            )));
        }
        Ok(())
    }

    pub fn without_adversarial(self) -> Self {
        Self { delta: 0.0, ..self }
    }
}

/// Rate target `tau` (bits per pixel) and the two multipliers it switches between.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateTargetConfig {
    pub tau: f64,
    pub lambda_a: f64,
    pub lambda_b: f64,
}

impl Default for RateTargetConfig {
    fn default() -> Self {
        Self {
            tau: 0.15,
            lambda_a: 1.0,
            lambda_b: 128.0,
        }
    }
}

impl RateTargetConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_a > 0.0 && self.lambda_b > self.lambda_a) || !(self.tau >= 0.0) {
            return Err(Error::Config(format!(
                "rate target needs tau >= 0 and lambda_b > lambda_a > 0: {self:?}"
            )));
        }
        Ok(())
    }

    pub fn with_tau(self, tau: f64) -> Self {
        Self { tau, ..self }
    }
}

/// `lambda_a` while the hard-quantized rate is at or under target, `lambda_b` above it.
pub fn lambda_select(rate_quantized_bpp: f64, cfg: &RateTargetConfig) -> f64 {
    if rate_quantized_bpp <= cfg.tau {
        cfg.lambda_a
    } else {
        cfg.lambda_b
    }
}

/// `lambda * R + D` with lambda chosen from `R*`; no gradient flows through the choice.
pub fn rd_loss(
    rate_noised_bpp: &Tensor,
    rate_quantized_bpp: f64,
    distortion: &Tensor,
    cfg: &RateTargetConfig,
) -> Result<Tensor> {
    let lambda = lambda_select(rate_quantized_bpp, cfg);
    Ok(((rate_noised_bpp * lambda)? + distortion)?)
}

/// Frozen map from images to feature pyramids.
pub trait FeatureExtractor: Send + Sync {
    fn features(&self, x: &Tensor) -> Result<Vec<Tensor>>;
}

/// Returns the image itself as its only feature map.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityExtractor;

impl FeatureExtractor for IdentityExtractor {
    fn features(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        Ok(vec![x.clone()])
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PyramidConfig {
    pub seed: u64,
    pub widths: Vec<usize>,
}

impl Default for PyramidConfig {
    fn default() -> Self {
        Self {
            seed: 0x5eed,
            widths: vec![8, 16, 24, 32, 32],
        }
    }
}

/// Fixed, seed-initialized stack of 3x3 convolutions; the first stage keeps full
/// resolution and every later stage halves it.
#[derive(Debug, Clone)]
pub struct ConvPyramid {
    stages: Vec<Conv>,
}

impl ConvPyramid {
    pub fn new(config: &PyramidConfig) -> Result<Self> {
        let mut init = Init::new(config.seed);
        let mut stages = Vec::with_capacity(config.widths.len());
        let mut inp = 3;
        for (i, &w) in config.widths.iter().enumerate() {
            let stride = if i == 0 { 1 } else { 2 };
            stages.push(Conv::frozen(
                ConvSpec::down(inp, w, 3, stride),
                &mut init,
                1.7,
            )?);
            inp = w;
        }
        Ok(Self { stages })
    }

    /// Cumulative stride of stage `depth`.
    pub fn stride(&self, depth: usize) -> usize {
        1 << depth
    }
}

impl FeatureExtractor for ConvPyramid {
    /// Stage activations, each scaled to unit length along the channel axis.
    fn features(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut h = x.affine(2.0, -1.0)?;
        let mut out = Vec::with_capacity(self.stages.len());
        for s in &self.stages {
            h = s.forward(&h)?.silu()?;
            let norm = h.sqr()?.sum_keepdim(1)?.affine(1.0, 1e-10)?.sqrt()?;
            out.push(h.broadcast_div(&norm)?);
        }
        Ok(out)
    }
}

/// Loss hyper-parameters that are not weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub charbonnier_eps: f64,
    pub style_patch: usize,
    /// Extractor depths for the perceptual term; empty (or none available) means all.
    pub perceptual_depths: Vec<usize>,
    /// Extractor depths for the style term; empty (or none available) means all.
    pub style_depths: Vec<usize>,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            charbonnier_eps: 1e-3,
            style_patch: 16,
            perceptual_depths: vec![],
            style_depths: vec![0, 1, 2],
        }
    }
}

fn check_same(x: &Tensor, y: &Tensor) -> Result<()> {
    if x.dims() != y.dims() {
        return Err(Error::shape(format!(
            "loss inputs differ: {:?} vs {:?}",
            x.dims(),
            y.dims()
        )));
    }
    Ok(())
}

/// Elementwise `sqrt((x - y)^2 + eps^2)`.
pub fn charbonnier_map(x: &Tensor, x_hat: &Tensor, eps: f64) -> Result<Tensor> {
    check_same(x, x_hat)?;
    if !(eps > 0.0) {
        return Err(Error::invalid("charbonnier epsilon must be positive"));
    }
    Ok((x - x_hat)?.sqr()?.affine(1.0, eps * eps)?.sqrt()?)
}

pub fn charbonnier(x: &Tensor, x_hat: &Tensor, eps: f64) -> Result<Tensor> {
    Ok(charbonnier_map(x, x_hat, eps)?.mean_all()?)
}

/// Mean squared feature difference, averaged over the given feature maps.
pub fn perceptual_from_features(fx: &[Tensor], fy: &[Tensor]) -> Result<Tensor> {
    if fx.len() != fy.len() || fx.is_empty() {
        return Err(Error::shape("feature lists differ in length or are empty"));
    }
    let mut total = Tensor::new(0.0f64, &ops::DEVICE)?;
    for (a, b) in fx.iter().zip(fy) {
        check_same(a, b)?;
        total = (total + (a - b)?.sqr()?.mean_all()?)?;
    }
    Ok((total / fx.len() as f64)?)
}

pub fn perceptual(x: &Tensor, x_hat: &Tensor, extractor: &dyn FeatureExtractor) -> Result<Tensor> {
    check_same(x, x_hat)?;
    perceptual_from_features(&extractor.features(x)?, &extractor.features(x_hat)?)
}

/// Gram matrices `F F^T / P^2` of non-overlapping `P x P` spatial patches.
///
/// `[N, C, H, W]` is reflect-padded to multiples of `P` and yields `[N * patches, C, C]`.
pub fn patch_grams(features: &Tensor, patch: usize) -> Result<Tensor> {
    if patch == 0 {
        return Err(Error::invalid("patch size must be positive"));
    }
    let f = ops::reflect_pad_to_multiple(features, patch)?;
    let (n, c, h, w) = f.dims4()?;
    let (ph, pw) = (h / patch, w / patch);
    let tiles = f
        .reshape(vec![n, c, ph, patch, pw, patch])?
        .permute(vec![0, 2, 4, 1, 3, 5])?
        .contiguous()?
        .reshape((n * ph * pw, c, patch * patch))?;
    let gram = tiles.matmul(&tiles.transpose(1, 2)?.contiguous()?)?;
    Ok((gram / (patch * patch) as f64)?)
}

/// Squared Frobenius distance between patch Grams, averaged over patches and maps.
pub fn style_from_features(fx: &[Tensor], fy: &[Tensor], patch: usize) -> Result<Tensor> {
    if fx.len() != fy.len() || fx.is_empty() {
        return Err(Error::shape("feature lists differ in length or are empty"));
    }
    let mut total = Tensor::new(0.0f64, &ops::DEVICE)?;
    for (a, b) in fx.iter().zip(fy) {
        check_same(a, b)?;
        let ga = patch_grams(a, patch)?;
        let gb = patch_grams(b, patch)?;
        let patches = ga.dims()[0] as f64;
        total = (total + ((ga - gb)?.sqr()?.sum_all()? / patches)?)?;
    }
    Ok((total / fx.len() as f64)?)
}

pub fn style(
    x: &Tensor,
    x_hat: &Tensor,
    extractor: &dyn FeatureExtractor,
    patch: usize,
) -> Result<Tensor> {
    check_same(x, x_hat)?;
    style_from_features(&extractor.features(x)?, &extractor.features(x_hat)?, patch)
}

/// The maps at `depths` that the extractor provides; all maps if none match.
fn select(features: &[Tensor], depths: &[usize]) -> Vec<Tensor> {
    let picked: Vec<Tensor> = depths
        .iter()
        .filter_map(|&d| features.get(d).cloned())
        .collect();
    if picked.is_empty() {
        features.to_vec()
    } else {
        picked
    }
}

/// The three image-comparison terms (plus an optional adversarial value).
#[derive(Debug, Clone)]
pub struct DistortionTerms {
    pub rec: Tensor,
    pub per: Tensor,
    pub style: Tensor,
    pub adv: Option<Tensor>,
}

impl DistortionTerms {
    /// Runs the extractor once per image and derives perceptual and style from it.
    pub fn compute(
        x: &Tensor,
        x_hat: &Tensor,
        extractor: &dyn FeatureExtractor,
        cfg: &LossConfig,
    ) -> Result<Self> {
        let fx = extractor.features(x)?;
        let fy = extractor.features(x_hat)?;
        Self::from_features(x, x_hat, &fx, &fy, cfg)
    }

    pub fn from_features(
        x: &Tensor,
        x_hat: &Tensor,
        fx: &[Tensor],
        fy: &[Tensor],
        cfg: &LossConfig,
    ) -> Result<Self> {
        let rec = charbonnier(x, x_hat, cfg.charbonnier_eps)?;
        let per = perceptual_from_features(
            &select(fx, &cfg.perceptual_depths),
            &select(fy, &cfg.perceptual_depths),
        )?;
        let style = style_from_features(
            &select(fx, &cfg.style_depths),
            &select(fy, &cfg.style_depths),
            cfg.style_patch,
        )?;
        Ok(Self {
            rec,
            per,
            style,
            adv: None,
        })
    }

    pub fn with_adversarial(self, adv: Tensor) -> Self {
        Self {
            adv: Some(adv),
            ..self
        }
    }

    /// Plain values `(rec, per, style, adv)` for logging.
    pub fn values(&self) -> Result<[f64; 4]> {
        Ok([
            ops::scalar(&self.rec)?,
            ops::scalar(&self.per)?,
            ops::scalar(&self.style)?,
            match &self.adv {
                Some(a) => ops::scalar(a)?,
                None => 0.0,
            },
        ])
    }
}

/// `alpha rec + beta per + gamma style + delta adv`; a missing `adv` counts as zero.
pub fn ensemble(terms: &DistortionTerms, weights: &DistortionWeights) -> Result<Tensor> {
    weights.validate()?;
    let mut d = ((&terms.rec * weights.alpha)? + (&terms.per * weights.beta)?)?;
    d = (d + (&terms.style * weights.gamma)?)?;
    if let Some(adv) = &terms.adv {
        d = (d + (adv * weights.delta)?)?;
    }
    Ok(d)
}

pub fn ensemble_distortion(
    x: &Tensor,
    x_hat: &Tensor,
    weights: &DistortionWeights,
    extractor: &dyn FeatureExtractor,
    cfg: &LossConfig,
    adv_term: Option<&Tensor>,
) -> Result<Tensor> {
    weights.validate()?;
    let mut terms = DistortionTerms::compute(x, x_hat, extractor, cfg)?;
    terms.adv = adv_term.cloned();
    ensemble(&terms, weights)
}
