//! Grouped autoregressive density for `y` and a factorized learned density for `z`.
//!
//! The latent channels are split into contiguous groups. Group `g` is modelled as a
//! Gaussian convolved with a unit-width uniform, whose mean and scale are predicted
//! from the hyper context features and the already-dequantized groups `0..g`.
//! Rates come in two flavours: a differentiable one on uniformly-noised latents (R),
//! and the exact code length of mean-centred hard symbols under the integer tables
//! the coder uses (R*).

mod hyper;
pub mod table;

use std::ops::Range;

use candle_core::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use hyper::HyperDensity;
pub use table::{CdfTable, Coded, EscapeTable};

use crate::error::{Error, Result};
use crate::nn::{Collection, Conv, ConvSpec, ConvStack, Init, ParamStore};
use crate::ops::{self, softplus};

/// Lower bound on every predicted scale.
pub const SCALE_FLOOR: f64 = 0.11;
/// Floor on bin probabilities inside differentiable rates.
pub const LIKELIHOOD_FLOOR: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EntropyConfig {
    pub num_groups: usize,
    pub predictor_width: usize,
    /// Hidden widths of the per-channel monotone CDF network for `z`.
    pub hyper_filters: Vec<usize>,
}

impl Default for EntropyConfig {
    fn default() -> Self {
        Self {
            num_groups: 10,
            predictor_width: 32,
            hyper_filters: vec![3, 3, 3],
        }
    }
}

/// Contiguous, ordered, exhaustive channel ranges.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupSpec {
    ranges: Vec<Range<usize>>,
}

impl GroupSpec {
    pub fn new(ranges: Vec<Range<usize>>) -> Result<Self> {
        if ranges.is_empty() {
            return Err(Error::Config("at least one group is required".into()));
        }
        let mut next = 0;
        for r in &ranges {
            if r.start != next || r.end <= r.start {
                return Err(Error::Config(format!(
                    "group ranges must be contiguous and non-empty, got {ranges:?}"
                )));
            }
            next = r.end;
        }
        Ok(Self { ranges })
    }

    /// `channels` split into `groups` ranges, remainder going to the earliest groups.
    pub fn near_equal(channels: usize, groups: usize) -> Result<Self> {
        if groups == 0 || groups > channels {
            return Err(Error::Config(format!(
                "cannot split {channels} channels into {groups} groups"
            )));
        }
        let base = channels / groups;
        let extra = channels % groups;
        let mut start = 0;
        let ranges = (0..groups)
            .map(|g| {
                let len = base + usize::from(g < extra);
                let r = start..start + len;
                start += len;
                r
            })
            .collect();
        Self::new(ranges)
    }

    pub fn num_groups(&self) -> usize {
        self.ranges.len()
    }

    pub fn ranges(&self) -> &[Range<usize>] {
        &self.ranges
    }

    pub fn channels(&self) -> usize {
        self.ranges.last().map(|r| r.end).unwrap_or(0)
    }

    /// Splits the channel axis (dim 1) of `[N, C, H, W]`.
    pub fn split(&self, y: &Tensor) -> Result<Vec<Tensor>> {
        let (_, c, _, _) = y.dims4()?;
        if c != self.channels() {
            return Err(Error::shape(format!(
                "group spec covers {} channels, tensor has {c}",
                self.channels()
            )));
        }
        self.ranges
            .iter()
            .map(|r| Ok(y.narrow(1, r.start, r.len())?))
            .collect()
    }

    pub fn concat(&self, groups: &[Tensor]) -> Result<Tensor> {
        if groups.len() != self.num_groups() {
            return Err(Error::shape("wrong number of groups to concatenate"));
        }
        Ok(Tensor::cat(groups, 1)?)
    }
}

/// Mean and (floored) scale conditioning one group.
#[derive(Debug, Clone)]
pub struct GaussianParams {
    pub mean: Tensor,
    pub scale: Tensor,
}

#[derive(Debug, Clone)]
struct GroupPredictor {
    net: ConvStack,
    channels: usize,
}

/// Conditional density parameters for `y`, plus the hyper density for `z`.
#[derive(Debug, Clone)]
pub struct EntropyModel {
    groups: GroupSpec,
    context_channels: usize,
    predictors: Vec<GroupPredictor>,
    hyper: HyperDensity,
}

impl EntropyModel {
    pub fn new(
        config: &EntropyConfig,
        latent_channels: usize,
        hyper_channels: usize,
        context_channels: usize,
        store: &mut ParamStore,
        init: &mut Init,
    ) -> Result<Self> {
        let groups = GroupSpec::near_equal(latent_channels, config.num_groups)?;
        let w = config.predictor_width;
        let mut predictors = Vec::with_capacity(groups.num_groups());
        for (g, range) in groups.ranges().iter().enumerate() {
            let inp = context_channels + range.start;
            let c = range.len();
            let net = ConvStack::new(vec![
                Conv::trainable(
                    store,
                    Collection::Entropy,
                    &format!("context.{g}.0"),
                    ConvSpec::down(inp, w, 3, 1),
                    init,
                    1.7,
                    0.0,
                )?,
                Conv::trainable(
                    store,
                    Collection::Entropy,
                    &format!("context.{g}.1"),
                    ConvSpec::down(w, 2 * c, 3, 1),
                    init,
                    0.5,
                    0.0,
                )?,
            ]);
            predictors.push(GroupPredictor { net, channels: c });
        }
        let hyper = HyperDensity::new(hyper_channels, &config.hyper_filters, store, init)?;
        Ok(Self {
            groups,
            context_channels,
            predictors,
            hyper,
        })
    }

    pub fn groups(&self) -> &GroupSpec {
        &self.groups
    }

    pub fn hyper(&self) -> &HyperDensity {
        &self.hyper
    }

    /// Mean/scale for group `group_index` from the context and exactly the groups before it.
    pub fn predict_params(
        &self,
        group_index: usize,
        context: &Tensor,
        previous: &[Tensor],
    ) -> Result<GaussianParams> {
        let pred = self
            .predictors
            .get(group_index)
            .ok_or_else(|| Error::invalid(format!("no group {group_index}")))?;
        if previous.len() != group_index {
            return Err(Error::invalid(format!(
                "group {group_index} needs exactly {group_index} decoded groups, got {}",
                previous.len()
            )));
        }
        let (n, cc, h, w) = context.dims4()?;
        if cc != self.context_channels {
            return Err(Error::shape(format!(
                "context has {cc} channels, expected {}",
                self.context_channels
            )));
        }
        for (j, p) in previous.iter().enumerate() {
            let expect = [n, self.groups.ranges()[j].len(), h, w];
            if p.dims() != expect {
                return Err(Error::invalid(format!(
                    "group {j} supplied with shape {:?}, expected {expect:?}",
                    p.dims()
                )));
            }
        }
        let input = if previous.is_empty() {
            context.clone()
        } else {
            let mut parts = Vec::with_capacity(previous.len() + 1);
            parts.push(context.clone());
            parts.extend(previous.iter().cloned());
            Tensor::cat(&parts, 1)?
        };
        let out = pred.net.forward(&input)?;
        let c = pred.channels;
        let mean = out.narrow(1, 0, c)?;
        let scale = softplus(&out.narrow(1, c, c)?)?.affine(1.0, SCALE_FLOOR)?;
        Ok(GaussianParams { mean, scale })
    }
}

/// Probability of the unit bin around `residual` under `N(0, scale^2)`, elementwise.
///
/// Evaluated on `|residual|` so the upper tail never cancels; floored at
/// [`LIKELIHOOD_FLOOR`].
pub fn gaussian_likelihood(residual: &Tensor, scale: &Tensor) -> Result<Tensor> {
    let v = residual.abs()?;
    let k = std::f64::consts::FRAC_1_SQRT_2;
    let upper = ((v.affine(-1.0, 0.5)? / scale)? * k)?.erf()?;
    let lower = ((v.affine(-1.0, -0.5)? / scale)? * k)?.erf()?;
    let mass = ((upper - lower)? * 0.5)?;
    Ok(mass.maximum(LIKELIHOOD_FLOOR)?)
}

/// `-sum log2 p` of a likelihood tensor, as a scalar tensor.
pub fn bits_of(likelihood: &Tensor) -> Result<Tensor> {
    Ok((likelihood.log()?.sum_all()? * (-std::f64::consts::LOG2_E))?)
}

/// Differentiable rate of `y` perturbed by uniform noise, in bits.
pub fn rate_noised<R: Rng>(
    y: &Tensor,
    params: &[GaussianParams],
    spec: &GroupSpec,
    rng: &mut R,
) -> Result<Tensor> {
    let groups = spec.split(y)?;
    if groups.len() != params.len() {
        return Err(Error::shape("one GaussianParams per group is required"));
    }
    let mut total = Tensor::new(0.0f64, &ops::DEVICE)?;
    for (g, p) in groups.iter().zip(params) {
        let noise = ops::uniform_like(g, -0.5, 0.5, rng)?;
        let residual = ((g + noise)? - &p.mean)?;
        total = (total + bits_of(&gaussian_likelihood(&residual, &p.scale)?)?)?;
    }
    Ok(total)
}

/// Mean-centred hard symbols `round(y - mean)`.
pub fn quantize_symbols(values: &[f64], means: &[f64]) -> Vec<i32> {
    values
        .iter()
        .zip(means)
        .map(|(v, m)| {
            let s = (v - m).round();
            s.clamp(i32::MIN as f64 + 1.0, i32::MAX as f64 - 1.0) as i32
        })
        .collect()
}

/// Exact code length, in bits, of the mean-centred symbols of `y` under the coder's tables.
pub fn rate_quantized(y: &Tensor, params: &[GaussianParams], spec: &GroupSpec) -> Result<f64> {
    let groups = spec.split(y)?;
    if groups.len() != params.len() {
        return Err(Error::shape("one GaussianParams per group is required"));
    }
    let mut bits = 0.0;
    for (g, p) in groups.iter().zip(params) {
        let values = ops::to_vec(g)?;
        let means = ops::to_vec(&p.mean)?;
        let scales = ops::to_vec(&p.scale)?;
        if !values
            .iter()
            .chain(&means)
            .chain(&scales)
            .all(|v| v.is_finite())
        {
            return Err(Error::NonFinite("latents or entropy parameters"));
        }
        for (s, sigma) in quantize_symbols(&values, &means).into_iter().zip(scales) {
            bits += table::gaussian_table(sigma)?.value_codelength(s);
        }
    }
    Ok(bits)
}

/// Rate accounting for one compressed image.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RateReport {
    /// Exact coder bits of all latents, `hyper_bits + sum(per_group_bits)`.
    pub rate_quantized_bits: f64,
    pub per_group_bits: Vec<f64>,
    pub hyper_bits: f64,
    /// Padded pixel count the rates are normalized by.
    pub pixels: usize,
}

impl RateReport {
    pub fn new(per_group_bits: Vec<f64>, hyper_bits: f64, pixels: usize) -> Self {
        Self {
            rate_quantized_bits: hyper_bits + per_group_bits.iter().sum::<f64>(),
            per_group_bits,
            hyper_bits,
            pixels,
        }
    }

    pub fn latent_bits(&self) -> f64 {
        self.per_group_bits.iter().sum()
    }

    pub fn bpp(&self) -> f64 {
        self.rate_quantized_bits / self.pixels.max(1) as f64
    }

    pub fn check(&self) -> Result<()> {
        let parts = self.latent_bits() + self.hyper_bits;
        let ok = self.per_group_bits.iter().all(|b| *b >= 0.0)
            && self.hyper_bits >= 0.0
            && (parts - self.rate_quantized_bits).abs() <= 1e-6 * self.rate_quantized_bits.max(1.0);
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("inconsistent rate report {self:?}")))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::zeros_like_shape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(v: &[f64]) -> Tensor {
        ops::from_vec(v.to_vec(), &[1, v.len(), 1, 1]).unwrap()
    }

    #[test]
    fn near_equal_partition() {
        let spec = GroupSpec::near_equal(7, 3).unwrap();
        assert_eq!(spec.ranges(), &[0..3, 3..5, 5..7]);
        let spec = GroupSpec::near_equal(320, 10).unwrap();
        assert!(spec.ranges().iter().all(|r| r.len() == 32));
        assert!(GroupSpec::near_equal(3, 4).is_err());
        assert!(GroupSpec::new(vec![0..2, 3..4]).is_err());
    }

    #[test]
    fn split_concat_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let y = ops::uniform_like(
            &zeros_like_shape(&[2, 7, 3, 2]).unwrap(),
            -5.0,
            5.0,
            &mut rng,
        )
        .unwrap();
        let spec = GroupSpec::near_equal(7, 3).unwrap();
        let parts = spec.split(&y).unwrap();
        assert_eq!(parts[1].dims(), &[2, 2, 3, 2]);
        let back = spec.concat(&parts).unwrap();
        assert_eq!(ops::to_vec(&back).unwrap(), ops::to_vec(&y).unwrap());
        assert!(GroupSpec::near_equal(6, 3).unwrap().split(&y).is_err());
    }

    #[test]
    fn unit_scale_bin_is_1_3849_bits() {
        let like = gaussian_likelihood(&t(&[0.0]), &t(&[1.0])).unwrap();
        let bits = ops::scalar(&bits_of(&like).unwrap()).unwrap();
        // -log2(Phi(0.5) - Phi(-0.5))
        assert!((bits - 1.384_866_534_291).abs() < 1e-6, "{bits}");
    }

    #[test]
    fn vanishing_scale_concentrates_the_bin() {
        let like = gaussian_likelihood(&t(&[0.0]), &t(&[1e-6])).unwrap();
        assert!(ops::scalar(&bits_of(&like).unwrap()).unwrap() < 1e-9);
    }

    #[test]
    fn quantized_rate_matches_table_and_shifts() {
        let spec = GroupSpec::near_equal(2, 1).unwrap();
        let p = GaussianParams {
            mean: t(&[0.3, -1.2]),
            scale: t(&[1.0, 1.0]),
        };
        let bits = rate_quantized(&t(&[0.3, -1.2]), &[p.clone()], &spec).unwrap();
        let table = table::gaussian_table(1.0).unwrap();
        assert!((bits - 2.0 * table.value_codelength(0)).abs() < 1e-12);
        assert!((bits / 2.0 - 1.3849).abs() < 2e-3);
        let shifted = GaussianParams {
            mean: t(&[3.3, 1.8]),
            scale: t(&[1.0, 1.0]),
        };
        let b2 = rate_quantized(&t(&[3.3, 1.8]), &[shifted], &spec).unwrap();
        assert_eq!(bits, b2);
    }
}
