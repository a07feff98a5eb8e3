//! The full compression model: transforms plus entropy model, sharing one parameter store.

use candle_core::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::entropy_model::{
    self, bits_of, gaussian_likelihood, table, EntropyConfig, EntropyModel, EscapeTable,
    GaussianParams, SCALE_FLOOR,
};
use crate::error::{Error, Result};
use crate::nn::{Collection, Init, ParamStore};
use crate::ops;
use crate::transforms::{TransformConfig, Transforms};

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelConfig {
    pub transform: TransformConfig,
    #[serde(default)]
    pub entropy: EntropyConfig,
    #[serde(default)]
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            transform: TransformConfig::default(),
            entropy: EntropyConfig::default(),
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.transform.validate()?;
        if self.entropy.num_groups == 0 || self.entropy.num_groups > self.transform.latent_channels
        {
            return Err(Error::Config(format!(
                "num_groups must be in 1..={}",
                self.transform.latent_channels
            )));
        }
        if self.entropy.predictor_width == 0 {
            return Err(Error::Config("predictor_width must be positive".into()));
        }
        Ok(())
    }
}

/// Outputs of one training forward pass over a batch.
#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub x_hat: Tensor,
    /// Differentiable bits of the noised latents (groups plus hyper-latent).
    pub rate_noised_bits: Tensor,
    /// Exact coder bits of the hard-quantized latents.
    pub rate_quantized_bits: f64,
    pub pixels: usize,
}

impl TrainOutput {
    pub fn rate_noised_bpp(&self) -> Result<Tensor> {
        Ok((&self.rate_noised_bits / self.pixels as f64)?)
    }

    pub fn rate_quantized_bpp(&self) -> f64 {
        self.rate_quantized_bits / self.pixels as f64
    }
}

/// Unit-domain parameters of one group: `y / delta` is modelled by `N(mean, scale^2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupTables {
    pub group: usize,
    pub channels: std::ops::Range<usize>,
    pub means: Vec<f64>,
    pub scales: Vec<f64>,
}

impl GroupTables {
    pub fn table(&self, i: usize) -> Result<table::CdfTable> {
        table::gaussian_table(self.scales[i])
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    store: ParamStore,
    transforms: Transforms,
    entropy: EntropyModel,
}

impl Model {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut init = Init::new(config.seed);
        let transforms = Transforms::new(&config.transform, &mut store, &mut init)?;
        let t = &config.transform;
        let entropy = EntropyModel::new(
            &config.entropy,
            t.latent_channels,
            t.hyper_channels,
            t.context_channels(),
            &mut store,
            &mut init,
        )?;
        Ok(Self {
            config: config.clone(),
            store,
            transforms,
            entropy,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn transforms(&self) -> &Transforms {
        &self.transforms
    }

    pub fn entropy(&self) -> &EntropyModel {
        &self.entropy
    }

    pub fn latent_channels(&self) -> usize {
        self.config.transform.latent_channels
    }

    pub fn padding_multiple(&self) -> usize {
        self.config.transform.padding_multiple()
    }

    /// 64-bit digest of the configuration and every encoder, decoder and entropy parameter.
    pub fn fingerprint(&self) -> Result<u64> {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.config).map_err(|e| Error::invalid(e.to_string()))?);
        for c in [
            Collection::Encoder,
            Collection::Decoder,
            Collection::Entropy,
        ] {
            h.update(self.store.collection_hash(c)?);
        }
        let digest = h.finalize();
        Ok(u64::from_le_bytes(digest[..8].try_into().expect("8 bytes")))
    }

    /// Context features from a (rounded) hyper-latent.
    pub fn context(&self, z_hat: &Tensor) -> Result<Tensor> {
        self.transforms.hyper_synthesize(z_hat)
    }

    /// Training pass: noised rates, straight-through reconstructions and the exact `R*`.
    ///
    /// `x` is a padded `[N, 3, H, W]` batch.
    pub fn forward_train<R: Rng>(&self, x: &Tensor, rng: &mut R) -> Result<TrainOutput> {
        let (n, _, h, w) = x.dims4()?;
        let y = self.transforms.analyze(x)?;
        let z = self.transforms.hyper_analyze(&y)?;
        let hyper = self.entropy.hyper();
        let z_noisy = (&z + ops::uniform_like(&z, -0.5, 0.5, rng)?)?;
        let mut rate = bits_of(&hyper.likelihood(&z_noisy)?)?;
        let z_round = z.round()?.detach();
        let ctx = self.context(&ops::ste_round(&z)?)?;

        let spec = self.entropy.groups();
        let groups = spec.split(&y)?;
        let mut hats: Vec<Tensor> = Vec::with_capacity(groups.len());
        let mut params: Vec<GaussianParams> = Vec::with_capacity(groups.len());
        for (g, yg) in groups.iter().enumerate() {
            let p = self.entropy.predict_params(g, &ctx, &hats)?;
            let noisy = (yg + ops::uniform_like(yg, -0.5, 0.5, rng)?)?;
            let lik = gaussian_likelihood(&(noisy - &p.mean)?, &p.scale)?;
            rate = (rate + bits_of(&lik)?)?;
            hats.push((&p.mean + ops::ste_round(&(yg - &p.mean)?)?)?);
            params.push(GaussianParams {
                mean: p.mean.detach(),
                scale: p.scale.detach(),
            });
        }
        let y_hat = spec.concat(&hats)?;
        let x_hat = self.transforms.synthesize(&y_hat)?;
        let rq = entropy_model::rate_quantized(&y.detach(), &params, spec)?
            + hyper.rate_quantized(&z_round)?;
        Ok(TrainOutput {
            x_hat,
            rate_noised_bits: rate,
            rate_quantized_bits: rq,
            pixels: n * h * w,
        })
    }

    /// Runs the autoregressive group loop shared by the encoder, the decoder and every
    /// hard-quantized evaluation.
    ///
    /// For each group the unit-domain tables are handed to `symbols`, which returns the
    /// group's integer symbols (by quantizing or by decoding). The dequantized latent
    /// `delta_c * (mean + s)` feeds the next group and is returned in full at the end.
    pub fn group_loop<F>(&self, ctx: &Tensor, delta: &[f64], mut symbols: F) -> Result<Tensor>
    where
        F: FnMut(&GroupTables) -> Result<Vec<i32>>,
    {
        let (n, _, h, w) = ctx.dims4()?;
        if delta.len() != self.latent_channels() || delta.iter().any(|d| !(*d > 0.0)) {
            return Err(Error::invalid(format!(
                "need {} positive quantization steps",
                self.latent_channels()
            )));
        }
        let spec = self.entropy.groups();
        let mut hats: Vec<Tensor> = Vec::with_capacity(spec.num_groups());
        let plane = h * w;
        for (g, range) in spec.ranges().iter().enumerate() {
            let c = range.len();
            let p = self.entropy.predict_params(g, ctx, &hats)?;
            let mean = ops::to_vec(&p.mean)?;
            let scale = ops::to_vec(&p.scale)?;
            let step = |i: usize| delta[range.start + (i / plane) % c];
            let means: Vec<f64> = mean.iter().enumerate().map(|(i, m)| m / step(i)).collect();
            let scales: Vec<f64> = scale
                .iter()
                .enumerate()
                .map(|(i, s)| (s / step(i)).max(SCALE_FLOOR))
                .collect();
            let tables = GroupTables {
                group: g,
                channels: range.clone(),
                means,
                scales,
            };
            let s = symbols(&tables)?;
            if s.len() != tables.means.len() {
                return Err(Error::invalid(format!(
                    "group {g} produced {} symbols, expected {}",
                    s.len(),
                    tables.means.len()
                )));
            }
            let hat: Vec<f64> = s
                .iter()
                .enumerate()
                .map(|(i, &v)| step(i) * (tables.means[i] + v as f64))
                .collect();
            hats.push(ops::from_vec(hat, &[n, c, h, w])?);
        }
        spec.concat(&hats)
    }

    /// Hard-quantizes analysed latents with per-channel steps `delta`.
    pub fn quantize(&self, y: &Tensor, z: &Tensor, delta: &[f64]) -> Result<Quantized> {
        let z_symbols: Vec<i32> = ops::to_vec(z)?.iter().map(|v| round_symbol(*v)).collect();
        let z_hat = ops::from_vec(z_symbols.iter().map(|&s| s as f64).collect(), z.dims())?;
        let ctx = self.context(&z_hat)?;
        let spec = self.entropy.groups();
        let groups = spec.split(y)?;
        let values: Vec<Vec<f64>> = groups.iter().map(ops::to_vec).collect::<Result<_>>()?;
        let (_, _, h, w) = y.dims4()?;
        let plane = h * w;
        let mut group_symbols = Vec::with_capacity(groups.len());
        let mut group_bits = Vec::with_capacity(groups.len());
        let y_hat = self.group_loop(&ctx, delta, |t| {
            let c = t.channels.len();
            let vals = &values[t.group];
            let mut s = Vec::with_capacity(vals.len());
            let mut bits = 0.0;
            for (i, v) in vals.iter().enumerate() {
                let d = delta[t.channels.start + (i / plane) % c];
                let sym = round_symbol(v / d - t.means[i]);
                bits += t.table(i)?.value_codelength(sym);
                s.push(sym);
            }
            group_symbols.push(s.clone());
            group_bits.push(bits);
            Ok(s)
        })?;
        let hyper_bits = self.entropy.hyper().rate_quantized(&z_hat)?;
        Ok(Quantized {
            z_symbols,
            z_hat,
            group_symbols,
            group_bits,
            hyper_bits,
            y_hat,
        })
    }

    /// `analyze` + `hyper_analyze` on a padded batch.
    pub fn encode_latents(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let y = self.transforms.analyze(x)?;
        let z = self.transforms.hyper_analyze(&y)?;
        Ok((y, z))
    }

    /// Amortized hard evaluation (`delta = 1`): reconstruction and exact bits.
    pub fn evaluate(&self, x: &Tensor) -> Result<(Tensor, Quantized)> {
        let (y, z) = self.encode_latents(x)?;
        let q = self.quantize(&y, &z, &vec![1.0; self.latent_channels()])?;
        let x_hat = self.transforms.synthesize(&q.y_hat)?;
        Ok((x_hat, q))
    }
}

/// Rounds to the nearest integer symbol, saturating far outside the `i32` range.
pub fn round_symbol(v: f64) -> i32 {
    if v.is_nan() {
        return 0;
    }
    v.round().clamp(-(1 << 30) as f64, (1 << 30) as f64) as i32
}

/// Hard-quantized latents and their exact code lengths.
#[derive(Debug, Clone)]
pub struct Quantized {
    pub z_symbols: Vec<i32>,
    pub z_hat: Tensor,
    pub group_symbols: Vec<Vec<i32>>,
    pub group_bits: Vec<f64>,
    pub hyper_bits: f64,
    pub y_hat: Tensor,
}

impl Quantized {
    pub fn total_bits(&self) -> f64 {
        self.hyper_bits + self.group_bits.iter().sum::<f64>()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::zeros_like_shape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn toy_config(seed: u64) -> ModelConfig {
        ModelConfig {
            transform: TransformConfig {
                latent_channels: 8,
                hyper_channels: 4,
                base_width: 8,
                downsample_factor_y: 4,
                downsample_factor_z: 8,
            },
            entropy: EntropyConfig {
                num_groups: 3,
                predictor_width: 8,
                hyper_filters: vec![3],
            },
            seed,
        }
    }

    fn image(seed: u64) -> Tensor {
        crate::synthetic::image(16, 16, seed)
            .unwrap()
            .image
            .batch()
            .unwrap()
    }

    #[test]
    fn train_forward_shapes_and_rates() {
        let m = Model::new(&toy_config(1)).unwrap();
        let x = Tensor::cat(&[image(1), image(2)], 0).unwrap();
        let out = m
            .forward_train(&x, &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap();
        assert_eq!(out.x_hat.dims(), &[2, 3, 16, 16]);
        assert_eq!(out.pixels, 512);
        assert!(ops::scalar(&out.rate_noised_bits).unwrap() > 0.0);
        assert!(out.rate_quantized_bits > 0.0);
    }

    #[test]
    fn quantized_bits_match_the_training_estimate_of_r_star() {
        let m = Model::new(&toy_config(2)).unwrap();
        let x = image(3);
        let out = m
            .forward_train(&x, &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap();
        let (_, q) = m.evaluate(&x).unwrap();
        let rel = (q.total_bits() - out.rate_quantized_bits).abs() / q.total_bits();
        assert!(
            rel < 1e-9,
            "{} vs {}",
            q.total_bits(),
            out.rate_quantized_bits
        );
    }

    #[test]
    fn group_loop_rejects_bad_delta_and_symbol_counts() {
        let m = Model::new(&toy_config(3)).unwrap();
        let ctx = zeros_like_shape(&[1, 16, 4, 4]).unwrap();
        assert!(m.group_loop(&ctx, &[1.0; 3], |_| Ok(vec![])).is_err());
        let mut d = vec![1.0; 8];
        d[2] = 0.0;
        assert!(m
            .group_loop(&ctx, &d, |t| Ok(vec![0; t.means.len()]))
            .is_err());
        assert!(m.group_loop(&ctx, &[1.0; 8], |_| Ok(vec![0; 3])).is_err());
        let y = m
            .group_loop(&ctx, &[1.0; 8], |t| Ok(vec![0; t.means.len()]))
            .unwrap();
        assert_eq!(y.dims(), &[1, 8, 4, 4]);
    }

    #[test]
    fn fingerprint_tracks_parameters() {
        let a = Model::new(&toy_config(4)).unwrap();
        let b = Model::new(&toy_config(4)).unwrap();
        let c = Model::new(&toy_config(5)).unwrap();
        assert_eq!(a.fingerprint().unwrap(), b.fingerprint().unwrap());
        assert_ne!(a.fingerprint().unwrap(), c.fingerprint().unwrap());
    }

    #[test]
    fn round_symbol_saturates() {
        assert_eq!(round_symbol(2.5), 3);
        assert_eq!(round_symbol(-2.5), -3);
        assert_eq!(round_symbol(1e300), 1 << 30);
        assert_eq!(round_symbol(f64::NAN), 0);
    }
}
