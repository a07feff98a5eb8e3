//! Per-channel learned monotone CDF for the hyper-latent `z`.
//!
//! Each channel runs its scalar input through a small chain of positive-weight
//! affine maps with tanh-gated residuals; the sigmoid of the final logit is the CDF.
//! Positivity of the weights (via softplus) keeps the CDF monotone.

use candle_core::{Tensor, Var};
use candle_nn::ops::sigmoid;
use rand::Rng;

use super::table::{CdfTable, EscapeTable, MAX_HALF_WIDTH};
use super::LIKELIHOOD_FLOOR;
use crate::error::{Error, Result};
use crate::nn::{Collection, Init, ParamStore};
use crate::ops::{self, softplus};

#[derive(Debug, Clone)]
struct Layer {
    matrix: Var,
    bias: Var,
    factor: Option<Var>,
}

#[derive(Debug, Clone)]
pub struct HyperDensity {
    channels: usize,
    layers: Vec<Layer>,
}

impl HyperDensity {
    pub fn new(
        channels: usize,
        filters: &[usize],
        store: &mut ParamStore,
        init: &mut Init,
    ) -> Result<Self> {
        let widths: Vec<usize> = std::iter::once(1)
            .chain(filters.iter().copied())
            .chain(std::iter::once(1))
            .collect();
        let depth = widths.len() - 1;
        let init_scale: f64 = 10.0;
        let scale = init_scale.powf(1.0 / depth as f64);
        let mut layers = Vec::with_capacity(depth);
        for k in 0..depth {
            let (inp, out) = (widths[k], widths[k + 1]);
            let m0 = (1.0 / scale / out as f64).exp_m1().ln();
            let matrix = store.insert(
                format!("hyper_density.{k}.matrix"),
                Collection::Entropy,
                init.constant(&[channels, out, inp], m0)?,
            )?;
            let b = init.normal(&[channels, out, 1], 0.3)?;
            let bias = store.insert(format!("hyper_density.{k}.bias"), Collection::Entropy, b)?;
            let factor = if k + 1 < depth {
                Some(store.insert(
                    format!("hyper_density.{k}.factor"),
                    Collection::Entropy,
                    init.constant(&[channels, out, 1], 0.0)?,
                )?)
            } else {
                None
            };
            layers.push(Layer {
                matrix,
                bias,
                factor,
            });
        }
        Ok(Self { channels, layers })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Overwrites the single-layer parameters (only valid with no hidden filters).
    pub fn set_single_layer(&self, weight_raw: f64, bias: f64) -> Result<()> {
        if self.layers.len() != 1 {
            return Err(Error::invalid("density has hidden layers"));
        }
        let l = &self.layers[0];
        l.matrix
            .set(&Tensor::full(weight_raw, l.matrix.dims(), &ops::DEVICE)?)?;
        l.bias
            .set(&Tensor::full(bias, l.bias.dims(), &ops::DEVICE)?)?;
        Ok(())
    }

    /// Logits of the CDF for `[C, 1, M]` inputs.
    fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let mut l = x.clone();
        for layer in &self.layers {
            let m = softplus(layer.matrix.as_tensor())?;
            l = m.matmul(&l)?.broadcast_add(layer.bias.as_tensor())?;
            if let Some(f) = &layer.factor {
                l = (&l + f.as_tensor().tanh()?.broadcast_mul(&l.tanh()?)?)?;
            }
        }
        Ok(l)
    }

    fn to_channel_major(&self, z: &Tensor) -> Result<Tensor> {
        let (_, c, _, _) = z.dims4()?;
        if c != self.channels {
            return Err(Error::shape(format!(
                "hyper latent has {c} channels, density expects {}",
                self.channels
            )));
        }
        let flat = z.transpose(0, 1)?.contiguous()?;
        Ok(flat.reshape((c, 1, ()))?)
    }

    /// Probability of the unit bin centred at each element of `z` (`[N, C, H, W]`).
    pub fn likelihood(&self, z: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = z.dims4()?;
        let x = self.to_channel_major(z)?;
        let mass = self.bin_mass(&x)?;
        let mass = mass.reshape((c, n, h, w))?.transpose(0, 1)?.contiguous()?;
        Ok(mass.maximum(LIKELIHOOD_FLOOR)?)
    }

    fn bin_mass(&self, x: &Tensor) -> Result<Tensor> {
        let lower = self.logits(&x.affine(1.0, -0.5)?)?;
        let upper = self.logits(&x.affine(1.0, 0.5)?)?;
        // Evaluate on the side of the median where the sigmoids are far from 1.
        let sign = fix_zero_sign(&(&lower + &upper)?.sign()?.neg()?.detach())?;
        let hi = sigmoid(&(&sign * &upper)?)?;
        let lo = sigmoid(&(&sign * &lower)?)?;
        Ok((hi - lo)?.abs()?)
    }

    /// Differentiable rate of `z + U(-1/2, 1/2)` in bits.
    pub fn rate_noised<R: Rng>(&self, z: &Tensor, rng: &mut R) -> Result<Tensor> {
        let noisy = (z + ops::uniform_like(z, -0.5, 0.5, rng)?)?;
        super::bits_of(&self.likelihood(&noisy)?)
    }

    /// One escape-terminated table per channel over `[-64, 64]`.
    pub fn tables(&self) -> Result<Vec<CdfTable>> {
        let hw = MAX_HALF_WIDTH;
        let points: Vec<f64> = (-hw..=hw).map(f64::from).collect();
        let m = points.len();
        let grid = ops::from_vec(points.repeat(self.channels), &[self.channels, 1, m])?;
        let mass = ops::to_vec(&self.bin_mass(&grid)?)?;
        mass.chunks(m)
            .map(|pmf| {
                let covered: f64 = pmf.iter().sum();
                let mut pmf = pmf.to_vec();
                pmf.push((1.0 - covered).max(0.0));
                CdfTable::from_pmf(&pmf, -hw)
            })
            .collect()
    }

    /// Exact bits of integer `z` symbols (`[N, C, H, W]`, channel-major tables).
    pub fn rate_quantized(&self, z: &Tensor) -> Result<f64> {
        let (n, c, h, w) = z.dims4()?;
        let tables = self.tables()?;
        let v = ops::to_vec(z)?;
        let mut bits = 0.0;
        for b in 0..n {
            for (ch, table) in tables.iter().enumerate().take(c) {
                for i in 0..h * w {
                    let s = v[(b * c + ch) * h * w + i].round() as i32;
                    bits += table.value_codelength(s);
                }
            }
        }
        Ok(bits)
    }
}

/// `sign` of exactly zero becomes -1 so the bin is always evaluated consistently.
fn fix_zero_sign(sign: &Tensor) -> Result<Tensor> {
    let zero = sign.zeros_like()?;
    let is_zero = sign.eq(&zero)?;
    Ok(is_zero.where_cond(&sign.ones_like()?.neg()?, sign)?)
}
