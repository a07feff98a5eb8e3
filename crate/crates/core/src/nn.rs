//! Parameter collections and the handful of layers the model is built from.

use std::collections::BTreeMap;
use std::fmt;

use candle_core::{Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::ops;

/// The four disjoint parameter groups. Training stages select which ones move.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Collection {
    Encoder,
    Decoder,
    Entropy,
    Discriminator,
}

impl Collection {
    pub const ALL: [Collection; 4] = [
        Collection::Encoder,
        Collection::Decoder,
        Collection::Entropy,
        Collection::Discriminator,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Collection::Encoder => "encoder",
            Collection::Decoder => "decoder",
            Collection::Entropy => "entropy",
            Collection::Discriminator => "discriminator",
        }
    }
}

impl fmt::Display for Collection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Named trainable tensors, each owned by exactly one [`Collection`].
///
/// Layers hold clones of the same [`Var`]s, so optimizer updates made through the
/// store are visible to the layers without any re-wiring.
#[derive(Default, Clone)]
pub struct ParamStore {
    vars: BTreeMap<String, (Collection, Var)>,
}

impl fmt::Debug for ParamStore {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_map()
            .entries(
                self.vars
                    .iter()
                    .map(|(k, (c, v))| (k, (c, v.dims().to_vec()))),
            )
            .finish()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(
        &mut self,
        name: impl Into<String>,
        collection: Collection,
        value: Tensor,
    ) -> Result<Var> {
        let name = name.into();
        if self.vars.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter {name}")));
        }
        let var = Var::from_tensor(&value)?;
        self.vars.insert(name, (collection, var.clone()));
        Ok(var)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name).map(|(_, v)| v)
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Collection, &Var)> {
        self.vars.iter().map(|(k, (c, v))| (k.as_str(), *c, v))
    }

    pub fn vars_in(&self, collections: &[Collection]) -> Vec<Var> {
        self.vars
            .values()
            .filter(|(c, _)| collections.contains(c))
            .map(|(_, v)| v.clone())
            .collect()
    }

    /// Overwrites every parameter from `other`; names, collections and shapes must agree.
    pub fn assign_from(&self, other: &ParamStore) -> Result<()> {
        if self.vars.len() != other.vars.len() {
            return Err(Error::shape(format!(
                "parameter count {} vs {}",
                self.vars.len(),
                other.vars.len()
            )));
        }
        for (name, (coll, var)) in &self.vars {
            let (ocoll, ovar) = other
                .vars
                .get(name)
                .ok_or_else(|| Error::shape(format!("missing parameter {name}")))?;
            if coll != ocoll || var.dims() != ovar.dims() {
                return Err(Error::shape(format!("parameter {name} does not match")));
            }
            var.set(ovar.as_tensor())?;
        }
        Ok(())
    }

    /// SHA-256 over names, shapes and the exact bit patterns of one collection.
    pub fn collection_hash(&self, collection: Collection) -> Result<[u8; 32]> {
        let mut h = Sha256::new();
        for (name, (c, var)) in &self.vars {
            if *c != collection {
                continue;
            }
            h.update(name.as_bytes());
            for d in var.dims() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in ops::to_vec(var.as_tensor())? {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        Ok(h.finalize().into())
    }
}

/// Seeded weight initializer; one per model so construction is reproducible.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn normal(&mut self, shape: &[usize], std: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).map_err(|e| Error::invalid(e.to_string()))?;
        let data = (0..n).map(|_| dist.sample(&mut self.rng)).collect();
        ops::from_vec(data, shape)
    }

    pub fn constant(&mut self, shape: &[usize], value: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        ops::from_vec(vec![value; n], shape)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvKind {
    /// Ordinary convolution: `out = (in + 2p - k) / s + 1`.
    Forward,
    /// Transposed convolution: `out = (in - 1) s - 2p + k`.
    Transposed,
}

/// A 2-D convolution with bias. Weights may live in a [`ParamStore`] (trainable) or be
/// plain tensors (frozen feature extractors).
#[derive(Debug, Clone)]
pub struct Conv {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
    padding: usize,
    kind: ConvKind,
}

#[derive(Debug, Clone, Copy)]
pub struct ConvSpec {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub kind: ConvKind,
}

impl ConvSpec {
    pub fn down(in_ch: usize, out_ch: usize, kernel: usize, stride: usize) -> Self {
        Self {
            in_ch,
            out_ch,
            kernel,
            stride,
            padding: kernel / 2,
            kind: ConvKind::Forward,
        }
    }

    /// Stride-2 transposed conv with a 4x4 kernel: exactly doubles the spatial size.
    pub fn up2(in_ch: usize, out_ch: usize) -> Self {
        Self {
            in_ch,
            out_ch,
            kernel: 4,
            stride: 2,
            padding: 1,
            kind: ConvKind::Transposed,
        }
    }

    fn weight_shape(&self) -> [usize; 4] {
        match self.kind {
            ConvKind::Forward => [self.out_ch, self.in_ch, self.kernel, self.kernel],
            ConvKind::Transposed => [self.in_ch, self.out_ch, self.kernel, self.kernel],
        }
    }

    fn fan_in(&self) -> usize {
        match self.kind {
            ConvKind::Forward => self.in_ch * self.kernel * self.kernel,
            // Each output of a stride-s transposed conv sees about k^2 / s^2 taps per input channel.
            ConvKind::Transposed => {
                self.in_ch * (self.kernel * self.kernel / (self.stride * self.stride)).max(1)
            }
        }
    }
}

impl Conv {
    /// Registers weight and bias under `name.weight` / `name.bias`.
    pub fn trainable(
        store: &mut ParamStore,
        collection: Collection,
        name: &str,
        spec: ConvSpec,
        init: &mut Init,
        gain: f64,
        bias: f64,
    ) -> Result<Self> {
        let std = gain / (spec.fan_in() as f64).sqrt();
        let w = init.normal(&spec.weight_shape(), std)?;
        let b = init.constant(&[spec.out_ch], bias)?;
        let weight = store.insert(format!("{name}.weight"), collection, w)?;
        let bias = store.insert(format!("{name}.bias"), collection, b)?;
        Ok(Self::from_tensors(
            spec,
            weight.as_tensor().clone(),
            bias.as_tensor().clone(),
        ))
    }

    pub fn frozen(spec: ConvSpec, init: &mut Init, gain: f64) -> Result<Self> {
        let std = gain / (spec.fan_in() as f64).sqrt();
        let w = init.normal(&spec.weight_shape(), std)?;
        let b = init.constant(&[spec.out_ch], 0.0)?;
        Ok(Self::from_tensors(spec, w, b))
    }

    fn from_tensors(spec: ConvSpec, weight: Tensor, bias: Tensor) -> Self {
        Self {
            weight,
            bias,
            stride: spec.stride,
            padding: spec.padding,
            kind: spec.kind,
        }
    }

    pub fn out_channels(&self) -> usize {
        match self.kind {
            ConvKind::Forward => self.weight.dims()[0],
            ConvKind::Transposed => self.weight.dims()[1],
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.apply(x, &self.weight, &self.bias)
    }

    /// Same computation with the parameters cut out of the autograd graph.
    pub fn forward_detached(&self, x: &Tensor) -> Result<Tensor> {
        self.apply(x, &self.weight.detach(), &self.bias.detach())
    }

    fn apply(&self, x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
        let y = match self.kind {
            ConvKind::Forward => x.conv2d(weight, self.padding, self.stride, 1, 1)?,
            ConvKind::Transposed => x.conv_transpose2d(weight, self.padding, 0, self.stride, 1)?,
        };
        let b = bias.reshape((1, bias.dims()[0], 1, 1))?;
        Ok(y.broadcast_add(&b)?)
    }
}

/// A chain of convolutions with SiLU between (not after) layers.
#[derive(Debug, Clone)]
pub struct ConvStack {
    layers: Vec<Conv>,
}

impl ConvStack {
    pub fn new(layers: Vec<Conv>) -> Self {
        Self { layers }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.run(x, false)
    }

    pub fn forward_detached(&self, x: &Tensor) -> Result<Tensor> {
        self.run(x, true)
    }

    fn run(&self, x: &Tensor, detached: bool) -> Result<Tensor> {
        let mut h = x.clone();
        let last = self.layers.len().saturating_sub(1);
        for (i, layer) in self.layers.iter().enumerate() {
            h = if detached {
                layer.forward_detached(&h)?
            } else {
                layer.forward(&h)?
            };
            if i != last {
                h = h.silu()?;
            }
        }
        Ok(h)
    }

    pub fn out_channels(&self) -> usize {
        self.layers.last().map(Conv::out_channels).unwrap_or(0)
    }
}

#[cfg(test)]
pub(crate) fn zeros_like_shape(shape: &[usize]) -> Result<Tensor> {
    Ok(Tensor::zeros(shape, ops::DTYPE, &ops::DEVICE)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_shapes() {
        let mut store = ParamStore::new();
        let mut init = Init::new(0);
        let down = Conv::trainable(
            &mut store,
            Collection::Encoder,
            "d",
            ConvSpec::down(3, 4, 5, 2),
            &mut init,
            1.0,
            0.0,
        )
        .unwrap();
        let up = Conv::trainable(
            &mut store,
            Collection::Decoder,
            "u",
            ConvSpec::up2(4, 3),
            &mut init,
            1.0,
            0.0,
        )
        .unwrap();
        let x = zeros_like_shape(&[2, 3, 16, 12]).unwrap();
        let h = down.forward(&x).unwrap();
        assert_eq!(h.dims(), &[2, 4, 8, 6]);
        assert_eq!(up.forward(&h).unwrap().dims(), &[2, 3, 16, 12]);
        assert_eq!(store.len(), 4);
    }

    #[test]
    fn collection_hash_tracks_only_its_collection() {
        let mut store = ParamStore::new();
        let mut init = Init::new(1);
        store
            .insert("a", Collection::Encoder, init.normal(&[3], 1.0).unwrap())
            .unwrap();
        let b = store
            .insert("b", Collection::Decoder, init.normal(&[3], 1.0).unwrap())
            .unwrap();
        let enc = store.collection_hash(Collection::Encoder).unwrap();
        let dec = store.collection_hash(Collection::Decoder).unwrap();
        b.set(&(b.as_tensor() * 2.0).unwrap()).unwrap();
        assert_eq!(enc, store.collection_hash(Collection::Encoder).unwrap());
        assert_ne!(dec, store.collection_hash(Collection::Decoder).unwrap());
    }
}
