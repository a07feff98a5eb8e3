//! Checkpoint files: `PLCK`, a version, a JSON header, then raw little-endian `f64`s.
//!
//! Parameters are stored with their exact bit patterns, so `load(save(x))` restores the
//! model bit for bit.

use std::io::Write;
use std::path::Path;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::discriminator::{Codebook, Discriminator, DiscriminatorConfig};
use crate::error::{Error, Result};
use crate::losses::{ConvPyramid, DistortionWeights, LossConfig, PyramidConfig, RateTargetConfig};
use crate::model::{Model, ModelConfig};
use crate::nn::{Collection, ParamStore};
use crate::ops;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"PLCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything besides the weights that compressing with refinement needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct LossSettings {
    pub weights: DistortionWeights,
    pub rate_target: RateTargetConfig,
    pub loss: LossConfig,
    pub pyramid: PyramidConfig,
}

impl LossSettings {
    pub fn extractor(&self) -> Result<ConvPyramid> {
        ConvPyramid::new(&self.pyramid)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    collection: Collection,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct FileHeader {
    stage: u8,
    step: usize,
    model: ModelConfig,
    losses: LossSettings,
    discriminator: Option<DiscriminatorConfig>,
    codebook: Option<Codebook>,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    /// Training stage that produced the weights (0 for untrained).
    pub stage: u8,
    /// Optimizer steps completed within `stage`.
    pub step: usize,
    pub model: Model,
    pub losses: LossSettings,
    pub discriminator: Option<Discriminator>,
    pub codebook: Option<Codebook>,
}

fn entries(store: &ParamStore, out: &mut Vec<TensorEntry>, data: &mut Vec<u8>) -> Result<()> {
    for (name, collection, var) in store.iter() {
        out.push(TensorEntry {
            name: name.to_string(),
            collection,
            shape: var.dims().to_vec(),
        });
        for v in ops::to_vec(var.as_tensor())? {
            data.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(())
}

impl Checkpoint {
    pub fn new(model: Model, losses: LossSettings) -> Self {
        Self {
            stage: 0,
            step: 0,
            model,
            losses,
            discriminator: None,
            codebook: None,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors = Vec::new();
        let mut data = Vec::new();
        entries(self.model.store(), &mut tensors, &mut data)?;
        if let Some(d) = &self.discriminator {
            entries(d.store(), &mut tensors, &mut data)?;
        }
        let header = FileHeader {
            stage: self.stage,
            step: self.step,
            model: self.model.config().clone(),
            losses: self.losses.clone(),
            discriminator: self.discriminator.as_ref().map(|d| d.config().clone()),
            codebook: self.codebook.clone(),
            tensors,
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Data(e.to_string()))?;
        let mut out = Vec::with_capacity(16 + json.len() + data.len());
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&data);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |m: &str| Error::Corrupt(format!("checkpoint: {m}"));
        if bytes.len() < 16 || bytes[..4] != CHECKPOINT_MAGIC {
            return Err(corrupt("bad magic"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(corrupt(&format!("unsupported version {version}")));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let json = bytes
            .get(16..16usize.saturating_add(len))
            .ok_or_else(|| corrupt("truncated header"))?;
        let header: FileHeader =
            serde_json::from_slice(json).map_err(|e| corrupt(&format!("header: {e}")))?;
        let mut data = &bytes[16 + len..];

        let mut stores = [ParamStore::new(), ParamStore::new()];
        for t in &header.tensors {
            let n: usize = t.shape.iter().product();
            if data.len() < 8 * n {
                return Err(corrupt("truncated tensor data"));
            }
            let values = data[..8 * n]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            data = &data[8 * n..];
            let which = usize::from(t.collection == Collection::Discriminator);
            stores[which].insert(
                t.name.clone(),
                t.collection,
                ops::from_vec(values, &t.shape)?,
            )?;
        }
        if !data.is_empty() {
            return Err(corrupt("trailing bytes"));
        }
        let model = Model::new(&header.model)?;
        model.store().assign_from(&stores[0])?;
        let discriminator = match &header.discriminator {
            Some(cfg) => {
                let d = Discriminator::new(cfg)?;
                d.store().assign_from(&stores[1])?;
                Some(d)
            }
            None if stores[1].is_empty() => None,
            None => return Err(corrupt("discriminator weights without a configuration")),
        };
        Ok(Self {
            stage: header.stage,
            step: header.step,
            model,
            losses: header.losses,
            discriminator,
            codebook: header.codebook,
        })
    }

    /// Writes through a temporary file so a crash never leaves a half-written checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("ckpt.tmp");
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(format!(
                "checkpoint {} not found",
                path.display()
            )));
        }
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// SHA-256 of one parameter collection across the model and discriminator.
    pub fn collection_hash(&self, collection: Collection) -> Result<[u8; 32]> {
        match (collection, &self.discriminator) {
            (Collection::Discriminator, Some(d)) => d.store().collection_hash(collection),
            _ => self.model.store().collection_hash(collection),
        }
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.model
            .store()
            .get(name)
            .or_else(|| {
                self.discriminator
                    .as_ref()
                    .and_then(|d| d.store().get(name))
            })
            .map(|v| v.as_tensor())
    }
}
