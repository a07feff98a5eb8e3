//! Patch datasets and the two training stages.
//!
//! Stage 1 trains encoder, decoder and entropy model on the rate-constrained ensemble
//! loss without the adversarial term. Stage 2 fine-tunes the decoder against a
//! codebook-labelled discriminator while everything else stays frozen.

use std::path::{Path, PathBuf};

use candle_core::Tensor;
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{Checkpoint, LossSettings};
use crate::discriminator::{adv_loss, disc_loss, Discriminator, DiscriminatorConfig};
use crate::error::{Error, Result};
use crate::imaging::ImageTensor;
use crate::losses::{
    self, ConvPyramid, DistortionTerms, DistortionWeights, LossConfig, PyramidConfig,
    RateTargetConfig,
};
use crate::metrics::list_images;
use crate::model::{Model, ModelConfig};
use crate::nn::Collection;
use crate::ops;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatchMode {
    /// Uniformly placed crops from uniformly chosen images.
    #[default]
    Random,
    /// Disjoint grid tiles, shuffled.
    Tiles,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub data_dir: Option<PathBuf>,
    /// Checkpoints and logs; nothing is written when unset.
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub patch_size: usize,
    pub patch_count: usize,
    pub patch_mode: PatchMode,
    pub batch_size: usize,
    pub stage1_steps: usize,
    pub stage2_steps: usize,
    pub learning_rate: f64,
    pub disc_learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Save a resumable checkpoint every this many steps (0 disables).
    pub checkpoint_every: usize,
    pub rate_target: RateTargetConfig,
    pub weights: DistortionWeights,
    pub model: ModelConfig,
    pub discriminator: DiscriminatorConfig,
    pub loss: LossConfig,
    pub pyramid: PyramidConfig,
    pub paths: PathsConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            patch_size: 256,
            patch_count: 256,
            patch_mode: PatchMode::Random,
            batch_size: 8,
            stage1_steps: 2000,
            stage2_steps: 500,
            learning_rate: 1e-4,
            disc_learning_rate: 1e-4,
            weight_decay: 0.0,
            seed: 0,
            checkpoint_every: 500,
            rate_target: RateTargetConfig::default(),
            weights: DistortionWeights::default(),
            model: ModelConfig::default(),
            discriminator: DiscriminatorConfig::default(),
            loss: LossConfig::default(),
            pyramid: PyramidConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 || self.patch_size % 64 != 0 {
            return bad(format!(
                "patch_size {} is not a positive multiple of 64",
                self.patch_size
            ));
        }
        if self.patch_size % self.model.transform.downsample_factor_z != 0 {
            return bad("patch_size must be a multiple of the hyper-latent stride".into());
        }
        if self.batch_size == 0 || self.patch_count == 0 {
            return bad("batch_size and patch_count must be positive".into());
        }
        for (name, v) in [
            ("learning_rate", self.learning_rate),
            ("disc_learning_rate", self.disc_learning_rate),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return bad(format!("{name} must be positive"));
            }
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad("weight_decay must be non-negative".into());
        }
        self.weights.validate()?;
        self.rate_target.validate()?;
        self.model.validate()
    }

    pub fn loss_settings(&self) -> LossSettings {
        LossSettings {
            weights: self.weights,
            rate_target: self.rate_target,
            loss: self.loss.clone(),
            pyramid: self.pyramid.clone(),
        }
    }

    fn adamw(&self, lr: f64) -> ParamsAdamW {
        ParamsAdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: self.weight_decay,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PatchSet {
    patch_size: usize,
    patches: Vec<Tensor>,
    pub warnings: Vec<String>,
}

impl PatchSet {
    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    pub fn patches(&self) -> &[Tensor] {
        &self.patches
    }

    /// `[B, 3, P, P]` batch of the given patches.
    pub fn batch(&self, indices: &[usize]) -> Result<Tensor> {
        let parts: Vec<&Tensor> = indices.iter().map(|&i| &self.patches[i]).collect();
        Ok(Tensor::stack(&parts, 0)?)
    }

    pub fn sample_batch<R: Rng>(&self, size: usize, rng: &mut R) -> Result<Tensor> {
        let idx: Vec<usize> = (0..size).map(|_| rng.random_range(0..self.len())).collect();
        self.batch(&idx)
    }
}

/// Cuts `count` patches from named images; images smaller than a patch are skipped.
pub fn patches_from_images(
    images: &[(String, ImageTensor)],
    patch_size: usize,
    count: usize,
    seed: u64,
    mode: PatchMode,
) -> Result<PatchSet> {
    if patch_size == 0 {
        return Err(Error::invalid("patch_size must be positive"));
    }
    let mut warnings = Vec::new();
    let mut usable = Vec::new();
    for (name, img) in images {
        if img.height() < patch_size || img.width() < patch_size {
            let msg = format!(
                "{name}: {}x{} is smaller than the {patch_size} patch, skipped",
                img.width(),
                img.height()
            );
            log::warn!("{msg}");
            warnings.push(msg);
        } else {
            usable.push(img);
        }
    }
    if usable.is_empty() {
        return Err(Error::Data("no image is large enough for a patch".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut patches = Vec::with_capacity(count);
    match mode {
        PatchMode::Random => {
            for _ in 0..count {
                let img = usable[rng.random_range(0..usable.len())];
                let top = rng.random_range(0..=img.height() - patch_size);
                let left = rng.random_range(0..=img.width() - patch_size);
                patches.push(
                    img.crop_at(top, left, patch_size, patch_size)?
                        .tensor()
                        .clone(),
                );
            }
        }
        PatchMode::Tiles => {
            let mut tiles = Vec::new();
            for (i, img) in usable.iter().enumerate() {
                for r in 0..img.height() / patch_size {
                    for c in 0..img.width() / patch_size {
                        tiles.push((i, r * patch_size, c * patch_size));
                    }
                }
            }
            tiles.shuffle(&mut rng);
            if tiles.len() < count {
                let msg = format!(
                    "only {} disjoint tiles available, {count} requested",
                    tiles.len()
                );
                log::warn!("{msg}");
                warnings.push(msg);
            }
            for &(i, top, left) in tiles.iter().take(count) {
                patches.push(
                    usable[i]
                        .crop_at(top, left, patch_size, patch_size)?
                        .tensor()
                        .clone(),
                );
            }
        }
    }
    Ok(PatchSet {
        patch_size,
        patches,
        warnings,
    })
}

/// Loads every image in `dir` and cuts patches from them. Unreadable files are skipped
/// with a warning.
pub fn extract_patches(
    dir: &Path,
    patch_size: usize,
    count: usize,
    seed: u64,
    mode: PatchMode,
) -> Result<PatchSet> {
    let mut images = Vec::new();
    let mut warnings = Vec::new();
    for p in list_images(dir)? {
        let name = p.display().to_string();
        match ImageTensor::load(&p) {
            Ok(img) => images.push((name, img)),
            Err(e) => {
                log::warn!("skipping {name}: {e}");
                warnings.push(format!("{name}: {e}"));
            }
        }
    }
    if images.is_empty() {
        return Err(Error::Data(format!(
            "no usable images in {}",
            dir.display()
        )));
    }
    let mut set = patches_from_images(&images, patch_size, count, seed, mode)?;
    warnings.append(&mut set.warnings);
    set.warnings = warnings;
    Ok(set)
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub stage: u8,
    pub step: usize,
    pub loss: f64,
    pub rate_bpp: f64,
    pub rate_quantized_bpp: f64,
    pub lambda: f64,
    pub rec: f64,
    pub per: f64,
    pub style: f64,
    pub adv: Option<f64>,
    pub disc_loss: Option<f64>,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<LogRow>,
    /// Final checkpoint file, when an output directory is configured.
    pub path: Option<PathBuf>,
}

pub fn write_log_csv(path: &Path, rows: &[LogRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Data(e.to_string()))?;
    for row in rows {
        w.serialize(row).map_err(|e| Error::Data(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn step_rng(seed: u64, stage: u8, step: usize) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update([stage]);
    h.update((step as u64).to_le_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

struct Saver<'a> {
    dir: Option<&'a Path>,
    stage: u8,
    every: usize,
    last: Option<PathBuf>,
}

impl Saver<'_> {
    fn periodic(&mut self, ck: &Checkpoint) -> Result<()> {
        if let Some(dir) = self.dir {
            if self.every > 0 && ck.step % self.every == 0 {
                let p = dir.join(format!("stage{}-latest.ckpt", self.stage));
                ck.save(&p)?;
                self.last = Some(p);
            }
        }
        Ok(())
    }

    fn finish(&mut self, ck: &Checkpoint, log: &[LogRow]) -> Result<Option<PathBuf>> {
        let Some(dir) = self.dir else { return Ok(None) };
        let p = dir.join(format!("stage{}.ckpt", self.stage));
        ck.save(&p)?;
        write_log_csv(&dir.join(format!("stage{}-log.csv", self.stage)), log)?;
        Ok(Some(p))
    }

    fn diverged(&self, step: usize, log: &[LogRow]) -> Error {
        if let Some(dir) = self.dir {
            let _ = write_log_csv(&dir.join(format!("stage{}-log.csv", self.stage)), log);
        }
        Error::Diverged {
            step,
            checkpoint: self.last.clone(),
        }
    }
}

fn prepare_output(cfg: &TrainConfig) -> Result<Option<&Path>> {
    match &cfg.paths.output_dir {
        Some(d) => {
            std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
            Ok(Some(d.as_path()))
        }
        None => Ok(None),
    }
}

/// A fresh checkpoint for `cfg`'s model.
pub fn initial_checkpoint(cfg: &TrainConfig) -> Result<Checkpoint> {
    Ok(Checkpoint::new(
        Model::new(&cfg.model)?,
        cfg.loss_settings(),
    ))
}

fn check_patches(cfg: &TrainConfig, data: &PatchSet, model: &Model) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Data("empty patch set".into()));
    }
    if data.patch_size() % model.padding_multiple() != 0 {
        return Err(Error::Config(format!(
            "patch size {} is not a multiple of the model stride {}",
            data.patch_size(),
            model.padding_multiple()
        )));
    }
    if model.config() != &cfg.model {
        return Err(Error::Config(
            "checkpoint model differs from the configured model".into(),
        ));
    }
    Ok(())
}

/// Joint training of encoder, decoder and entropy model; the adversarial weight is
/// forced to zero. A stage-1 `start` resumes at its step counter.
pub fn train_stage1(cfg: &TrainConfig, data: &PatchSet, start: Checkpoint) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut ck = start;
    match ck.stage {
        0 => ck.step = 0,
        1 => {}
        s => {
            return Err(Error::Config(format!(
                "cannot run stage 1 from a stage-{s} checkpoint"
            )))
        }
    }
    ck.stage = 1;
    check_patches(cfg, data, &ck.model)?;
    let extractor = ConvPyramid::new(&cfg.pyramid)?;
    let weights = cfg.weights.without_adversarial();
    let vars = ck.model.store().vars_in(&[
        Collection::Encoder,
        Collection::Decoder,
        Collection::Entropy,
    ]);
    let mut opt = AdamW::new(vars, cfg.adamw(cfg.learning_rate))?;
    let mut saver = Saver {
        dir: prepare_output(cfg)?,
        stage: 1,
        every: cfg.checkpoint_every,
        last: None,
    };
    let mut log = Vec::new();
    while ck.step < cfg.stage1_steps {
        let mut rng = step_rng(cfg.seed, 1, ck.step);
        let x = data.sample_batch(cfg.batch_size, &mut rng)?;
        let out = match ck.model.forward_train(&x, &mut rng) {
            Err(Error::NonFinite(_)) => return Err(saver.diverged(ck.step, &log)),
            r => r?,
        };
        let terms = DistortionTerms::compute(&x, &out.x_hat, &extractor, &cfg.loss)?;
        let d = losses::ensemble(&terms, &weights)?;
        let rq = out.rate_quantized_bpp();
        let loss = losses::rd_loss(&out.rate_noised_bpp()?, rq, &d, &cfg.rate_target)?;
        let value = ops::scalar(&loss)?;
        let [rec, per, style, _] = terms.values()?;
        log.push(LogRow {
            stage: 1,
            step: ck.step,
            loss: value,
            rate_bpp: ops::scalar(&out.rate_noised_bpp()?)?,
            rate_quantized_bpp: rq,
            lambda: losses::lambda_select(rq, &cfg.rate_target),
            rec,
            per,
            style,
            adv: None,
            disc_loss: None,
        });
        if !value.is_finite() {
            return Err(saver.diverged(ck.step, &log));
        }
        opt.backward_step(&loss)?;
        ck.step += 1;
        saver.periodic(&ck)?;
    }
    ck.losses = LossSettings {
        weights,
        ..cfg.loss_settings()
    };
    let path = saver.finish(&ck, &log)?;
    Ok(TrainOutcome {
        checkpoint: ck,
        log,
        path,
    })
}

/// Adversarial fine-tuning: alternating discriminator and decoder steps. Only decoder
/// and discriminator parameters change. Builds the codebook when `start` has none.
pub fn train_stage2(cfg: &TrainConfig, data: &PatchSet, start: Checkpoint) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut ck = start;
    match ck.stage {
        1 => ck.step = 0,
        2 => {}
        s => {
            return Err(Error::MissingArtifact(format!(
                "stage 2 needs a stage-1 checkpoint, got stage {s}"
            )))
        }
    }
    ck.stage = 2;
    check_patches(cfg, data, &ck.model)?;
    let extractor = ConvPyramid::new(&cfg.pyramid)?;
    let disc = match ck.discriminator.take() {
        Some(d) => d,
        None => Discriminator::new(&cfg.discriminator)?,
    };
    let codebook = match ck.codebook.take() {
        Some(c) => c,
        None => {
            let images: Vec<Tensor> = data
                .patches()
                .iter()
                .map(|p| p.unsqueeze(0))
                .collect::<candle_core::Result<_>>()?;
            disc.build_codebook(&images, &extractor)?
        }
    };
    if codebook.classes() != disc.classes() {
        return Err(Error::Config(format!(
            "codebook has {} entries but the discriminator expects {}",
            codebook.len(),
            disc.classes() - 1
        )));
    }
    let mut opt_d = AdamW::new(
        disc.store().vars_in(&[Collection::Discriminator]),
        cfg.adamw(cfg.disc_learning_rate),
    )?;
    let mut opt_g = AdamW::new(
        ck.model.store().vars_in(&[Collection::Decoder]),
        cfg.adamw(cfg.learning_rate),
    )?;
    ck.discriminator = Some(disc);
    ck.codebook = Some(codebook);
    let disc = ck.discriminator.as_ref().expect("set above");
    let codebook = ck.codebook.as_ref().expect("set above");
    let mut saver = Saver {
        dir: prepare_output(cfg)?,
        stage: 2,
        every: cfg.checkpoint_every,
        last: None,
    };
    let mut log = Vec::new();
    while ck.step < cfg.stage2_steps {
        let mut rng = step_rng(cfg.seed, 2, ck.step);
        let x = data.sample_batch(cfg.batch_size, &mut rng)?;
        let out = match ck.model.forward_train(&x, &mut rng) {
            Err(Error::NonFinite(_)) => return Err(saver.diverged(ck.step, &log)),
            r => r?,
        };

        let dl = disc_loss(&x, &out.x_hat, codebook, &extractor, disc)?;
        let dl_value = ops::scalar(&dl)?;

        let adv = adv_loss(&x, &out.x_hat, codebook, &extractor, disc)?;
        let terms =
            DistortionTerms::compute(&x, &out.x_hat, &extractor, &cfg.loss)?.with_adversarial(adv);
        let d = losses::ensemble(&terms, &cfg.weights)?;
        let rq = out.rate_quantized_bpp();
        let loss = losses::rd_loss(&out.rate_noised_bpp()?, rq, &d, &cfg.rate_target)?;
        let value = ops::scalar(&loss)?;
        let [rec, per, style, adv] = terms.values()?;
        log.push(LogRow {
            stage: 2,
            step: ck.step,
            loss: value,
            rate_bpp: ops::scalar(&out.rate_noised_bpp()?)?,
            rate_quantized_bpp: rq,
            lambda: losses::lambda_select(rq, &cfg.rate_target),
            rec,
            per,
            style,
            adv: Some(adv),
            disc_loss: Some(dl_value),
        });
        if !(value.is_finite() && dl_value.is_finite()) {
            return Err(saver.diverged(ck.step, &log));
        }
        opt_d.backward_step(&dl)?;
        opt_g.backward_step(&loss)?;
        ck.step += 1;
        saver.periodic(&ck)?;
    }
    ck.losses = cfg.loss_settings();
    let path = saver.finish(&ck, &log)?;
    Ok(TrainOutcome {
        checkpoint: ck,
        log,
        path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic;

    fn named(h: usize, w: usize, seed: u64) -> (String, ImageTensor) {
        (
            format!("img{seed}"),
            synthetic::image(h, w, seed).unwrap().image,
        )
    }

    #[test]
    fn tiles_are_disjoint() {
        let set = patches_from_images(&[named(128, 128, 1)], 64, 4, 9, PatchMode::Tiles).unwrap();
        assert_eq!(set.len(), 4);
        let src = named(128, 128, 1).1;
        let mut seen = Vec::new();
        for p in set.patches() {
            let v = ops::to_vec(p).unwrap();
            let pos = [(0, 0), (0, 64), (64, 0), (64, 64)]
                .into_iter()
                .find(|&(t, l)| {
                    ops::to_vec(src.crop_at(t, l, 64, 64).unwrap().tensor()).unwrap() == v
                })
                .expect("patch is a grid tile");
            assert!(!seen.contains(&pos));
            seen.push(pos);
        }
    }

    #[test]
    fn patches_are_reproducible_and_small_images_skipped() {
        let imgs = [named(100, 100, 1), named(64, 90, 2), named(40, 200, 3)];
        let a = patches_from_images(&imgs, 64, 5, 3, PatchMode::Random).unwrap();
        let b = patches_from_images(&imgs, 64, 5, 3, PatchMode::Random).unwrap();
        assert_eq!(a.warnings.len(), 1);
        assert!(a.warnings[0].contains("img3"));
        for (p, q) in a.patches().iter().zip(b.patches()) {
            assert_eq!(ops::to_vec(p).unwrap(), ops::to_vec(q).unwrap());
        }
        assert!(patches_from_images(&[named(40, 40, 1)], 64, 1, 0, PatchMode::Random).is_err());
    }

    #[test]
    fn config_round_trips_and_validates() {
        let cfg = TrainConfig::default();
        let back = TrainConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
        let partial = TrainConfig::from_toml(
            "patch_size = 128\n[weights]\nalpha = 5.0\nbeta = 1.0\ngamma = 80.0\ndelta = 0.008\n",
        )
        .unwrap();
        assert_eq!(partial.patch_size, 128);
        assert_eq!(partial.weights.alpha, 5.0);
        assert!(TrainConfig::from_toml("patch_size = 100").is_err());
        assert!(TrainConfig::from_toml("bogus = 1").is_err());
        let w = TrainConfig::default().weights;
        assert_eq!(
            (w.alpha, w.beta, w.gamma, w.delta),
            (10.0, 1.0, 80.0, 0.008)
        );
    }
}
