#![allow(dead_code)]

use plc::entropy_model::EntropyConfig;
use plc::imaging::ImageTensor;
use plc::model::{Model, ModelConfig};
use plc::training::{patches_from_images, PatchMode, PatchSet, TrainConfig};
use plc::transforms::TransformConfig;

pub fn toy_model_config(seed: u64) -> ModelConfig {
    ModelConfig {
        transform: TransformConfig {
            latent_channels: 8,
            hyper_channels: 4,
            base_width: 8,
            downsample_factor_y: 4,
            downsample_factor_z: 16,
        },
        entropy: EntropyConfig {
            num_groups: 4,
            predictor_width: 8,
            hyper_filters: vec![3],
        },
        seed,
    }
}

pub fn toy_model(seed: u64) -> Model {
    Model::new(&toy_model_config(seed)).unwrap()
}

pub fn toy_train_config() -> TrainConfig {
    let mut cfg = TrainConfig {
        patch_size: 64,
        patch_count: 64,
        batch_size: 4,
        stage1_steps: 500,
        stage2_steps: 200,
        learning_rate: 2e-3,
        disc_learning_rate: 1e-3,
        seed: 11,
        checkpoint_every: 0,
        model: toy_model_config(1),
        ..Default::default()
    };
    cfg.discriminator.codebook_size = 8;
    cfg.discriminator.width = 8;
    cfg
}

pub fn images(count: usize, height: usize, width: usize, seed: u64) -> Vec<(String, ImageTensor)> {
    plc::synthetic::image_set(count, height, width, seed)
        .unwrap()
        .into_iter()
        .enumerate()
        .map(|(i, img)| (format!("synthetic{i}"), img))
        .collect()
}

pub fn toy_patches(cfg: &TrainConfig) -> PatchSet {
    patches_from_images(
        &images(8, 128, 128, 100),
        cfg.patch_size,
        cfg.patch_count,
        cfg.seed,
        PatchMode::Random,
    )
    .unwrap()
}

/// Moving average with window `w`.
pub fn smooth(values: &[f64], w: usize) -> Vec<f64> {
    values
        .windows(w)
        .map(|s| s.iter().sum::<f64>() / w as f64)
        .collect()
}
