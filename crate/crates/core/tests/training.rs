mod common;

use std::sync::OnceLock;

use plc::checkpoint::Checkpoint;
use plc::nn::Collection;
use plc::training::{
    extract_patches, initial_checkpoint, patches_from_images, train_stage1, train_stage2, LogRow,
    PatchMode, TrainOutcome,
};
use plc::Error;

fn stage1() -> &'static TrainOutcome {
    static OUT: OnceLock<TrainOutcome> = OnceLock::new();
    OUT.get_or_init(|| {
        let cfg = common::toy_train_config();
        let data = common::toy_patches(&cfg);
        train_stage1(&cfg, &data, initial_checkpoint(&cfg).unwrap()).unwrap()
    })
}

fn column(log: &[LogRow], f: impl Fn(&LogRow) -> f64) -> Vec<f64> {
    log.iter().map(f).collect()
}

#[test]
fn stage_one_loss_falls() {
    let log = &stage1().log;
    assert_eq!(log.len(), 500);
    let s = common::smooth(&column(log, |r| r.loss), 25);
    let (first, last) = (s[0], s[s.len() - 1]);
    assert!(last <= 0.8 * first, "smoothed loss {first:.4} -> {last:.4}");
    assert!(log.iter().all(|r| r.adv.is_none() && r.disc_loss.is_none()));
}

#[test]
fn lambda_switches_around_the_target() {
    let cfg = common::toy_train_config();
    let log = &stage1().log;
    let tail = &log[log.len() / 2..];
    let above = tail
        .iter()
        .filter(|r| r.lambda == cfg.rate_target.lambda_a)
        .count();
    let below = tail
        .iter()
        .filter(|r| r.lambda == cfg.rate_target.lambda_b)
        .count();
    assert_eq!(above + below, tail.len());
    for r in tail {
        let expected = if r.rate_quantized_bpp <= cfg.rate_target.tau {
            cfg.rate_target.lambda_a
        } else {
            cfg.rate_target.lambda_b
        };
        assert_eq!(r.lambda, expected);
    }
    assert!(above > 0 && below > 0, "above {above} below {below}");
}

#[test]
fn stage_two_trains_only_decoder_and_discriminator() {
    let mut cfg = common::toy_train_config();
    let data = common::toy_patches(&cfg);
    let start = stage1().checkpoint.clone();
    let before = Checkpoint::from_bytes(&start.to_bytes().unwrap()).unwrap();
    let out = train_stage2(
        &cfg,
        &data,
        Checkpoint::from_bytes(&start.to_bytes().unwrap()).unwrap(),
    )
    .unwrap();
    assert_eq!(
        (out.checkpoint.stage, out.checkpoint.step),
        (2, cfg.stage2_steps)
    );
    for c in [Collection::Encoder, Collection::Entropy] {
        assert_eq!(
            out.checkpoint.collection_hash(c).unwrap(),
            before.collection_hash(c).unwrap()
        );
    }
    assert_ne!(
        out.checkpoint.collection_hash(Collection::Decoder).unwrap(),
        before.collection_hash(Collection::Decoder).unwrap()
    );
    let d = common::smooth(&column(&out.log, |r| r.disc_loss.unwrap()), 20);
    assert!(
        d[d.len() - 1] < d[0],
        "discriminator loss {:.4} -> {:.4}",
        d[0],
        d[d.len() - 1]
    );
    assert!(out.log.iter().all(|r| r.adv.is_some()));

    cfg.stage2_steps += 5;
    let resumed = train_stage2(&cfg, &data, out.checkpoint).unwrap();
    assert_eq!(resumed.log.first().unwrap().step, cfg.stage2_steps - 5);
    assert_eq!(resumed.log.len(), 5);
}

#[test]
fn stage_one_resumes_at_its_step() {
    let mut cfg = common::toy_train_config();
    cfg.stage1_steps = 6;
    let data = common::toy_patches(&cfg);
    let straight = train_stage1(&cfg, &data, initial_checkpoint(&cfg).unwrap()).unwrap();

    cfg.stage1_steps = 3;
    let half = train_stage1(&cfg, &data, initial_checkpoint(&cfg).unwrap()).unwrap();
    cfg.stage1_steps = 6;
    let rest = train_stage1(&cfg, &data, half.checkpoint).unwrap();
    assert_eq!(
        rest.log.iter().map(|r| r.step).collect::<Vec<_>>(),
        vec![3, 4, 5]
    );
    assert_eq!(rest.log[0].loss, straight.log[3].loss);
    assert_eq!(rest.checkpoint.step, 6);
}

#[test]
fn stage_two_refuses_an_untrained_model() {
    let cfg = common::toy_train_config();
    let data = common::toy_patches(&cfg);
    let err = train_stage2(&cfg, &data, initial_checkpoint(&cfg).unwrap()).unwrap_err();
    assert!(matches!(err, Error::MissingArtifact(_)), "{err}");
}

#[test]
fn divergence_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = common::toy_train_config();
    cfg.stage1_steps = 5;
    cfg.paths.output_dir = Some(dir.path().to_path_buf());
    let data = common::toy_patches(&cfg);
    let start = initial_checkpoint(&cfg).unwrap();
    for (_, _, var) in start.model.store().iter() {
        var.set(&(var.as_tensor() * 1e300).unwrap()).unwrap();
    }
    match train_stage1(&cfg, &data, start) {
        Err(Error::Diverged { step, checkpoint }) => assert_eq!((step, checkpoint), (0, None)),
        other => panic!(
            "expected divergence, got {:?}",
            other.map(|o| o.log.last().cloned())
        ),
    }
    assert!(dir.path().join("stage1-log.csv").exists());
    assert!(!dir.path().join("stage1.ckpt").exists());
}

#[test]
fn tiles_cover_a_large_image() {
    let dir = tempfile::tempdir().unwrap();
    let img = plc::synthetic::image(512, 512, 3).unwrap().image;
    img.save_png(&dir.path().join("big.png")).unwrap();
    let set = extract_patches(dir.path(), 256, 4, 0, PatchMode::Tiles).unwrap();
    assert_eq!((set.len(), set.patch_size()), (4, 256));
    assert!(set.warnings.is_empty());

    let small = common::images(1, 64, 64, 1);
    let set = patches_from_images(&small, 128, 4, 0, PatchMode::Random);
    assert!(set.is_err() || set.unwrap().is_empty());
}

#[test]
fn config_round_trips_through_toml() {
    let cfg = common::toy_train_config();
    let text = cfg.to_toml().unwrap();
    assert_eq!(plc::training::TrainConfig::from_toml(&text).unwrap(), cfg);
    assert!(plc::training::TrainConfig::from_toml("bogus_key = 1").is_err());
    assert!(plc::training::TrainConfig::from_toml("patch_size = 100").is_err());
}

#[test]
fn readme_config_parses() {
    let readme =
        std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../README.md")).unwrap();
    let start = readme.find("```toml\n").unwrap() + 8;
    let len = readme[start..].find("```").unwrap();
    let cfg = plc::training::TrainConfig::from_toml(&readme[start..start + len]).unwrap();
    assert_eq!((cfg.patch_size, cfg.checkpoint_every), (64, 100));
}
