mod common;

use std::path::Path;

use plc::checkpoint::{Checkpoint, LossSettings};
use plc::codec::{Registry, REFERENCE_CODER_ID};
use plc::losses::ConvPyramid;
use plc::metrics::{evaluate_dataset, EvalOptions, EvalReport};
use plc::refinement::{Objective, RefineConfig};

fn dataset(dir: &Path, count: usize) {
    for (name, img) in common::images(count, 48, 64, 40) {
        img.save_png(&dir.join(format!("{name}.png"))).unwrap();
    }
}

fn run(
    ck: &Checkpoint,
    extractor: &ConvPyramid,
    dir: &Path,
    refine: Option<&RefineConfig>,
) -> plc::Result<EvalReport> {
    let opts = EvalOptions {
        objective: Objective {
            model: &ck.model,
            extractor,
            weights: ck.losses.weights,
            rate: ck.losses.rate_target,
            loss: &ck.losses.loss,
            roi: None,
        },
        refine,
        seed: 5,
        coder_id: REFERENCE_CODER_ID,
        registry: Registry::default(),
    };
    evaluate_dataset(dir, &opts)
}

fn checkpoint() -> (Checkpoint, ConvPyramid) {
    let ck = Checkpoint::new(common::toy_model(2), LossSettings::default());
    let extractor = ck.losses.extractor().unwrap();
    (ck, extractor)
}

#[test]
fn empty_directory_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let (ck, ex) = checkpoint();
    assert!(run(&ck, &ex, dir.path(), None).is_err());
    std::fs::write(dir.path().join("notes.txt"), "x").unwrap();
    assert!(run(&ck, &ex, dir.path(), None).is_err());
}

#[test]
fn aggregate_is_the_mean_of_rows() {
    let dir = tempfile::tempdir().unwrap();
    dataset(dir.path(), 3);
    std::fs::write(dir.path().join("broken.png"), b"not a png").unwrap();
    let (ck, ex) = checkpoint();
    let report = run(&ck, &ex, dir.path(), None).unwrap();
    assert_eq!(report.rows.len(), 3);
    assert_eq!(report.skipped.len(), 1);
    assert!(report.skipped[0].path.ends_with("broken.png"));
    let a = &report.aggregate;
    assert_eq!(a.images, 3);
    let mean = |f: fn(&plc::metrics::ImageRow) -> f64| report.rows.iter().map(f).sum::<f64>() / 3.0;
    assert!((a.bpp - mean(|r| r.bpp)).abs() < 1e-9);
    assert!((a.psnr - mean(|r| r.psnr)).abs() < 1e-9);
    assert!((a.charbonnier - mean(|r| r.charbonnier)).abs() < 1e-9);
    assert!((a.perceptual - mean(|r| r.perceptual)).abs() < 1e-9);
    assert!((a.objective_loss - mean(|r| r.objective_loss)).abs() < 1e-9);
    for r in &report.rows {
        assert_eq!((r.height, r.width), (48, 64));
        assert!(r.bpp >= r.rate_quantized_bpp);
    }
}

#[test]
fn single_image_aggregate_equals_its_row() {
    let dir = tempfile::tempdir().unwrap();
    dataset(dir.path(), 1);
    let (ck, ex) = checkpoint();
    let report = run(&ck, &ex, dir.path(), None).unwrap();
    let (r, a) = (&report.rows[0], &report.aggregate);
    assert_eq!(
        (a.bpp, a.psnr, a.objective_loss),
        (r.bpp, r.psnr, r.objective_loss)
    );
}

#[test]
fn refinement_never_raises_the_objective() {
    let dir = tempfile::tempdir().unwrap();
    dataset(dir.path(), 2);
    let (ck, ex) = checkpoint();
    let plain = run(&ck, &ex, dir.path(), None).unwrap();
    let cfg = RefineConfig {
        steps: 8,
        ..Default::default()
    };
    let refined = run(&ck, &ex, dir.path(), Some(&cfg)).unwrap();
    assert!(refined.refined && !plain.refined);
    for (p, r) in plain.rows.iter().zip(&refined.rows) {
        assert_eq!(p.name, r.name);
        assert!(
            r.objective_loss <= p.objective_loss,
            "{} > {}",
            r.objective_loss,
            p.objective_loss
        );
    }
    assert!(refined.aggregate.objective_loss <= plain.aggregate.objective_loss);
}

#[test]
fn reports_are_written() {
    let dir = tempfile::tempdir().unwrap();
    dataset(dir.path(), 2);
    let (ck, ex) = checkpoint();
    let report = run(&ck, &ex, dir.path(), None).unwrap();
    let out = tempfile::tempdir().unwrap();
    report.write_csv(&out.path().join("r.csv")).unwrap();
    report.write_json(&out.path().join("r.json")).unwrap();
    report.write_svg(&out.path().join("r.svg")).unwrap();
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.path().join("r.json")).unwrap()).unwrap();
    assert_eq!(json["rows"].as_array().unwrap().len(), 2);
    assert!(std::fs::read_to_string(out.path().join("r.svg"))
        .unwrap()
        .starts_with("<svg"));
}
