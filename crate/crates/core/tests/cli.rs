mod common;

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use plc::checkpoint::Checkpoint;
use plc::codec::{decompress, CompressedObject, Registry};
use plc::imaging::{ImageTensor, Mask};

fn plc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_plc"))
        .args(args)
        .env_remove(plc::cli::CHECKPOINT_DIR_ENV)
        .output()
        .unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Fixture {
    fn ckpt_dir(&self) -> PathBuf {
        self.root.join("ckpt")
    }
    fn image(&self) -> PathBuf {
        self.root.join("data/synthetic0.png")
    }
}

fn write_config(root: &Path, out_dir: Option<&str>) -> PathBuf {
    let mut cfg = common::toy_train_config();
    cfg.stage1_steps = 4;
    cfg.stage2_steps = 3;
    cfg.patch_count = 8;
    cfg.paths.data_dir = Some("data".into());
    cfg.paths.output_dir = out_dir.map(PathBuf::from);
    let path = root.join("train.toml");
    std::fs::write(&path, cfg.to_toml().unwrap()).unwrap();
    path
}

/// Two-stage CLI training on a handful of synthetic PNGs, shared by the tests.
fn trained() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        std::fs::create_dir_all(root.join("data")).unwrap();
        for (name, img) in common::images(3, 80, 96, 5) {
            img.save_png(&root.join("data").join(format!("{name}.png")))
                .unwrap();
        }
        let config = write_config(&root, Some("ckpt"));
        let out = plc(&["train", s(&config)]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        Fixture { _dir: dir, root }
    })
}

#[test]
fn both_stages_write_checkpoints() {
    let f = trained();
    for name in [
        "stage1.ckpt",
        "stage2.ckpt",
        "stage1-log.csv",
        "stage2-log.csv",
    ] {
        assert!(f.ckpt_dir().join(name).exists(), "{name}");
    }
    let s1 = Checkpoint::load(&f.ckpt_dir().join("stage1.ckpt")).unwrap();
    let s2 = Checkpoint::load(&f.ckpt_dir().join("stage2.ckpt")).unwrap();
    assert_eq!((s1.stage, s1.step, s2.stage, s2.step), (1, 4, 2, 3));
    assert!(s2.discriminator.is_some() && s2.codebook.is_some());
}

#[test]
fn missing_config_is_a_usage_error() {
    let out = plc(&["train", "/nonexistent/train.toml"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn stage_two_needs_stage_one() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), None);
    let out_dir = dir.path().join("empty");
    let out = plc(&[
        "train",
        s(&config),
        "--stage",
        "2",
        "--checkpoint-dir",
        s(&out_dir),
    ]);
    assert_eq!(code(&out), 3);
}

#[test]
fn compress_is_deterministic_and_decodes() {
    let f = trained();
    let dir = tempfile::tempdir().unwrap();
    let ck = f.ckpt_dir().join("stage2.ckpt");
    let mut printed = Vec::new();
    for name in ["a.plc", "b.plc"] {
        let target = dir.path().join(name);
        let out = plc(&[
            "compress",
            s(&f.image()),
            s(&target),
            "--checkpoint",
            s(&ck),
        ]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        let line = stdout(&out);
        let bpp = line.trim().strip_prefix("bpp: ").unwrap();
        assert_eq!(bpp.split('.').nth(1).unwrap().len(), 4);
        printed.push(bpp.to_string());
    }
    assert_eq!(printed[0], printed[1]);
    let a = std::fs::read(dir.path().join("a.plc")).unwrap();
    assert_eq!(a, std::fs::read(dir.path().join("b.plc")).unwrap());
    let bits = 8.0 * a.len() as f64 / (80.0 * 96.0);
    assert_eq!(format!("{bits:.4}"), printed[0]);

    let png = dir.path().join("a.png");
    let out = plc(&[
        "decompress",
        s(&dir.path().join("a.plc")),
        s(&png),
        "--checkpoint",
        s(&ck),
    ]);
    assert_eq!(code(&out), 0);
    let checkpoint = Checkpoint::load(&ck).unwrap();
    let obj = CompressedObject::from_bytes(&a).unwrap();
    let direct = decompress(&obj, &checkpoint.model, &Registry::default()).unwrap();
    let decoded = ImageTensor::load(&png).unwrap();
    assert_eq!(decoded.to_rgb8().unwrap(), direct.image.to_rgb8().unwrap());
}

#[test]
fn checkpoint_directory_comes_from_the_environment() {
    let f = trained();
    let dir = tempfile::tempdir().unwrap();
    let target = dir.path().join("x.plc");
    let out = Command::new(env!("CARGO_BIN_EXE_plc"))
        .args(["compress", s(&f.image()), s(&target)])
        .env(plc::cli::CHECKPOINT_DIR_ENV, f.ckpt_dir())
        .output()
        .unwrap();
    assert_eq!(code(&out), 0);
    let out = plc(&["compress", s(&f.image()), s(&target)]);
    assert_eq!(code(&out), 3);
}

#[test]
fn refine_writes_a_trace() {
    let f = trained();
    let dir = tempfile::tempdir().unwrap();
    let target = dir.path().join("r.plc");
    let mask = dir.path().join("m.png");
    let mut values = vec![0.0; 80 * 96];
    values[..40 * 96].iter_mut().for_each(|v| *v = 1.0);
    Mask::new(80, 96, values)
        .unwrap()
        .to_gray()
        .save(&mask)
        .unwrap();
    let ck = f.ckpt_dir().join("stage2.ckpt");
    let out = plc(&[
        "compress",
        s(&f.image()),
        s(&target),
        "--checkpoint",
        s(&ck),
        "--refine",
        "--refine-steps",
        "3",
        "--roi-mask",
        s(&mask),
        "--fg-weight",
        "2",
        "--bg-weight",
        "0.5",
        "--target-bpp",
        "0.5",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let trace = dir.path().join("r.plc.trace.csv");
    assert!(stdout(&out).contains("trace:"));
    let rows = std::fs::read_to_string(trace).unwrap().lines().count();
    assert!(rows >= 4, "{rows}");
}

#[test]
fn rans_backend_is_unavailable() {
    let dir = tempfile::tempdir().unwrap();
    let out = plc(&[
        "compress",
        "missing.png",
        s(&dir.path().join("o.plc")),
        "--coder",
        "rans",
    ]);
    assert_eq!(code(&out), 4);
    assert!(String::from_utf8_lossy(&out.stderr).contains("--coder ref"));
}

#[test]
fn mask_without_refine_is_rejected() {
    let f = trained();
    let out = plc(&[
        "compress",
        s(&f.image()),
        "/tmp/unused.plc",
        "--roi-mask",
        s(&f.image()),
    ]);
    assert_eq!(code(&out), 2);
}

#[test]
fn damaged_files_exit_five() {
    let f = trained();
    let dir = tempfile::tempdir().unwrap();
    let target = dir.path().join("c.plc");
    let ck = f.ckpt_dir().join("stage1.ckpt");
    assert_eq!(
        code(&plc(&[
            "compress",
            s(&f.image()),
            s(&target),
            "--checkpoint",
            s(&ck)
        ])),
        0
    );
    let mut bytes = std::fs::read(&target).unwrap();
    bytes.truncate(bytes.len() - 3);
    let broken = dir.path().join("broken.plc");
    std::fs::write(&broken, &bytes).unwrap();
    let png = dir.path().join("o.png");
    assert_eq!(
        code(&plc(&[
            "decompress",
            s(&broken),
            s(&png),
            "--checkpoint",
            s(&ck)
        ])),
        5
    );
    let other = f.ckpt_dir().join("stage2.ckpt");
    let out = plc(&["decompress", s(&target), s(&png), "--checkpoint", s(&other)]);
    assert_eq!(code(&out), 5);
}

#[test]
fn eval_writes_reports() {
    let f = trained();
    let dir = tempfile::tempdir().unwrap();
    let ck = f.ckpt_dir().join("stage2.ckpt");
    let out = plc(&[
        "eval",
        s(&f.root.join("data")),
        "--checkpoint",
        s(&ck),
        "--out-dir",
        s(dir.path()),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for name in ["report.csv", "report.json", "rd.svg"] {
        assert!(dir.path().join(name).exists(), "{name}");
    }
    let csv = std::fs::read_to_string(dir.path().join("report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
}

fn write_curve(path: &Path, points: &[(f64, f64)]) {
    let text: String = points.iter().map(|(r, q)| format!("{r},{q}\n")).collect();
    std::fs::write(path, format!("bpp,psnr\n{text}")).unwrap();
}

#[test]
fn bdrate_command() {
    let dir = tempfile::tempdir().unwrap();
    let reference: Vec<(f64, f64)> = [0.1, 0.2, 0.4, 0.8]
        .iter()
        .map(|&r| (r, 30.0 + 4.0 * f64::ln(r)))
        .collect();
    let cheaper: Vec<(f64, f64)> = reference.iter().map(|&(r, q)| (0.9 * r, q)).collect();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    write_curve(&a, &reference);
    write_curve(&b, &cheaper);
    let same = plc(&["bdrate", s(&a), s(&a)]);
    assert_eq!(code(&same), 0);
    assert_eq!(stdout(&same).trim(), "BD-rate: 0.00% (cubic fit)");
    let out = plc(&["bdrate", s(&a), s(&b)]);
    assert_eq!(stdout(&out).trim(), "BD-rate: -10.00% (cubic fit)");
    assert_eq!(code(&plc(&["bdrate", s(&a), "/nonexistent.csv"])), 2);
}

#[test]
fn help_and_readme_list_every_flag() {
    let readme =
        std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("../../README.md"))
            .unwrap();
    for sub in ["train", "compress", "decompress", "eval", "bdrate"] {
        let out = plc(&[sub, "--help"]);
        assert_eq!(code(&out), 0);
        let help = stdout(&out);
        for flag in help.split_whitespace().filter(|w| w.starts_with("--")) {
            let flag = flag
                .trim_end_matches([',', '>', '.'])
                .split(['=', '<'])
                .next()
                .unwrap();
            if flag == "--help" || flag == "--version" {
                continue;
            }
            assert!(
                readme.contains(flag),
                "README does not mention {flag} ({sub})"
            );
        }
    }
    assert_eq!(code(&plc(&["--bogus"])), 2);
}
