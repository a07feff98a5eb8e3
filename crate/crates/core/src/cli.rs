//! The `plc` command line.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error,
//! 3 missing checkpoint or other prerequisite, 4 entropy-coder backend unavailable,
//! 5 corrupt or mismatched data.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::checkpoint::Checkpoint;
use crate::codec::{
    compress, decompress, CompressOptions, CompressedObject, RefineOptions, Registry,
    RANS_CODER_ID, REFERENCE_CODER_ID,
};
use crate::error::Error;
use crate::imaging::{ImageTensor, Mask};
use crate::metrics::{bd_rate, evaluate_dataset, EvalOptions, RdCurve};
use crate::refinement::{write_trace_csv, Objective, RefineConfig, RoiConfig};
use crate::training::{
    extract_patches, initial_checkpoint, train_stage1, train_stage2, TrainConfig,
};

pub const CHECKPOINT_DIR_ENV: &str = "PLC_CHECKPOINT_DIR";

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_MISSING: i32 = 3;
pub const EXIT_BACKEND: i32 = 4;
pub const EXIT_CORRUPT: i32 = 5;

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CommandResult {
    pub exit_code: i32,
    pub report_paths: Vec<PathBuf>,
}

#[derive(Debug, Parser)]
#[command(name = "plc", version, about = "Perceptual learned image codec")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Stage {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Coder {
    Ref,
    Rans,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model from a TOML configuration.
    Train {
        /// Training configuration file.
        config: PathBuf,
        /// Which stage(s) to run.
        #[arg(long, value_enum, default_value = "both")]
        stage: Stage,
        /// Output directory; overrides the config and the environment.
        #[arg(long, env = CHECKPOINT_DIR_ENV)]
        checkpoint_dir: Option<PathBuf>,
    },
    /// Compress an image into a `.plc` file.
    Compress {
        input: PathBuf,
        output: PathBuf,
        /// Model checkpoint; defaults to the newest one in the checkpoint directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Rate target in bits per pixel (refinement only).
        #[arg(long)]
        target_bpp: Option<f64>,
        /// Optimize the latents for this image before coding.
        #[arg(long)]
        refine: bool,
        /// Refinement iterations.
        #[arg(long, default_value_t = 2000)]
        refine_steps: usize,
        /// Foreground mask image (white = region of interest); needs --refine.
        #[arg(long)]
        roi_mask: Option<PathBuf>,
        /// Foreground distortion weight.
        #[arg(long, default_value_t = 1.0)]
        fg_weight: f64,
        /// Background distortion weight.
        #[arg(long, default_value_t = 1.0)]
        bg_weight: f64,
        /// Entropy coder.
        #[arg(long, value_enum, default_value = "ref")]
        coder: Coder,
        /// Refinement trace CSV; defaults to `<output>.trace.csv`.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Refinement random seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, env = CHECKPOINT_DIR_ENV, hide_env_values = true)]
        checkpoint_dir: Option<PathBuf>,
    },
    /// Decode a `.plc` file to PNG.
    Decompress {
        input: PathBuf,
        output: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, env = CHECKPOINT_DIR_ENV, hide_env_values = true)]
        checkpoint_dir: Option<PathBuf>,
    },
    /// Compress every image in a directory and report rate and distortion.
    Eval {
        dir: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Where report.csv, report.json and rd.svg go.
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
        #[arg(long)]
        refine: bool,
        #[arg(long, default_value_t = 2000)]
        refine_steps: usize,
        #[arg(long)]
        target_bpp: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, env = CHECKPOINT_DIR_ENV, hide_env_values = true)]
        checkpoint_dir: Option<PathBuf>,
    },
    /// Bjøntegaard-delta rate of a candidate RD curve against a reference.
    Bdrate {
        /// CSV with `bpp,quality` rows.
        reference: PathBuf,
        candidate: PathBuf,
        /// Quality decreases as images get better (e.g. FID).
        #[arg(long)]
        lower_is_better: bool,
    },
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::InvalidArgument(_) | Error::Config(_) => EXIT_USAGE,
        Error::MissingArtifact(_) => EXIT_MISSING,
        Error::BackendUnavailable(_) => EXIT_BACKEND,
        Error::Corrupt(_) | Error::ModelMismatch { .. } => EXIT_CORRUPT,
        _ => EXIT_FAILURE,
    }
}

fn hint(err: &Error) -> Option<&'static str> {
    match err {
        Error::BackendUnavailable(RANS_CODER_ID) => Some(
            "the rANS backend is not part of this build; use --coder ref (the reference range coder)",
        ),
        Error::MissingArtifact(_) => {
            Some("pass --checkpoint or set PLC_CHECKPOINT_DIR to a directory with stage1.ckpt/stage2.ckpt")
        }
        Error::ModelMismatch { .. } => Some("decode with the checkpoint the file was compressed with"),
        _ => None,
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> CommandResult
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            return CommandResult {
                exit_code: code,
                report_paths: vec![],
            };
        }
    };
    match dispatch(cli.command) {
        Ok(paths) => CommandResult {
            exit_code: EXIT_OK,
            report_paths: paths,
        },
        Err(e) => {
            eprintln!("error: {e}");
            if let Some(h) = hint(&e) {
                eprintln!("hint: {h}");
            }
            CommandResult {
                exit_code: exit_code(&e),
                report_paths: vec![],
            }
        }
    }
}

fn resolve_checkpoint(explicit: Option<PathBuf>, dir: Option<PathBuf>) -> crate::Result<PathBuf> {
    if let Some(p) = explicit {
        return Ok(p);
    }
    let dir = dir.ok_or_else(|| {
        Error::MissingArtifact("no --checkpoint given and PLC_CHECKPOINT_DIR is unset".into())
    })?;
    for name in ["stage2.ckpt", "stage1.ckpt"] {
        let p = dir.join(name);
        if p.exists() {
            return Ok(p);
        }
    }
    Err(Error::MissingArtifact(format!(
        "no stage1.ckpt or stage2.ckpt in {}",
        dir.display()
    )))
}

fn read_input_image(path: &Path) -> crate::Result<ImageTensor> {
    if !path.exists() {
        return Err(Error::invalid(format!(
            "input {} does not exist",
            path.display()
        )));
    }
    ImageTensor::load(path)
}

fn dispatch(cmd: Command) -> crate::Result<Vec<PathBuf>> {
    match cmd {
        Command::Train {
            config,
            stage,
            checkpoint_dir,
        } => cmd_train(&config, stage, checkpoint_dir),
        Command::Compress {
            input,
            output,
            checkpoint,
            target_bpp,
            refine,
            refine_steps,
            roi_mask,
            fg_weight,
            bg_weight,
            coder,
            trace,
            seed,
            checkpoint_dir,
        } => {
            if roi_mask.is_some() && !refine {
                return Err(Error::invalid("--roi-mask only takes effect with --refine"));
            }
            let coder_id = match coder {
                Coder::Ref => REFERENCE_CODER_ID,
                Coder::Rans => RANS_CODER_ID,
            };
            let registry = Registry::default();
            registry.get(coder_id)?;
            let image = read_input_image(&input)?;
            let ck = Checkpoint::load(&resolve_checkpoint(checkpoint, checkpoint_dir)?)?;
            let extractor = ck.losses.extractor()?;
            let roi = match &roi_mask {
                Some(p) => {
                    let mask = Mask::load(p)?;
                    if (mask.height(), mask.width()) != (image.height(), image.width()) {
                        return Err(Error::invalid(format!(
                            "mask is {}x{} but the image is {}x{}",
                            mask.width(),
                            mask.height(),
                            image.width(),
                            image.height()
                        )));
                    }
                    let padded = mask.pad_to_multiple(ck.model.padding_multiple());
                    Some(RoiConfig::new(padded, fg_weight, bg_weight)?)
                }
                None => None,
            };
            let refine_cfg = RefineConfig {
                steps: refine_steps,
                ..Default::default()
            };
            let mut rate = ck.losses.rate_target;
            if let Some(t) = target_bpp {
                if !(t.is_finite() && t > 0.0) {
                    return Err(Error::invalid("--target-bpp must be positive"));
                }
                rate = rate.with_tau(t);
            }
            let objective = Objective {
                model: &ck.model,
                extractor: &extractor,
                weights: ck.losses.weights,
                rate,
                loss: &ck.losses.loss,
                roi: roi.as_ref(),
            };
            let opts = CompressOptions {
                coder_id,
                registry,
                refine: refine.then_some(RefineOptions {
                    objective,
                    config: &refine_cfg,
                    seed,
                }),
            };
            let c = compress(&image, &ck.model, &opts)?;
            std::fs::write(&output, c.object.to_bytes()).map_err(|e| Error::io(&output, e))?;
            println!("bpp: {:.4}", c.object.bpp());
            let mut paths = vec![output.clone()];
            if let Some(outcome) = &c.refinement {
                let trace = trace.unwrap_or_else(|| {
                    let mut s = output.clone().into_os_string();
                    s.push(".trace.csv");
                    PathBuf::from(s)
                });
                write_trace_csv(&trace, &outcome.trace)?;
                println!("trace: {}", trace.display());
                paths.push(trace);
            }
            Ok(paths)
        }
        Command::Decompress {
            input,
            output,
            checkpoint,
            checkpoint_dir,
        } => {
            let bytes = std::fs::read(&input).map_err(|e| Error::io(&input, e))?;
            let obj = CompressedObject::from_bytes(&bytes)?;
            Registry::default().get(obj.header.coder_id)?;
            let ck = Checkpoint::load(&resolve_checkpoint(checkpoint, checkpoint_dir)?)?;
            let d = decompress(&obj, &ck.model, &Registry::default())?;
            d.image.save_png(&output)?;
            println!("wrote {}", output.display());
            Ok(vec![output])
        }
        Command::Eval {
            dir,
            checkpoint,
            out_dir,
            refine,
            refine_steps,
            target_bpp,
            seed,
            checkpoint_dir,
        } => {
            let ck = Checkpoint::load(&resolve_checkpoint(checkpoint, checkpoint_dir)?)?;
            let extractor = ck.losses.extractor()?;
            let refine_cfg = RefineConfig {
                steps: refine_steps,
                ..Default::default()
            };
            let mut rate = ck.losses.rate_target;
            if let Some(t) = target_bpp {
                rate = rate.with_tau(t);
            }
            let opts = EvalOptions {
                objective: Objective {
                    model: &ck.model,
                    extractor: &extractor,
                    weights: ck.losses.weights,
                    rate,
                    loss: &ck.losses.loss,
                    roi: None,
                },
                refine: refine.then_some(&refine_cfg),
                seed,
                coder_id: REFERENCE_CODER_ID,
                registry: Registry::default(),
            };
            let report = evaluate_dataset(&dir, &opts)?;
            std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
            let paths = vec![
                out_dir.join("report.csv"),
                out_dir.join("report.json"),
                out_dir.join("rd.svg"),
            ];
            report.write_csv(&paths[0])?;
            report.write_json(&paths[1])?;
            report.write_svg(&paths[2])?;
            let a = &report.aggregate;
            println!(
                "images: {} (skipped {})  bpp: {:.4}  psnr: {:.2} dB  charbonnier: {:.5}  perceptual: {:.5}",
                a.images,
                report.skipped.len(),
                a.bpp,
                a.psnr,
                a.charbonnier,
                a.perceptual
            );
            for p in &paths {
                println!("wrote {}", p.display());
            }
            Ok(paths)
        }
        Command::Bdrate {
            reference,
            candidate,
            lower_is_better,
        } => {
            let load = |p: &Path| {
                if !p.exists() {
                    return Err(Error::invalid(format!("{} does not exist", p.display())));
                }
                RdCurve::from_csv(p, !lower_is_better)
            };
            let bd = bd_rate(&load(&reference)?, &load(&candidate)?)?;
            println!(
                "BD-rate: {} ({} fit)",
                format_percent(bd.percent),
                bd.variant
            );
            Ok(vec![])
        }
    }
}

/// Signed percentage with two decimals; never prints `-0.00`.
pub fn format_percent(p: f64) -> String {
    let s = format!("{p:.2}");
    if s == "-0.00" {
        "0.00%".into()
    } else {
        format!("{s}%")
    }
}

fn cmd_train(
    config: &Path,
    stage: Stage,
    checkpoint_dir: Option<PathBuf>,
) -> crate::Result<Vec<PathBuf>> {
    if !config.exists() {
        return Err(Error::Config(format!(
            "config file {} not found",
            config.display()
        )));
    }
    let mut cfg = TrainConfig::load(config)?;
    let base = config.parent().unwrap_or(Path::new("."));
    let resolve = |p: &Path| {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            base.join(p)
        }
    };
    let out =
        match (checkpoint_dir, &cfg.paths.output_dir) {
            (Some(d), _) => d,
            (None, Some(d)) => resolve(d),
            (None, None) => return Err(Error::Config(
                "no output directory: set paths.output_dir, --checkpoint-dir or PLC_CHECKPOINT_DIR"
                    .into(),
            )),
        };
    cfg.paths.output_dir = Some(out.clone());
    let stage1_path = out.join("stage1.ckpt");
    let stage1_start = if stage == Stage::Two {
        if !stage1_path.exists() {
            return Err(Error::MissingArtifact(format!(
                "stage 2 needs {}; run --stage 1 first",
                stage1_path.display()
            )));
        }
        Some(Checkpoint::load(&stage1_path)?)
    } else {
        None
    };
    let data_dir = cfg
        .paths
        .data_dir
        .as_deref()
        .map(resolve)
        .ok_or_else(|| Error::Config("paths.data_dir is required for training".into()))?;
    let data = extract_patches(
        &data_dir,
        cfg.patch_size,
        cfg.patch_count,
        cfg.seed,
        cfg.patch_mode,
    )?;
    let mut paths = Vec::new();
    let stage1 = match stage1_start {
        Some(ck) => ck,
        None => {
            let o = train_stage1(&cfg, &data, initial_checkpoint(&cfg)?)?;
            if let Some(p) = o.path {
                println!("stage 1 checkpoint: {}", p.display());
                paths.push(p);
            }
            o.checkpoint
        }
    };
    if stage != Stage::One {
        let o = train_stage2(&cfg, &data, stage1)?;
        if let Some(p) = o.path {
            println!("stage 2 checkpoint: {}", p.display());
            paths.push(p);
        }
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn help_lists_every_flag() {
        let mut cmd = Cli::command();
        let compress = cmd
            .find_subcommand_mut("compress")
            .unwrap()
            .render_long_help()
            .to_string();
        for flag in [
            "--checkpoint",
            "--target-bpp",
            "--refine",
            "--refine-steps",
            "--roi-mask",
            "--fg-weight",
            "--bg-weight",
            "--coder",
        ] {
            assert!(
                compress.contains(flag),
                "{flag} missing from compress --help"
            );
        }
        let train = cmd
            .find_subcommand_mut("train")
            .unwrap()
            .render_long_help()
            .to_string();
        assert!(train.contains("--stage"));
        assert!(train.contains(CHECKPOINT_DIR_ENV));
    }

    #[test]
    fn percent_formatting() {
        assert_eq!(format_percent(-1e-9), "0.00%");
        assert_eq!(format_percent(-10.0000001), "-10.00%");
        assert_eq!(format_percent(3.14159), "3.14%");
    }

    #[test]
    fn error_classes_map_to_exit_codes() {
        assert_eq!(exit_code(&Error::Config("x".into())), 2);
        assert_eq!(exit_code(&Error::MissingArtifact("x".into())), 3);
        assert_eq!(exit_code(&Error::BackendUnavailable(2)), 4);
        assert_eq!(exit_code(&Error::Corrupt("x".into())), 5);
        assert_eq!(exit_code(&Error::Data("x".into())), 1);
    }
}
