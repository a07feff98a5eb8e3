//! Distortion metrics, bpp accounting, BD-rate, and dataset evaluation.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::codec::{compress, CompressOptions, CompressedObject, RefineOptions, Registry};
use crate::error::{Error, Result};
use crate::imaging::ImageTensor;
use crate::losses;
use crate::ops;
use crate::refinement::{hard_evaluate, LatentState, Objective, RefineConfig};

mod bd;

pub use bd::{bd_rate, BdRate, BdVariant, RdCurve};

pub const PSNR_CAP_DB: f64 = 100.0;

/// Peak signal-to-noise ratio for signals in `[0, 1]`.
pub fn psnr(x: &Tensor, x_hat: &Tensor) -> Result<f64> {
    if x.dims() != x_hat.dims() {
        return Err(Error::shape(format!(
            "psnr operands differ: {:?} vs {:?}",
            x.dims(),
            x_hat.dims()
        )));
    }
    let mse = ops::scalar(&(x - x_hat)?.sqr()?.mean_all()?)?;
    if mse < 1e-10 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}

pub fn bpp(obj: &CompressedObject) -> f64 {
    obj.bpp()
}

pub struct EvalOptions<'a> {
    /// Also reported per image as `objective_loss` (hard-quantized).
    pub objective: Objective<'a>,
    pub refine: Option<&'a RefineConfig>,
    pub seed: u64,
    pub coder_id: u8,
    pub registry: Registry,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRow {
    pub name: String,
    pub height: usize,
    pub width: usize,
    pub bpp: f64,
    pub rate_quantized_bpp: f64,
    pub psnr: f64,
    pub charbonnier: f64,
    pub perceptual: f64,
    pub objective_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub images: usize,
    pub bpp: f64,
    pub rate_quantized_bpp: f64,
    pub psnr: f64,
    pub charbonnier: f64,
    pub perceptual: f64,
    pub objective_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Skipped {
    pub path: PathBuf,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub refined: bool,
    pub rows: Vec<ImageRow>,
    pub aggregate: Aggregate,
    pub skipped: Vec<Skipped>,
}

const IMAGE_EXTENSIONS: [&str; 10] = [
    "png", "jpg", "jpeg", "bmp", "gif", "tif", "tiff", "webp", "ppm", "pnm",
];

/// Image files directly inside `dir`, sorted by name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for e in entries {
        let p = e.map_err(|e| Error::io(dir, e))?.path();
        let ext = p
            .extension()
            .and_then(|s| s.to_str())
            .map(str::to_ascii_lowercase);
        if p.is_file() && ext.is_some_and(|x| IMAGE_EXTENSIONS.contains(&x.as_str())) {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

fn evaluate_image(
    name: String,
    image: &ImageTensor,
    opts: &EvalOptions,
    seed: u64,
) -> Result<ImageRow> {
    let model = opts.objective.model;
    let refine = opts.refine.map(|config| RefineOptions {
        objective: opts.objective,
        config,
        seed,
    });
    let c = compress(
        image,
        model,
        &CompressOptions {
            coder_id: opts.coder_id,
            registry: opts.registry.clone(),
            refine,
        },
    )?;
    let objective_loss = match &c.refinement {
        Some(outcome) => outcome.best.loss,
        None => {
            let x = image.pad_to_multiple(model.padding_multiple())?.batch()?;
            hard_evaluate(&x, &LatentState::initial(model, &x)?, &opts.objective)?
                .0
                .loss
        }
    };
    let x = image.batch()?;
    let x_hat = c.reconstruction.batch()?;
    let cfg = opts.objective.loss;
    Ok(ImageRow {
        name,
        height: image.height(),
        width: image.width(),
        bpp: c.object.bpp(),
        rate_quantized_bpp: c.rate.bpp(),
        psnr: psnr(&x, &x_hat)?,
        charbonnier: ops::scalar(&losses::charbonnier(&x, &x_hat, cfg.charbonnier_eps)?)?,
        perceptual: ops::scalar(&losses::perceptual(&x, &x_hat, opts.objective.extractor)?)?,
        objective_loss,
    })
}

fn aggregate(rows: &[ImageRow]) -> Aggregate {
    let n = rows.len() as f64;
    let mean = |f: fn(&ImageRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
    Aggregate {
        images: rows.len(),
        bpp: mean(|r| r.bpp),
        rate_quantized_bpp: mean(|r| r.rate_quantized_bpp),
        psnr: mean(|r| r.psnr),
        charbonnier: mean(|r| r.charbonnier),
        perceptual: mean(|r| r.perceptual),
        objective_loss: mean(|r| r.objective_loss),
    }
}

/// Compresses every image in `dir` and measures the reconstructions.
///
/// Images are spread over the available cores; each uses the refinement seed
/// `opts.seed + index`, so results do not depend on the thread count.
pub fn evaluate_dataset(dir: &Path, opts: &EvalOptions) -> Result<EvalReport> {
    let paths = list_images(dir)?;
    if paths.is_empty() {
        return Err(Error::Data(format!("no images in {}", dir.display())));
    }
    let threads = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
        .min(paths.len());
    let mut results: Vec<Option<Result<ImageRow>>> = (0..paths.len()).map(|_| None).collect();
    let mut skipped = Vec::new();
    let mut images = Vec::new();
    for (i, p) in paths.iter().enumerate() {
        match ImageTensor::load(p) {
            Ok(img) => images.push((i, img)),
            Err(e) => {
                log::warn!("skipping {}: {e}", p.display());
                skipped.push(Skipped {
                    path: p.clone(),
                    reason: e.to_string(),
                });
            }
        }
    }
    if images.is_empty() {
        return Err(Error::Data(format!(
            "no readable images in {}",
            dir.display()
        )));
    }
    let chunk = images.len().div_ceil(threads);
    std::thread::scope(|s| {
        let handles: Vec<_> = images
            .chunks(chunk)
            .map(|part| {
                let paths = &paths;
                s.spawn(move || {
                    part.iter()
                        .map(|(i, img)| {
                            let name = paths[*i]
                                .file_name()
                                .map(|n| n.to_string_lossy().into_owned())
                                .unwrap_or_default();
                            (*i, evaluate_image(name, img, opts, opts.seed + *i as u64))
                        })
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("evaluation thread panicked") {
                results[i] = Some(r);
            }
        }
    });
    let rows = results.into_iter().flatten().collect::<Result<Vec<_>>>()?;
    Ok(EvalReport {
        refined: opts.refine.is_some(),
        aggregate: aggregate(&rows),
        rows,
        skipped,
    })
}

impl EvalReport {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Data(e.to_string()))?;
        for row in &self.rows {
            w.serialize(row).map_err(|e| Error::Data(e.to_string()))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Data(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Per-image (bpp, PSNR) scatter with the aggregate marked.
    pub fn rd_svg(&self) -> String {
        let (w, h, m) = (480.0, 360.0, 48.0);
        let xs: Vec<f64> = self.rows.iter().map(|r| r.bpp).collect();
        let ys: Vec<f64> = self.rows.iter().map(|r| r.psnr).collect();
        let span = |v: &[f64]| {
            let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let pad = ((hi - lo) * 0.1).max(1e-3);
            (lo - pad, hi + pad)
        };
        let (x0, x1) = span(&xs);
        let (y0, y1) = span(&ys);
        let px = |x: f64| m + (x - x0) / (x1 - x0) * (w - 2.0 * m);
        let py = |y: f64| h - m - (y - y0) / (y1 - y0) * (h - 2.0 * m);
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#
        );
        let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
        let _ = writeln!(
            s,
            r#"<path d="M{m} {m} V{} H{}" fill="none" stroke="black"/>"#,
            h - m,
            w - m
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle">bpp ({x0:.3} to {x1:.3})</text>"#,
            w / 2.0,
            h - 12.0
        );
        let _ = writeln!(
            s,
            r#"<text x="14" y="{}" transform="rotate(-90 14 {})" text-anchor="middle">PSNR dB ({y0:.2} to {y1:.2})</text>"#,
            h / 2.0,
            h / 2.0
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                r#"<circle cx="{:.2}" cy="{:.2}" r="4" fill="steelblue"><title>{}</title></circle>"#,
                px(r.bpp),
                py(r.psnr),
                r.name
            );
        }
        let a = &self.aggregate;
        let _ = writeln!(
            s,
            r#"<rect x="{:.2}" y="{:.2}" width="8" height="8" fill="crimson"><title>mean</title></rect>"#,
            px(a.bpp) - 4.0,
            py(a.psnr) - 4.0
        );
        s.push_str("</svg>\n");
        s
    }

    pub fn write_svg(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.rd_svg()).map_err(|e| Error::io(path, e))
    }
}
