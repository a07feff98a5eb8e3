//! Per-image latent refinement with stochastic Gumbel annealing (SGA).
//!
//! Starting from the encoder's latents, `y`, `z` and a per-channel log quantization
//! step are optimized against a rate-constrained distortion while the rounding is
//! annealed from soft to hard. Each step also evaluates the state with true hard
//! quantization and coder bits; the best such state is what gets returned.
//!
//! Rounding of `y` is mean-centred: in step units `u = y / delta`, the soft value is
//! `mean_u + sga(u - mean_u)`, which anneals to exactly the symbols the codec emits.

use std::path::Path;

use candle_core::{Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::entropy_model::{bits_of, gaussian_likelihood, SCALE_FLOOR};
use crate::error::{Error, Result};
use crate::imaging::Mask;
use crate::losses::{
    self, ensemble, DistortionTerms, DistortionWeights, FeatureExtractor, LossConfig,
    RateTargetConfig,
};
use crate::model::{Model, Quantized};
use crate::ops;

const ATANH_CLIP: f64 = 1.0 - 1e-5;

fn atanh(t: &Tensor) -> Result<Tensor> {
    let num = t.affine(1.0, 1.0)?;
    let den = t.affine(-1.0, 1.0)?;
    Ok(((num / den)?.log()? * 0.5)?)
}

/// Stochastic rounding of `v` to `floor(v)` or `ceil(v)`, differentiable in `v`.
///
/// Each candidate `r` gets log-weight `-atanh(|v - r|) / T`; soft weights come from a
/// Gumbel-softmax at temperature `T`.
pub fn sga_round<R: Rng>(v: &Tensor, temperature: f64, rng: &mut R) -> Result<Tensor> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::invalid(format!(
            "SGA temperature must be positive, got {temperature}"
        )));
    }
    let floor = v.floor()?.detach();
    let ceil = v.ceil()?.detach();
    let d_floor = (v - &floor)?.clamp(0.0, ATANH_CLIP)?;
    let d_ceil = (&ceil - v)?.clamp(0.0, ATANH_CLIP)?;
    let inv_t = 1.0 / temperature;
    let logit_floor = (atanh(&d_floor)? * -inv_t)?;
    let logit_ceil = (atanh(&d_ceil)? * -inv_t)?;
    let g_floor = ops::gumbel_like(v, rng)?;
    let g_ceil = ops::gumbel_like(v, rng)?;
    // two-way softmax of (logit + g) / T, written as a sigmoid of the difference
    let diff = (((logit_ceil + g_ceil)? - (logit_floor + g_floor)?)? * inv_t)?;
    let w_ceil = candle_nn::ops::sigmoid(&diff)?;
    Ok((&floor + (w_ceil * (&ceil - &floor)?)?)?)
}

/// Temperature schedule: flat at `t_max`, then exponential decay floored at `t_min`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnnealSchedule {
    pub t_max: f64,
    pub t_min: f64,
    pub decay_start: usize,
    pub decay_rate: f64,
}

impl AnnealSchedule {
    /// Defaults for a run of `steps`: decay from 20% of the run, reaching `t_min` at the end.
    pub fn for_steps(steps: usize) -> Self {
        let (t_max, t_min) = (0.5, 1e-3);
        let decay_start = steps / 5;
        let span = (steps - decay_start).max(1) as f64;
        Self {
            t_max,
            t_min,
            decay_start,
            decay_rate: (t_max / t_min).ln() / span,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.t_min > 0.0 && self.t_max >= self.t_min && self.decay_rate > 0.0) {
            return Err(Error::Config(format!("invalid anneal schedule {self:?}")));
        }
        Ok(())
    }

    pub fn temperature(&self, step: usize) -> f64 {
        if step < self.decay_start {
            return self.t_max;
        }
        let t = self.t_max * (-self.decay_rate * (step - self.decay_start) as f64).exp();
        t.max(self.t_min)
    }
}

/// Foreground mask and the weights of the two regions.
#[derive(Debug, Clone, PartialEq)]
pub struct RoiConfig {
    pub mask: Mask,
    pub lambda_fg: f64,
    pub lambda_bg: f64,
}

impl RoiConfig {
    pub fn new(mask: Mask, lambda_fg: f64, lambda_bg: f64) -> Result<Self> {
        if !(lambda_fg >= 0.0 && lambda_bg >= 0.0) {
            return Err(Error::Config("ROI weights must be non-negative".into()));
        }
        Ok(Self {
            mask,
            lambda_fg,
            lambda_bg,
        })
    }

    fn check(&self, height: usize, width: usize) -> Result<()> {
        if self.mask.height() != height || self.mask.width() != width {
            return Err(Error::shape(format!(
                "mask is {}x{}, image is {height}x{width}",
                self.mask.height(),
                self.mask.width()
            )));
        }
        Ok(())
    }
}

/// Foreground and background distortion terms of `x` vs `x_hat` under `mask`.
///
/// The Charbonnier map is weighted by `m` (resp. `1 - m`) and averaged over all
/// pixels; perceptual and style terms compare the masked composites `x * m` and
/// `x_hat * m` (resp. the complement).
pub fn roi_terms(
    x: &Tensor,
    x_hat: &Tensor,
    mask: &Mask,
    extractor: &dyn FeatureExtractor,
    cfg: &LossConfig,
) -> Result<(DistortionTerms, DistortionTerms)> {
    let (_, _, h, w) = x.dims4()?;
    if mask.height() != h || mask.width() != w {
        return Err(Error::shape(format!(
            "mask is {}x{}, image is {h}x{w}",
            mask.height(),
            mask.width()
        )));
    }
    let m = mask.tensor()?;
    let inv = m.affine(-1.0, 1.0)?;
    let map = losses::charbonnier_map(x, x_hat, cfg.charbonnier_eps)?;
    let region = |weight: &Tensor| -> Result<DistortionTerms> {
        let xm = x.broadcast_mul(weight)?;
        let ym = x_hat.broadcast_mul(weight)?;
        let fx = extractor.features(&xm)?;
        let fy = extractor.features(&ym)?;
        let mut t = DistortionTerms::from_features(&xm, &ym, &fx, &fy, cfg)?;
        t.rec = map.broadcast_mul(weight)?.mean_all()?;
        Ok(t)
    };
    Ok((region(&m)?, region(&inv)?))
}

/// `lambda_fg * D_fg + lambda_bg * D_bg` with each `D` the weighted ensemble.
pub fn roi_distortion(
    fg: &DistortionTerms,
    bg: &DistortionTerms,
    roi: &RoiConfig,
    weights: &DistortionWeights,
) -> Result<Tensor> {
    let d_fg = (ensemble(fg, weights)? * roi.lambda_fg)?;
    let d_bg = (ensemble(bg, weights)? * roi.lambda_bg)?;
    Ok((d_fg + d_bg)?)
}

/// Everything the refinement objective needs besides the latents.
#[derive(Clone, Copy)]
pub struct Objective<'a> {
    pub model: &'a Model,
    pub extractor: &'a dyn FeatureExtractor,
    pub weights: DistortionWeights,
    pub rate: RateTargetConfig,
    pub loss: &'a LossConfig,
    pub roi: Option<&'a RoiConfig>,
}

impl Objective<'_> {
    /// Distortion of a reconstruction; the adversarial weight is ignored.
    pub fn distortion(&self, x: &Tensor, x_hat: &Tensor) -> Result<Tensor> {
        let weights = self.weights.without_adversarial();
        match self.roi {
            Some(roi) => {
                let (_, _, h, w) = x.dims4()?;
                roi.check(h, w)?;
                let (fg, bg) = roi_terms(x, x_hat, &roi.mask, self.extractor, self.loss)?;
                roi_distortion(&fg, &bg, roi, &weights)
            }
            None => {
                let terms = DistortionTerms::compute(x, x_hat, self.extractor, self.loss)?;
                ensemble(&terms, &weights)
            }
        }
    }
}

/// Continuous latents being optimized.
#[derive(Debug, Clone)]
pub struct LatentState {
    pub y: Tensor,
    pub z: Tensor,
    /// Natural log of the per-channel quantization step.
    pub log_delta: Vec<f64>,
    pub step: usize,
}

impl LatentState {
    /// Amortized initialization: encoder latents with unit steps.
    pub fn initial(model: &Model, x: &Tensor) -> Result<Self> {
        let (y, z) = model.encode_latents(x)?;
        Ok(Self {
            y: y.detach(),
            z: z.detach(),
            log_delta: vec![0.0; model.latent_channels()],
            step: 0,
        })
    }

    pub fn delta(&self) -> Vec<f64> {
        self.log_delta.iter().map(|l| l.exp()).collect()
    }

    /// Steps as the container stores them (16-bit floats).
    pub fn stored_delta(&self) -> Vec<f64> {
        self.delta().into_iter().map(ops::round_to_f16).collect()
    }
}

/// How `y` and `z` are rounded inside [`refinement_loss`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Rounding {
    Sga {
        temperature: f64,
    },
    /// Deterministic mean-centred rounding (no gradient through the rounding).
    Hard,
}

/// Scalar loss and its rate component.
#[derive(Debug, Clone)]
pub struct SoftLoss {
    pub loss: Tensor,
    pub rate_bpp: f64,
    pub distortion: f64,
}

fn round_with<R: Rng>(v: &Tensor, rounding: Rounding, rng: &mut R) -> Result<Tensor> {
    match rounding {
        Rounding::Sga { temperature } => sga_round(v, temperature, rng),
        Rounding::Hard => Ok(v.round()?.detach()),
    }
}

/// Rate-constrained distortion of the soft-rounded latents.
///
/// `y`, `z` are `[1, C, h, w]` tensors and `log_delta` is `[1, C_y, 1, 1]`; all three
/// may be variables. `lambda` is the already-selected multiplier.
pub fn refinement_loss<R: Rng>(
    x: &Tensor,
    y: &Tensor,
    z: &Tensor,
    log_delta: &Tensor,
    objective: &Objective,
    lambda: f64,
    rounding: Rounding,
    rng: &mut R,
) -> Result<SoftLoss> {
    let model = objective.model;
    let (n, _, h, w) = x.dims4()?;
    let pixels = (n * h * w) as f64;
    let delta = log_delta.exp()?;

    let z_bar = round_with(z, rounding, rng)?;
    let mut bits = bits_of(&model.entropy().hyper().likelihood(&z_bar)?)?;
    let ctx = model.context(&z_bar)?;

    let spec = model.entropy().groups();
    let mut hats: Vec<Tensor> = Vec::with_capacity(spec.num_groups());
    for (g, range) in spec.ranges().iter().enumerate() {
        let yg = y.narrow(1, range.start, range.len())?;
        let dg = delta.narrow(1, range.start, range.len())?;
        let p = model.entropy().predict_params(g, &ctx, &hats)?;
        let mean_u = p.mean.broadcast_div(&dg)?;
        let scale_u = p.scale.broadcast_div(&dg)?.maximum(SCALE_FLOOR)?;
        let offset = round_with(&(yg.broadcast_div(&dg)? - &mean_u)?, rounding, rng)?;
        bits = (bits + bits_of(&gaussian_likelihood(&offset, &scale_u)?)?)?;
        hats.push((&mean_u + offset)?.broadcast_mul(&dg)?);
    }
    let y_tilde = spec.concat(&hats)?;
    let x_hat = model.transforms().synthesize(&y_tilde)?;
    let distortion = objective.distortion(x, &x_hat)?;
    let rate = (bits / pixels)?;
    let loss = ((&rate * lambda)? + &distortion)?;
    Ok(SoftLoss {
        rate_bpp: ops::scalar(&rate)?,
        distortion: ops::scalar(&distortion)?,
        loss,
    })
}

/// A state evaluated the way the codec would emit it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HardEval {
    pub loss: f64,
    pub bpp: f64,
    pub distortion: f64,
    pub lambda: f64,
}

/// Hard mean-centred quantization with the stored steps, exact coder bits, and the
/// objective at that point.
pub fn hard_evaluate(
    x: &Tensor,
    state: &LatentState,
    objective: &Objective,
) -> Result<(HardEval, Quantized)> {
    let (n, _, h, w) = x.dims4()?;
    let q = objective
        .model
        .quantize(&state.y, &state.z, &state.stored_delta())?;
    let x_hat = objective.model.transforms().synthesize(&q.y_hat)?;
    let distortion = ops::scalar(&objective.distortion(x, &x_hat)?)?;
    let bpp = q.total_bits() / (n * h * w) as f64;
    let lambda = losses::lambda_select(bpp, &objective.rate);
    Ok((
        HardEval {
            loss: lambda * bpp + distortion,
            bpp,
            distortion,
            lambda,
        },
        q,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefineConfig {
    pub steps: usize,
    pub learning_rate: f64,
    /// Derived from `steps` when absent.
    pub schedule: Option<AnnealSchedule>,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            learning_rate: 5e-3,
            schedule: None,
        }
    }
}

impl RefineConfig {
    pub fn schedule(&self) -> AnnealSchedule {
        self.schedule
            .unwrap_or_else(|| AnnealSchedule::for_steps(self.steps))
    }
}

/// One optimization step; `best_loss` is the best hard loss seen up to and including it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub loss: f64,
    pub rate_bpp: f64,
    pub temperature: f64,
    pub hard_loss: f64,
    pub hard_bpp: f64,
    pub lambda: f64,
    pub best_loss: f64,
}

#[derive(Debug, Clone)]
pub struct RefineOutcome {
    /// The state with the lowest hard loss (possibly the initial one).
    pub state: LatentState,
    pub best: HardEval,
    pub initial: HardEval,
    pub trace: Vec<TraceRow>,
    /// Step at which the loss became non-finite, if it did.
    pub diverged_at: Option<usize>,
}

pub fn write_trace_csv(path: &Path, trace: &[TraceRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Data(e.to_string()))?;
    for row in trace {
        w.serialize(row).map_err(|e| Error::Data(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Optimizes the latents of a padded `[1, 3, H, W]` image.
pub fn refine_latents<R: Rng>(
    x: &Tensor,
    objective: &Objective,
    cfg: &RefineConfig,
    rng: &mut R,
) -> Result<RefineOutcome> {
    let schedule = cfg.schedule();
    schedule.validate()?;
    if let Some(roi) = objective.roi {
        let (_, _, h, w) = x.dims4()?;
        roi.check(h, w)?;
    }
    let init = LatentState::initial(objective.model, x)?;
    let (initial, _) = hard_evaluate(x, &init, objective)?;
    let mut best = initial;
    let mut best_state = init.clone();
    let mut trace = Vec::with_capacity(cfg.steps);
    let mut diverged_at = None;

    let c = objective.model.latent_channels();
    let y = Var::from_tensor(&init.y)?;
    let z = Var::from_tensor(&init.z)?;
    let log_delta = Var::from_tensor(&ops::from_vec(init.log_delta.clone(), &[1, c, 1, 1])?)?;
    let mut opt = AdamW::new(
        vec![y.clone(), z.clone(), log_delta.clone()],
        ParamsAdamW {
            lr: cfg.learning_rate,
            weight_decay: 0.0,
            ..Default::default()
        },
    )?;

    let mut current = init;
    for step in 0..cfg.steps {
        let (hard, _) = hard_evaluate(x, &current, objective)?;
        if hard.loss.is_finite() && hard.loss < best.loss {
            best = hard;
            best_state = current.clone();
        }
        let temperature = schedule.temperature(step);
        let soft = refinement_loss(
            x,
            y.as_tensor(),
            z.as_tensor(),
            log_delta.as_tensor(),
            objective,
            hard.lambda,
            Rounding::Sga { temperature },
            rng,
        )?;
        let loss = ops::scalar(&soft.loss)?;
        trace.push(TraceRow {
            step,
            loss,
            rate_bpp: soft.rate_bpp,
            temperature,
            hard_loss: hard.loss,
            hard_bpp: hard.bpp,
            lambda: hard.lambda,
            best_loss: best.loss,
        });
        if !loss.is_finite() {
            diverged_at = Some(step);
            break;
        }
        opt.backward_step(&soft.loss)?;
        let next = LatentState {
            y: y.as_tensor().detach(),
            z: z.as_tensor().detach(),
            log_delta: ops::to_vec(log_delta.as_tensor())?,
            step: step + 1,
        };
        let finite = ops::ensure_finite(&next.y, "y").is_ok()
            && ops::ensure_finite(&next.z, "z").is_ok()
            && next.log_delta.iter().all(|v| v.is_finite());
        if !finite {
            diverged_at = Some(step);
            break;
        }
        current = next;
    }
    if diverged_at.is_none() && cfg.steps > 0 {
        let (hard, _) = hard_evaluate(x, &current, objective)?;
        if hard.loss.is_finite() && hard.loss < best.loss {
            best = hard;
            best_state = current;
        }
    }
    Ok(RefineOutcome {
        state: best_state,
        best,
        initial,
        trace,
        diverged_at,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn integers_are_fixed_points() {
        let v = ops::from_vec(vec![-3.0, 0.0, 2.0, 7.0], &[4]).unwrap();
        for t in [1e-3, 0.1, 0.5, 5.0] {
            let out = sga_round(&v, t, &mut rng(1)).unwrap();
            assert_eq!(ops::to_vec(&out).unwrap(), vec![-3.0, 0.0, 2.0, 7.0]);
        }
        assert!(sga_round(&v, 0.0, &mut rng(1)).is_err());
    }

    #[test]
    fn output_stays_between_floor_and_ceil() {
        let vals: Vec<f64> = (0..200).map(|i| -5.0 + i as f64 * 0.0517).collect();
        let v = ops::from_vec(vals.clone(), &[200]).unwrap();
        let out = ops::to_vec(&sga_round(&v, 0.3, &mut rng(2)).unwrap()).unwrap();
        for (o, v) in out.iter().zip(vals) {
            assert!(*o >= v.floor() && *o <= v.ceil());
        }
    }

    #[test]
    fn sga_is_differentiable() {
        let v = Var::from_tensor(&ops::from_vec(vec![0.3, 1.7], &[2]).unwrap()).unwrap();
        let out = sga_round(v.as_tensor(), 0.5, &mut rng(3)).unwrap();
        let g = out.sum_all().unwrap().backward().unwrap();
        let grad = ops::to_vec(g.get(v.as_tensor()).unwrap()).unwrap();
        assert!(grad.iter().all(|x| x.is_finite()));
        assert!(grad.iter().any(|x| *x != 0.0));
    }

    #[test]
    fn schedule_shape() {
        let s = AnnealSchedule::for_steps(1000);
        assert_eq!(s.temperature(0), 0.5);
        assert_eq!(s.temperature(199), 0.5);
        assert!((s.temperature(1000) - 1e-3).abs() < 1e-12);
        assert_eq!(s.temperature(1_000_000), 1e-3);
        for k in 0..1200 {
            assert!(s.temperature(k + 1) <= s.temperature(k));
        }
        assert!(AnnealSchedule {
            decay_rate: 0.0,
            ..s
        }
        .validate()
        .is_err());
        assert!(AnnealSchedule { t_min: 1.0, ..s }.validate().is_err());
    }
}
