//! Small tensor helpers shared by the model, the losses and the refinement loop.

use candle_core::{DType, Device, Tensor};
use rand::Rng;

use crate::error::{Error, Result};

/// Every tensor in this crate is `f64` on the CPU.
pub const DTYPE: DType = DType::F64;
pub const DEVICE: Device = Device::Cpu;

/// `log(1 + exp(t))` without overflow for large `t`.
pub fn softplus(t: &Tensor) -> Result<Tensor> {
    let tail = t.abs()?.neg()?.exp()?.affine(1.0, 1.0)?.log()?;
    Ok((t.relu()? + tail)?)
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.flatten_all()?.sum_all()?.to_scalar::<f64>()?)
}

pub fn to_vec(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.flatten_all()?.to_vec1::<f64>()?)
}

pub fn from_vec(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
    Ok(Tensor::from_vec(data, shape, &DEVICE)?)
}

pub fn ensure_finite(t: &Tensor, what: &'static str) -> Result<()> {
    if to_vec(t)?.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}

/// Uniform noise in `[lo, hi)` with the shape of `like`.
pub fn uniform_like<R: Rng>(like: &Tensor, lo: f64, hi: f64, rng: &mut R) -> Result<Tensor> {
    let n = like.elem_count();
    let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    from_vec(data, like.dims())
}

/// Standard Gumbel noise with the shape of `like`.
pub fn gumbel_like<R: Rng>(like: &Tensor, rng: &mut R) -> Result<Tensor> {
    let n = like.elem_count();
    let data = (0..n)
        .map(|_| {
            let u: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
            -(-u.ln()).ln()
        })
        .collect();
    from_vec(data, like.dims())
}

/// Index map for reflecting `0..n` out to `target` entries (`target >= n`).
///
/// Reflection repeats as often as needed, so targets larger than `2n - 1` are fine.
/// `n == 1` degenerates to replication.
pub fn reflect_indices(n: usize, target: usize) -> Vec<u32> {
    if n == 1 {
        return vec![0; target];
    }
    let period = 2 * (n - 1);
    (0..target)
        .map(|i| {
            let k = i % period;
            (if k < n { k } else { period - k }) as u32
        })
        .collect()
}

/// Reflect-pads the two spatial dims of an `[N, C, H, W]` tensor on the bottom/right
/// so both become multiples of `multiple`.
pub fn reflect_pad_to_multiple(t: &Tensor, multiple: usize) -> Result<Tensor> {
    let (_, _, h, w) = t.dims4()?;
    let th = h.div_ceil(multiple) * multiple;
    let tw = w.div_ceil(multiple) * multiple;
    reflect_pad_to(t, th, tw)
}

pub fn reflect_pad_to(t: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    let (_, _, h, w) = t.dims4()?;
    if height < h || width < w {
        return Err(Error::shape(format!(
            "cannot pad {h}x{w} down to {height}x{width}"
        )));
    }
    let mut out = t.clone();
    if height != h {
        let idx = Tensor::new(reflect_indices(h, height), &DEVICE)?;
        out = out.index_select(&idx, 2)?;
    }
    if width != w {
        let idx = Tensor::new(reflect_indices(w, width), &DEVICE)?;
        out = out.index_select(&idx, 3)?;
    }
    Ok(out)
}

/// Straight-through rounding: the forward value is `round(t)`, the gradient is identity.
pub fn ste_round(t: &Tensor) -> Result<Tensor> {
    let delta = (t.round()? - t)?.detach();
    Ok((t + delta)?)
}

/// Nearest value representable as an IEEE half float, kept strictly positive and finite.
pub fn round_to_f16(v: f64) -> f64 {
    let h = half::f16::from_f64(v.clamp(half::f16::MIN_POSITIVE.to_f64(), half::f16::MAX.to_f64()));
    h.to_f64()
}

/// Squared L2 norm of the difference of two equally shaped tensors, as a plain number.
pub fn squared_distance(a: &Tensor, b: &Tensor) -> Result<f64> {
    scalar(&(a - b)?.sqr()?.sum_all()?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflect_indices_match_numpy_reflect() {
        // numpy.pad([0,1,2,3], (0, 5), mode="reflect") -> 0 1 2 3 2 1 0 1 2
        assert_eq!(reflect_indices(4, 9), vec![0, 1, 2, 3, 2, 1, 0, 1, 2]);
        assert_eq!(reflect_indices(1, 3), vec![0, 0, 0]);
        assert_eq!(reflect_indices(3, 3), vec![0, 1, 2]);
    }

    #[test]
    fn softplus_is_stable_at_extremes() {
        let t = Tensor::new(&[-800.0f64, 0.0, 800.0], &DEVICE).unwrap();
        let s = to_vec(&softplus(&t).unwrap()).unwrap();
        assert!(s[0] >= 0.0 && s[0] < 1e-300);
        assert!((s[1] - 2f64.ln()).abs() < 1e-15);
        assert_eq!(s[2], 800.0);
    }

    #[test]
    fn ste_round_forward_rounds_backward_passes() {
        let v = candle_core::Var::new(&[0.2f64, 1.7, -2.5], &DEVICE).unwrap();
        let r = ste_round(v.as_tensor()).unwrap();
        assert_eq!(to_vec(&r).unwrap(), vec![0.0, 2.0, -3.0]);
        let g = r.sum_all().unwrap().backward().unwrap();
        assert_eq!(to_vec(g.get(&v).unwrap()).unwrap(), vec![1.0, 1.0, 1.0]);
    }
}
