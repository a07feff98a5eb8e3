//! Procedural test images: smooth backgrounds, a few solid shapes and striped textures.
//!
//! Used for toy training sets, the acceptance suite and the CLI smoke tests, so the
//! whole pipeline runs without any external data.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::imaging::{ImageTensor, Mask};

/// One image plus the mask of its foreground shapes.
pub struct SyntheticImage {
    pub image: ImageTensor,
    pub mask: Mask,
}

pub fn image(height: usize, width: usize, seed: u64) -> Result<SyntheticImage> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let plane = height * width;
    let mut data = vec![0.0; 3 * plane];
    let mut mask = vec![0.0; plane];

    // Background: a colour ramp along a random direction.
    let c0: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.1..0.9));
    let c1: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.1..0.9));
    let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let (dx, dy) = (angle.cos(), angle.sin());
    let norm = (height.max(width)) as f64;
    for y in 0..height {
        for x in 0..width {
            let t = (0.5 + 0.5 * ((x as f64 * dx + y as f64 * dy) / norm)).clamp(0.0, 1.0);
            for c in 0..3 {
                data[c * plane + y * width + x] = c0[c] * (1.0 - t) + c1[c] * t;
            }
        }
    }

    // Foreground: ellipses, some filled with stripes.
    let shapes = rng.random_range(1..=3);
    for _ in 0..shapes {
        let cx = rng.random_range(0.2..0.8) * width as f64;
        let cy = rng.random_range(0.2..0.8) * height as f64;
        let rx = rng.random_range(0.08..0.25) * width as f64;
        let ry = rng.random_range(0.08..0.25) * height as f64;
        let color: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..1.0));
        let striped = rng.random_bool(0.5);
        let freq = rng.random_range(0.2..0.9);
        let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        for y in 0..height {
            for x in 0..width {
                let u = (x as f64 - cx) / rx;
                let v = (y as f64 - cy) / ry;
                if u * u + v * v > 1.0 {
                    continue;
                }
                let i = y * width + x;
                mask[i] = 1.0;
                let shade = if striped {
                    0.75 + 0.25 * (freq * (x as f64 + y as f64) + phase).sin()
                } else {
                    1.0
                };
                for c in 0..3 {
                    data[c * plane + i] = (color[c] * shade).clamp(0.0, 1.0);
                }
            }
        }
    }

    // Mild sensor noise.
    for v in &mut data {
        *v = (*v + rng.random_range(-0.02..0.02)).clamp(0.0, 1.0);
    }

    Ok(SyntheticImage {
        image: ImageTensor::from_vec(data, height, width)?,
        mask: Mask::new(height, width, mask)?,
    })
}

/// `count` images with consecutive seeds starting at `seed`.
pub fn image_set(count: usize, height: usize, width: usize, seed: u64) -> Result<Vec<ImageTensor>> {
    (0..count)
        .map(|i| image(height, width, seed.wrapping_add(i as u64)).map(|s| s.image))
        .collect()
}
