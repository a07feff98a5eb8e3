//! RGB images in `[0, 1]`, their padded forms, and ROI masks.

use std::path::Path;

use candle_core::Tensor;
use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::ops;

/// A single RGB image as a `[3, H, W]` tensor with values in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct ImageTensor {
    data: Tensor,
}

impl ImageTensor {
    pub fn new(data: Tensor) -> Result<Self> {
        let dims = data.dims();
        if dims.len() != 3 || dims[0] != 3 {
            return Err(Error::shape(format!("expected [3, H, W], got {dims:?}")));
        }
        ops::ensure_finite(&data, "image")?;
        Ok(Self { data })
    }

    pub fn from_vec(data: Vec<f64>, height: usize, width: usize) -> Result<Self> {
        Self::new(ops::from_vec(data, &[3, height, width])?)
    }

    /// Takes image `index` out of an `[N, 3, H, W]` batch.
    pub fn from_batch(batch: &Tensor, index: usize) -> Result<Self> {
        Self::new(batch.get(index)?)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    /// `[1, 3, H, W]` view for the batched model code.
    pub fn batch(&self) -> Result<Tensor> {
        Ok(self.data.unsqueeze(0)?)
    }

    pub fn height(&self) -> usize {
        self.data.dims()[1]
    }

    pub fn width(&self) -> usize {
        self.data.dims()[2]
    }

    pub fn pixels(&self) -> usize {
        self.height() * self.width()
    }

    /// Reflect-pads bottom/right so both dims are multiples of `multiple`.
    pub fn pad_to_multiple(&self, multiple: usize) -> Result<ImageTensor> {
        let padded = ops::reflect_pad_to_multiple(&self.batch()?, multiple)?;
        Self::new(padded.squeeze(0)?)
    }

    pub fn crop(&self, height: usize, width: usize) -> Result<ImageTensor> {
        if height > self.height() || width > self.width() {
            return Err(Error::shape(format!(
                "crop {height}x{width} exceeds {}x{}",
                self.height(),
                self.width()
            )));
        }
        Self::new(
            self.data
                .narrow(1, 0, height)?
                .narrow(2, 0, width)?
                .contiguous()?,
        )
    }

    pub fn crop_at(
        &self,
        top: usize,
        left: usize,
        height: usize,
        width: usize,
    ) -> Result<ImageTensor> {
        if top + height > self.height() || left + width > self.width() {
            return Err(Error::shape("crop window outside the image"));
        }
        Self::new(
            self.data
                .narrow(1, top, height)?
                .narrow(2, left, width)?
                .contiguous()?,
        )
    }

    pub fn to_rgb8(&self) -> Result<RgbImage> {
        let (h, w) = (self.height(), self.width());
        let v = ops::to_vec(&self.data)?;
        let plane = h * w;
        Ok(ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
            let i = y as usize * w + x as usize;
            let q = |c: usize| (v[c * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8;
            Rgb([q(0), q(1), q(2)])
        }))
    }

    pub fn from_rgb8(img: &RgbImage) -> Result<Self> {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut data = vec![0.0; 3 * h * w];
        for (x, y, p) in img.enumerate_pixels() {
            let i = y as usize * w + x as usize;
            for c in 0..3 {
                data[c * h * w + i] = p.0[c] as f64 / 255.0;
            }
        }
        Self::from_vec(data, h, w)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path)?.to_rgb8();
        Self::from_rgb8(&img)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8()?.save(path)?;
        Ok(())
    }
}

/// A binary foreground mask `[H, W]` with 1 marking the region of interest.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl Mask {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::shape("mask length does not match its dims"));
        }
        if values.iter().any(|v| *v != 0.0 && *v != 1.0) {
            return Err(Error::invalid("mask values must be 0 or 1"));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn filled(height: usize, width: usize, value: bool) -> Self {
        let v = if value { 1.0 } else { 0.0 };
        Self {
            height,
            width,
            values: vec![v; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn foreground_fraction(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len().max(1) as f64
    }

    /// `[1, 1, H, W]` tensor that broadcasts over batch and channels.
    pub fn tensor(&self) -> Result<Tensor> {
        ops::from_vec(self.values.clone(), &[1, 1, self.height, self.width])
    }

    /// Nearest-neighbour resize.
    pub fn resize(&self, height: usize, width: usize) -> Mask {
        let mut values = Vec::with_capacity(height * width);
        for y in 0..height {
            let sy = (y * self.height) / height;
            for x in 0..width {
                let sx = (x * self.width) / width;
                values.push(self.values[sy * self.width + sx]);
            }
        }
        Mask {
            height,
            width,
            values,
        }
    }

    /// Reflect-pads bottom/right exactly like [`ImageTensor::pad_to_multiple`].
    pub fn pad_to_multiple(&self, multiple: usize) -> Mask {
        let th = self.height.div_ceil(multiple) * multiple;
        let tw = self.width.div_ceil(multiple) * multiple;
        let rows = ops::reflect_indices(self.height, th);
        let cols = ops::reflect_indices(self.width, tw);
        let values = rows
            .iter()
            .flat_map(|&r| cols.iter().map(move |&c| (r as usize, c as usize)))
            .map(|(r, c)| self.values[r * self.width + c])
            .collect();
        Mask {
            height: th,
            width: tw,
            values,
        }
    }

    /// Reads a single-channel 0/255 image; anything `>= 128` is foreground.
    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path)?.to_luma8();
        Ok(Self::from_gray(&img))
    }

    pub fn from_gray(img: &GrayImage) -> Self {
        let values = img
            .pixels()
            .map(|p| if p.0[0] >= 128 { 1.0 } else { 0.0 })
            .collect();
        Mask {
            height: img.height() as usize,
            width: img.width() as usize,
            values,
        }
    }

    pub fn to_gray(&self) -> GrayImage {
        ImageBuffer::from_fn(self.width as u32, self.height as u32, |x, y| {
            let v = self.values[y as usize * self.width + x as usize];
            Luma([if v > 0.5 { 255 } else { 0 }])
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pad_then_crop_restores_image() {
        let data: Vec<f64> = (0..3 * 5 * 7).map(|i| (i % 11) as f64 / 10.0).collect();
        let img = ImageTensor::from_vec(data.clone(), 5, 7).unwrap();
        let padded = img.pad_to_multiple(4).unwrap();
        assert_eq!((padded.height(), padded.width()), (8, 8));
        let back = padded.crop(5, 7).unwrap();
        assert_eq!(ops::to_vec(back.tensor()).unwrap(), data);
    }

    #[test]
    fn rgb8_round_trip_is_exact_on_8bit_values() {
        let data: Vec<f64> = (0..3 * 4 * 4).map(|i| (i * 5) as f64 / 255.0).collect();
        let img = ImageTensor::from_vec(data, 4, 4).unwrap();
        let back = ImageTensor::from_rgb8(&img.to_rgb8().unwrap()).unwrap();
        assert_eq!(
            ops::to_vec(img.tensor()).unwrap(),
            ops::to_vec(back.tensor()).unwrap()
        );
    }

    #[test]
    fn rejects_non_finite_pixels() {
        let mut data = vec![0.5; 3 * 2 * 2];
        data[3] = f64::NAN;
        assert!(matches!(
            ImageTensor::from_vec(data, 2, 2),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn mask_resize_is_nearest_neighbour() {
        let m = Mask::new(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let r = m.resize(4, 4);
        assert_eq!(
            r.values(),
            &[1., 1., 0., 0., 1., 1., 0., 0., 0., 0., 1., 1., 0., 0., 1., 1.]
        );
        assert!(Mask::new(1, 2, vec![0.5, 1.0]).is_err());
    }
}
