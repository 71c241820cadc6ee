//! RGB images in `[0, 1]`, stored planar (`[3][H][W]`).

use std::path::Path;

use crate::autograd::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize) -> Self {
        Image { height, width, data: vec![0.0; 3 * height * width] }
    }

    /// Builds from `f(y, x) -> [r, g, b]`.
    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> [f32; 3]) -> Self {
        let mut img = Self::new(height, width);
        for y in 0..height {
            for x in 0..width {
                let px = f(y, x);
                for (c, v) in px.into_iter().enumerate() {
                    img.data[(c * height + y) * width + x] = v;
                }
            }
        }
        img
    }

    /// From planar channel-major data.
    pub fn from_planar(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != 3 * height * width {
            return Err(Error::DimensionMismatch(format!(
                "{} values for a {height}x{width}x3 image",
                data.len()
            )));
        }
        Ok(Image { height, width, data })
    }

    /// From interleaved `H x W x C` data; only `C = 3` is accepted.
    pub fn from_hwc(height: usize, width: usize, channels: usize, hwc: &[f32]) -> Result<Self> {
        if channels != 3 {
            return Err(Error::ChannelCount(channels));
        }
        if hwc.len() != height * width * 3 {
            return Err(Error::DimensionMismatch(format!("{} values for {height}x{width}x3", hwc.len())));
        }
        Ok(Self::from_fn(height, width, |y, x| {
            let i = (y * width + x) * 3;
            [hwc[i], hwc[i + 1], hwc[i + 2]]
        }))
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn planar(&self) -> &[f32] {
        &self.data
    }

    pub fn planar_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        [self.get(y, x, 0), self.get(y, x, 1), self.get(y, x, 2)]
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Image { height: self.height, width: self.width, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn clamp01(&mut self) {
        self.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    }

    pub fn in_unit_range(&self) -> bool {
        self.data.iter().all(|v| (0.0..=1.0).contains(v))
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Self {
        assert!(y0 + h <= self.height && x0 + w <= self.width, "crop out of bounds");
        Self::from_fn(h, w, |y, x| self.pixel(y0 + y, x0 + x))
    }

    pub fn flip_horizontal(&self) -> Self {
        Self::from_fn(self.height, self.width, |y, x| self.pixel(y, self.width - 1 - x))
    }

    pub fn flip_vertical(&self) -> Self {
        Self::from_fn(self.height, self.width, |y, x| self.pixel(self.height - 1 - y, x))
    }

    /// Reflect-pads bottom/right edges up to the next multiple of `m`.
    pub fn reflect_pad_to_multiple(&self, m: usize) -> Self {
        let ph = self.height.div_ceil(m) * m;
        let pw = self.width.div_ceil(m) * m;
        if ph == self.height && pw == self.width {
            return self.clone();
        }
        let reflect = |i: usize, n: usize| -> usize {
            if n == 1 {
                return 0;
            }
            let period = 2 * (n - 1);
            let r = i % period;
            if r < n {
                r
            } else {
                period - r
            }
        };
        Self::from_fn(ph, pw, |y, x| self.pixel(reflect(y, self.height), reflect(x, self.width)))
    }

    /// Rec.601 luma, row-major.
    pub fn luminance(&self) -> Vec<f64> {
        let n = self.height * self.width;
        (0..n)
            .map(|i| 0.299 * self.data[i] as f64 + 0.587 * self.data[n + i] as f64 + 0.114 * self.data[2 * n + i] as f64)
            .collect()
    }

    /// `[1, 3, H, W]` tensor.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_vec(&[1, 3, self.height, self.width], self.data.iter().map(|&v| T::lit(v as f64)).collect())
    }

    /// Stacks equally sized images into `[N, 3, H, W]`.
    pub fn batch_tensor<T: Scalar>(images: &[&Image]) -> Result<Tensor<T>> {
        let first = images.first().ok_or_else(|| Error::DimensionMismatch("empty batch".into()))?;
        let (h, w) = (first.height, first.width);
        let mut data = Vec::with_capacity(images.len() * 3 * h * w);
        for img in images {
            if img.height != h || img.width != w {
                return Err(Error::ShapeMismatch(vec![h, w], vec![img.height, img.width]));
            }
            data.extend(img.data.iter().map(|&v| T::lit(v as f64)));
        }
        Ok(Tensor::from_vec(&[images.len(), 3, h, w], data))
    }

    /// Splits an `[N, 3, H, W]` tensor into images.
    pub fn from_batch_tensor<T: Scalar>(t: &Tensor<T>) -> Result<Vec<Image>> {
        let s = t.shape();
        if s.len() != 4 {
            return Err(Error::DimensionMismatch(format!("expected NCHW, got {s:?}")));
        }
        if s[1] != 3 {
            return Err(Error::ChannelCount(s[1]));
        }
        let per = 3 * s[2] * s[3];
        Ok(t.data()
            .chunks(per)
            .map(|c| Image { height: s[2], width: s[3], data: c.iter().map(|v| v.as_f64() as f32).collect() })
            .collect())
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|e| Error::UnreadableImage { path: path.to_path_buf(), reason: e.to_string() })?
            .to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let raw = img.into_raw();
        Ok(Self::from_fn(h, w, |y, x| {
            let i = (y * w + x) * 3;
            [raw[i] as f32 / 255.0, raw[i + 1] as f32 / 255.0, raw[i + 2] as f32 / 255.0]
        }))
    }

    /// Rounds each channel to 8 bits.
    pub fn to_rgb8(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.data.len());
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..3 {
                    out.push(quantize(self.get(y, x, c)));
                }
            }
        }
        out
    }

    /// The image after an 8-bit round trip.
    pub fn quantized(&self) -> Self {
        self.map(|v| quantize(v) as f32 / 255.0)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        image::save_buffer(path, &self.to_rgb8(), self.width as u32, self.height as u32, image::ExtendedColorType::Rgb8)?;
        Ok(())
    }
}

#[inline]
fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflect_pad_mirrors_edges() {
        let img = Image::from_fn(3, 2, |y, x| [y as f32, x as f32, 0.0]);
        let p = img.reflect_pad_to_multiple(4);
        assert_eq!((p.height(), p.width()), (4, 4));
        assert_eq!(p.get(3, 0, 0), 1.0);
        assert_eq!(p.get(0, 2, 1), 0.0);
        assert_eq!(p.get(0, 3, 1), 1.0);
    }

    #[test]
    fn png_round_trip_is_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image::from_fn(5, 7, |y, x| [y as f32 / 5.0, x as f32 / 7.0, 0.33]);
        let path = dir.path().join("a.png");
        img.save_png(&path).unwrap();
        assert_eq!(Image::load_png(&path).unwrap(), img.quantized());
    }

    #[test]
    fn rejects_non_rgb() {
        assert!(matches!(Image::from_hwc(2, 2, 1, &[0.0; 4]), Err(Error::ChannelCount(1))));
    }
}
