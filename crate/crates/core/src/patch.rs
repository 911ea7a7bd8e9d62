//! RGB image patches in `[0, 1]`, binary masks, resampling and PNG I/O.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Planar (channel-major) RGB image. Values are nominally in `[0, 1]`;
/// raw decoder output may leave that range until it is clipped.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePatch {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl ImagePatch {
    pub const CHANNELS: usize = 3;

    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::invalid("image dimensions must be positive"));
        }
        if data.len() != Self::CHANNELS * height * width {
            return Err(Error::shape("image data", &[3, height, width], &[data.len()]));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self {
            height,
            width,
            data: vec![value; 3 * height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(3 * height * width);
        for c in 0..3 {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn clipped(&self) -> Self {
        Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        }
    }

    /// ITU-R BT.601 luma.
    pub fn luma(&self) -> Vec<f64> {
        let (r, g, b) = (self.plane(0), self.plane(1), self.plane(2));
        r.iter()
            .zip(g)
            .zip(b)
            .map(|((r, g), b)| 0.299 * r + 0.587 * g + 0.114 * b)
            .collect()
    }

    pub fn flipped_horizontal(&self) -> Self {
        Self::from_fn(self.height, self.width, |c, y, x| self.get(c, y, self.width - 1 - x))
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        if top + height > self.height || left + width > self.width || height == 0 || width == 0 {
            return Err(Error::invalid("crop window outside image"));
        }
        Ok(Self::from_fn(height, width, |c, y, x| self.get(c, top + y, left + x)))
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let img = image::open(path.as_ref())?.to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        Ok(Self::from_fn(h, w, |c, y, x| img.get_pixel(x as u32, y as u32)[c] as f64 / 255.0))
    }

    /// Writes an 8-bit RGB PNG; values are clipped to `[0, 1]` and rounded.
    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut buf = image::RgbImage::new(self.width as u32, self.height as u32);
        for (x, y, px) in buf.enumerate_pixels_mut() {
            for c in 0..3 {
                px[c] = to_u8(self.get(c, y as usize, x as usize));
            }
        }
        buf.save(path.as_ref())?;
        Ok(())
    }
}

pub(crate) fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn save_gray_png(values: &[f64], height: usize, width: usize, path: impl AsRef<Path>) -> Result<()> {
    if values.len() != height * width {
        return Err(Error::shape("grayscale image", &[height, width], &[values.len()]));
    }
    let buf = image::GrayImage::from_fn(width as u32, height as u32, |x, y| {
        image::Luma([to_u8(values[y as usize * width + x as usize])])
    });
    buf.save(path.as_ref())?;
    Ok(())
}

/// Binary inpainting mask; `true` marks a hole.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    holes: Vec<bool>,
}

impl Mask {
    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            holes: vec![false; height * width],
        }
    }

    pub fn full(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            holes: vec![true; height * width],
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn is_hole(&self, y: usize, x: usize) -> bool {
        self.holes[y * self.width + x]
    }

    pub fn set_hole(&mut self, y: usize, x: usize) {
        self.holes[y * self.width + x] = true;
    }

    pub fn coverage(&self) -> f64 {
        self.holes.iter().filter(|&&h| h).count() as f64 / self.holes.len() as f64
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.holes.iter().map(|&h| if h { 1.0 } else { 0.0 }).collect()
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let img = image::open(path.as_ref())?.to_luma8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let holes = img.pixels().map(|p| p[0] >= 128).collect();
        Ok(Self { height: h, width: w, holes })
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        save_gray_png(&self.as_f64(), self.height, self.width, path)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Resample {
    #[default]
    Bicubic,
    Bilinear,
    Nearest,
}

fn cubic(t: f64) -> f64 {
    // Keys kernel, a = -0.5
    let a = -0.5;
    let t = t.abs();
    if t <= 1.0 {
        (a + 2.0) * t * t * t - (a + 3.0) * t * t + 1.0
    } else if t < 2.0 {
        a * t * t * t - 5.0 * a * t * t + 8.0 * a * t - 4.0 * a
    } else {
        0.0
    }
}

/// Separable resize with half-pixel-centre sampling. Downscaling by an
/// integer factor widens the kernel (antialiasing) for bilinear and bicubic.
pub fn resize(img: &ImagePatch, height: usize, width: usize, method: Resample) -> Result<ImagePatch> {
    if height == 0 || width == 0 {
        return Err(Error::invalid("resize target must be positive"));
    }
    if (height, width) == img.dims() {
        return Ok(img.clone());
    }
    let rows = resample_weights(img.height, height, method);
    let cols = resample_weights(img.width, width, method);
    let mut tmp = vec![0.0; 3 * img.height * width];
    for c in 0..3 {
        for y in 0..img.height {
            for (x, taps) in cols.iter().enumerate() {
                tmp[(c * img.height + y) * width + x] =
                    taps.iter().map(|&(i, wt)| wt * img.get(c, y, i)).sum();
            }
        }
    }
    let mut out = ImagePatch::filled(height, width, 0.0);
    for c in 0..3 {
        for (y, taps) in rows.iter().enumerate() {
            for x in 0..width {
                let v = taps
                    .iter()
                    .map(|&(i, wt)| wt * tmp[(c * img.height + i) * width + x])
                    .sum();
                out.set(c, y, x, v);
            }
        }
    }
    Ok(out)
}

fn resample_weights(src: usize, dst: usize, method: Resample) -> Vec<Vec<(usize, f64)>> {
    let scale = src as f64 / dst as f64;
    let support_scale = scale.max(1.0);
    (0..dst)
        .map(|o| {
            let centre = (o as f64 + 0.5) * scale - 0.5;
            if method == Resample::Nearest {
                let i = ((o as f64 + 0.5) * scale).floor() as usize;
                return vec![(i.min(src - 1), 1.0)];
            }
            let (radius, kernel): (f64, fn(f64) -> f64) = match method {
                Resample::Bilinear => (1.0, |t: f64| (1.0 - t.abs()).max(0.0)),
                _ => (2.0, cubic),
            };
            let reach = radius * support_scale;
            let lo = (centre - reach).floor() as isize;
            let hi = (centre + reach).ceil() as isize;
            let mut taps: Vec<(usize, f64)> = Vec::new();
            for i in lo..=hi {
                let wt = kernel((i as f64 - centre) / support_scale);
                if wt == 0.0 {
                    continue;
                }
                let idx = i.clamp(0, src as isize - 1) as usize;
                match taps.iter_mut().find(|(j, _)| *j == idx) {
                    Some(t) => t.1 += wt,
                    None => taps.push((idx, wt)),
                }
            }
            let total: f64 = taps.iter().map(|t| t.1).sum();
            taps.iter_mut().for_each(|t| t.1 /= total);
            taps
        })
        .collect()
}

/// Stacks equally sized patches into a `[B, 3, H, W]` tensor.
pub fn images_to_tensor(images: &[ImagePatch]) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| Error::invalid("empty image batch"))?;
    let mut data = Vec::with_capacity(images.len() * first.data.len());
    for img in images {
        if img.dims() != first.dims() {
            return Err(Error::shape(
                "image batch",
                &[first.height, first.width],
                &[img.height, img.width],
            ));
        }
        data.extend_from_slice(&img.data);
    }
    Tensor::new(vec![images.len(), 3, first.height, first.width], data)
}

pub fn tensor_to_images(t: &Tensor) -> Result<Vec<ImagePatch>> {
    let s = t.shape();
    if s.len() != 4 || s[1] != 3 {
        return Err(Error::shape("image tensor", &[0, 3, 0, 0], s));
    }
    let n = 3 * s[2] * s[3];
    t.data()
        .chunks(n)
        .map(|chunk| ImagePatch::new(s[2], s[3], chunk.to_vec()))
        .collect()
}
