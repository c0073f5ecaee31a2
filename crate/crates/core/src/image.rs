//! Dense float images and the handful of filters the pipeline needs.
//!
//! Pixels are stored row-major with interleaved channels: element
//! `(x, y, c)` lives at `(y * width + x) * channels + c`.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Self::filled(width, height, channels, 0.0)
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Self {
        Self { width, height, channels, data: vec![value; width * height * channels] }
    }

    /// Image with every pixel set to `pixel` (whose length fixes the channel count).
    pub fn constant(width: usize, height: usize, pixel: &[f64]) -> Self {
        let mut data = Vec::with_capacity(width * height * pixel.len());
        for _ in 0..width * height {
            data.extend_from_slice(pixel);
        }
        Self { width, height, channels: pixel.len(), data }
    }

    pub fn from_vec(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::argument(format!(
                "image buffer has {} values, expected {}x{}x{}",
                data.len(),
                width,
                height,
                channels
            )));
        }
        Ok(Self { width, height, channels, data })
    }

    pub fn from_fn(width: usize, height: usize, channels: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(x, y, c));
                }
            }
        }
        Self { width, height, channels, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    pub(crate) fn check_same_shape(&self, other: &Image, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::argument(format!(
                "{what}: shape mismatch {}x{}x{} vs {}x{}x{}",
                self.width, self.height, self.channels, other.width, other.height, other.channels
            )))
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, value: f64) {
        self.data[(y * self.width + x) * self.channels + c] = value;
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let start = (y * self.width + x) * self.channels;
        &self.data[start..start + self.channels]
    }

    #[inline]
    pub fn pixel_mut(&mut self, x: usize, y: usize) -> &mut [f64] {
        let start = (y * self.width + x) * self.channels;
        &mut self.data[start..start + self.channels]
    }

    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> Image {
        Image { width: self.width, height: self.height, channels: self.channels, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    /// Elementwise combination of two equally shaped images.
    pub fn zip_map(&self, other: &Image, mut f: impl FnMut(f64, f64) -> f64) -> Result<Image> {
        self.check_same_shape(other, "zip_map")?;
        Ok(Image {
            width: self.width,
            height: self.height,
            channels: self.channels,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn scale(&mut self, factor: f64) {
        self.data.iter_mut().for_each(|v| *v *= factor);
    }

    pub fn add_assign(&mut self, other: &Image) -> Result<()> {
        self.check_same_shape(other, "add_assign")?;
        self.data.iter_mut().zip(&other.data).for_each(|(a, b)| *a += b);
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Copy of channels `start..start + count`.
    pub fn channel_range(&self, start: usize, count: usize) -> Image {
        assert!(start + count <= self.channels, "channel range out of bounds");
        Image::from_fn(self.width, self.height, count, |x, y, c| self.get(x, y, start + c))
    }

    /// Rec. 601 luma of the first three channels.
    pub fn luminance(&self) -> Image {
        assert!(self.channels >= 3, "luminance needs an RGB image");
        Image::from_fn(self.width, self.height, 1, |x, y, _| {
            let p = self.pixel(x, y);
            0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]
        })
    }

    /// Box-filter downsampling by an integer factor. Trailing rows and columns
    /// that do not fill a whole block are dropped.
    pub fn downsample_area(&self, factor: usize) -> Image {
        assert!(factor >= 1, "downsample factor must be >= 1");
        if factor == 1 {
            return self.clone();
        }
        let w = self.width / factor;
        let h = self.height / factor;
        let norm = 1.0 / (factor * factor) as f64;
        let mut out = Image::new(w, h, self.channels);
        for y in 0..h {
            for x in 0..w {
                for dy in 0..factor {
                    for dx in 0..factor {
                        let src = self.pixel(x * factor + dx, y * factor + dy);
                        for (o, s) in out.pixel_mut(x, y).iter_mut().zip(src) {
                            *o += s * norm;
                        }
                    }
                }
            }
        }
        out
    }

    /// Adjoint of [`Image::downsample_area`]: spreads each coarse gradient over
    /// its source block into an image of the given fine size.
    pub fn downsample_area_adjoint(&self, factor: usize, width: usize, height: usize) -> Image {
        if factor == 1 {
            return self.clone();
        }
        let norm = 1.0 / (factor * factor) as f64;
        let mut out = Image::new(width, height, self.channels);
        for y in 0..self.height {
            for x in 0..self.width {
                let g = self.pixel(x, y).to_vec();
                for dy in 0..factor {
                    for dx in 0..factor {
                        for (o, v) in out.pixel_mut(x * factor + dx, y * factor + dy).iter_mut().zip(&g) {
                            *o += v * norm;
                        }
                    }
                }
            }
        }
        out
    }

    /// Resample to `width x height` by area averaging. The source size must be
    /// an integer multiple of the target size.
    pub fn resize_area(&self, width: usize, height: usize) -> Result<Image> {
        if width == 0 || height == 0 || !self.width.is_multiple_of(width) || !self.height.is_multiple_of(height) {
            return Err(Error::argument(format!("cannot area-resample {}x{} to {}x{}", self.width, self.height, width, height)));
        }
        let fx = self.width / width;
        let fy = self.height / height;
        if fx != fy {
            return Err(Error::argument("area resampling needs equal x/y factors"));
        }
        Ok(self.downsample_area(fx))
    }

    pub fn upsample_nearest(&self, factor: usize, width: usize, height: usize) -> Image {
        Image::from_fn(width, height, self.channels, |x, y, c| {
            let sx = (x / factor).min(self.width.saturating_sub(1));
            let sy = (y / factor).min(self.height.saturating_sub(1));
            self.get(sx, sy, c)
        })
    }

    /// Separable Gaussian blur with clamped borders; `sigma <= 0` is the identity.
    pub fn gaussian_blur(&self, sigma: f64) -> Image {
        if sigma <= 0.0 {
            return self.clone();
        }
        let radius = (3.0 * sigma).ceil() as isize;
        let mut kernel: Vec<f64> = (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
        let sum: f64 = kernel.iter().sum();
        kernel.iter_mut().for_each(|k| *k /= sum);

        let (w, h) = (self.width as isize, self.height as isize);
        let horizontal = Image::from_fn(self.width, self.height, self.channels, |x, y, c| {
            kernel
                .iter()
                .enumerate()
                .map(|(i, k)| {
                    let sx = (x as isize + i as isize - radius).clamp(0, w - 1) as usize;
                    k * self.get(sx, y, c)
                })
                .sum()
        });
        Image::from_fn(self.width, self.height, self.channels, |x, y, c| {
            kernel
                .iter()
                .enumerate()
                .map(|(i, k)| {
                    let sy = (y as isize + i as isize - radius).clamp(0, h - 1) as usize;
                    k * horizontal.get(x, sy, c)
                })
                .sum()
        })
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        assert_eq!(self.channels, 3, "to_rgb8 needs 3 channels");
        self.data.iter().map(|&v| quantize_u8(v)).collect()
    }

    pub fn from_rgb8(width: usize, height: usize, bytes: &[u8]) -> Result<Image> {
        Image::from_vec(width, height, 3, bytes.iter().map(|&b| b as f64 / 255.0).collect())
    }

    pub fn write_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let rgb = match self.channels {
            3 => self.clone(),
            1 => Image::from_fn(self.width, self.height, 3, |x, y, _| self.get(x, y, 0)),
            n => return Err(Error::argument(format!("cannot write {n}-channel image as PNG"))),
        };
        let buf = image::RgbImage::from_raw(self.width as u32, self.height as u32, rgb.to_rgb8())
            .ok_or_else(|| Error::argument("PNG buffer size mismatch"))?;
        buf.save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }

    pub fn read_png(path: impl AsRef<Path>) -> Result<Image> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let img = image::load_from_memory_with_format(&bytes, image::ImageFormat::Png)?.to_rgb8();
        Image::from_rgb8(img.width() as usize, img.height() as usize, img.as_raw())
    }

    /// Encode a 1- or 3-channel image as little-endian PFM (scale -1.0).
    /// Rows are stored bottom to top.
    pub fn encode_pfm(&self) -> Result<Vec<u8>> {
        let tag = match self.channels {
            1 => "Pf",
            3 => "PF",
            n => return Err(Error::argument(format!("cannot write {n}-channel image as PFM"))),
        };
        let mut out = format!("{tag}\n{} {}\n-1.0\n", self.width, self.height).into_bytes();
        out.reserve(self.data.len() * 4);
        for y in (0..self.height).rev() {
            for x in 0..self.width {
                for &v in self.pixel(x, y) {
                    out.extend_from_slice(&(v as f32).to_le_bytes());
                }
            }
        }
        Ok(out)
    }

    pub fn write_pfm(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.encode_pfm()?;
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        w.write_all(&bytes).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Decode a PFM byte stream (either endianness, 1 or 3 channels).
    pub fn decode_pfm(bytes: &[u8]) -> Result<Image> {
        let mut pos = 0;
        let mut token = || -> Result<&str> {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(Error::Decode("truncated PFM header".into()));
            }
            let tok = std::str::from_utf8(&bytes[start..pos]).map_err(|_| Error::Decode("non-ASCII PFM header".into()))?;
            Ok(tok)
        };
        let channels = match token()? {
            "Pf" => 1,
            "PF" => 3,
            other => return Err(Error::Decode(format!("bad PFM magic {other:?}"))),
        };
        let width: usize = token()?.parse().map_err(|_| Error::Decode("bad PFM width".into()))?;
        let height: usize = token()?.parse().map_err(|_| Error::Decode("bad PFM height".into()))?;
        let scale: f64 = token()?.parse().map_err(|_| Error::Decode("bad PFM scale".into()))?;
        if !scale.is_finite() || scale == 0.0 {
            return Err(Error::Decode("PFM scale must be finite and nonzero".into()));
        }
        // exactly one whitespace byte separates the header from the raster
        if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
            return Err(Error::Decode("missing PFM raster".into()));
        }
        pos += 1;
        let count = width
            .checked_mul(height)
            .and_then(|n| n.checked_mul(channels))
            .ok_or_else(|| Error::Decode("PFM dimensions overflow".into()))?;
        let raster = &bytes[pos..];
        if raster.len() / 4 != count || !raster.len().is_multiple_of(4) {
            return Err(Error::Decode(format!("PFM raster has {} bytes, expected {}", raster.len(), count.saturating_mul(4))));
        }
        let little = scale < 0.0;
        let mut img = Image::new(width, height, channels);
        for (i, chunk) in raster.chunks_exact(4).enumerate() {
            let raw = [chunk[0], chunk[1], chunk[2], chunk[3]];
            let v = if little { f32::from_le_bytes(raw) } else { f32::from_be_bytes(raw) };
            let c = i % channels;
            let px = i / channels;
            let (x, row) = (px % width, px / width);
            img.set(x, height - 1 - row, c, v as f64);
        }
        Ok(img)
    }

    pub fn read_pfm(path: impl AsRef<Path>) -> Result<Image> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Image::decode_pfm(&bytes)
    }
}

fn quantize_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Smoothing constant inside the gradient-magnitude square root.
pub const GRAD_EPS: f64 = 1e-6;

/// Per-channel gradient magnitude `sqrt(gx^2 + gy^2 + eps^2) - eps` using
/// central differences with clamped borders.
pub fn gradient_magnitude(img: &Image) -> Image {
    let (w, h) = (img.width, img.height);
    Image::from_fn(w, h, img.channels, |x, y, c| {
        let (gx, gy) = central_diff(img, x, y, c);
        (gx * gx + gy * gy + GRAD_EPS * GRAD_EPS).sqrt() - GRAD_EPS
    })
}

#[inline]
fn central_diff(img: &Image, x: usize, y: usize, c: usize) -> (f64, f64) {
    let (w, h) = (img.width, img.height);
    let xl = x.saturating_sub(1);
    let xr = (x + 1).min(w - 1);
    let yu = y.saturating_sub(1);
    let yd = (y + 1).min(h - 1);
    let gx = 0.5 * (img.get(xr, y, c) - img.get(xl, y, c));
    let gy = 0.5 * (img.get(x, yd, c) - img.get(x, yu, c));
    (gx, gy)
}

/// Vector-Jacobian product of [`gradient_magnitude`]: given `upstream` with the
/// shape of the magnitude map, returns the gradient with respect to `img`.
pub fn gradient_magnitude_backward(img: &Image, upstream: &Image) -> Image {
    let (w, h) = (img.width, img.height);
    let mut out = Image::new(w, h, img.channels);
    for y in 0..h {
        for x in 0..w {
            for c in 0..img.channels {
                let g = upstream.get(x, y, c);
                if g == 0.0 {
                    continue;
                }
                let (gx, gy) = central_diff(img, x, y, c);
                let norm = (gx * gx + gy * gy + GRAD_EPS * GRAD_EPS).sqrt();
                let dgx = g * gx / norm * 0.5;
                let dgy = g * gy / norm * 0.5;
                let xl = x.saturating_sub(1);
                let xr = (x + 1).min(w - 1);
                let yu = y.saturating_sub(1);
                let yd = (y + 1).min(h - 1);
                let idx = |xx: usize, yy: usize| (yy * w + xx) * img.channels + c;
                out.data[idx(xr, y)] += dgx;
                out.data[idx(xl, y)] -= dgx;
                out.data[idx(x, yd)] += dgy;
                out.data[idx(x, yu)] -= dgy;
            }
        }
    }
    out
}

/// Mean squared error between two equally shaped images.
pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    a.check_same_shape(b, "mse")?;
    let n = a.data.len().max(1) as f64;
    Ok(a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn area_downsample_averages_blocks() {
        let img = Image::from_fn(4, 2, 1, |x, _, _| x as f64);
        let d = img.downsample_area(2);
        assert_eq!((d.width(), d.height()), (2, 1));
        assert_eq!(d.data(), &[0.5, 2.5]);
    }

    #[test]
    fn downsample_adjoint_matches_dot_product() {
        let a = Image::from_fn(6, 4, 2, |x, y, c| ((x * 7 + y * 3 + c) % 5) as f64 - 2.0);
        let g = Image::from_fn(3, 2, 2, |x, y, c| (x + 2 * y + c) as f64 * 0.25);
        let lhs: f64 = a.downsample_area(2).data().iter().zip(g.data()).map(|(p, q)| p * q).sum();
        let adj = g.downsample_area_adjoint(2, 6, 4);
        let rhs: f64 = a.data().iter().zip(adj.data()).map(|(p, q)| p * q).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn gradient_backward_matches_finite_differences() {
        let img = Image::from_fn(5, 4, 2, |x, y, c| ((x * x + 3 * y + c) as f64 * 0.37).sin());
        let up = Image::from_fn(5, 4, 2, |x, y, c| ((x + y * 2 + c) as f64 * 0.9).cos());
        let analytic = gradient_magnitude_backward(&img, &up);
        let f = |im: &Image| -> f64 { gradient_magnitude(im).data().iter().zip(up.data()).map(|(a, b)| a * b).sum() };
        let h = 1e-6;
        for i in 0..img.len() {
            let mut p = img.clone();
            p.data_mut()[i] += h;
            let mut m = img.clone();
            m.data_mut()[i] -= h;
            let fd = (f(&p) - f(&m)) / (2.0 * h);
            assert!((fd - analytic.data()[i]).abs() < 1e-6, "entry {i}: {fd} vs {}", analytic.data()[i]);
        }
    }

    #[test]
    fn pfm_round_trip_preserves_orientation() {
        let img = Image::from_fn(3, 2, 1, |x, y, _| (x + 10 * y) as f64);
        let bytes = img.encode_pfm().unwrap();
        assert!(bytes.starts_with(b"Pf\n3 2\n-1.0\n"));
        // first stored row is the bottom row
        let first = f32::from_le_bytes(bytes[12..16].try_into().unwrap());
        assert_eq!(first, 10.0);
        assert_eq!(Image::decode_pfm(&bytes).unwrap(), img);
    }

    #[test]
    fn pfm_rejects_truncated_raster() {
        let img = Image::filled(2, 2, 3, 0.5);
        let mut bytes = img.encode_pfm().unwrap();
        bytes.pop();
        assert!(Image::decode_pfm(&bytes).is_err());
        assert!(Image::decode_pfm(b"PF\n99999999999 99999999999\n-1\n").is_err());
    }

    #[test]
    fn blur_preserves_constants() {
        let img = Image::filled(7, 5, 3, 0.25);
        let b = img.gaussian_blur(1.3);
        assert!(b.data().iter().all(|v| (v - 0.25).abs() < 1e-12));
    }
}
