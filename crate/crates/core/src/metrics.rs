//! Image quality metrics on [0, 1] images.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{mse, Image};

/// Reported in place of an infinite PSNR.
pub const PSNR_CAP: f64 = 99.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    let m = mse(a, b)?;
    if m <= 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((-10.0 * m.log10()).min(PSNR_CAP))
}

fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..size).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Valid-mode separable filtering of one channel.
fn filter_valid(img: &[f64], w: usize, h: usize, k: &[f64]) -> (Vec<f64>, usize, usize) {
    let n = k.len();
    let (ow, oh) = (w + 1 - n, h + 1 - n);
    let mut horiz = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            horiz[y * ow + x] = (0..n).map(|i| k[i] * img[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * horiz[(y + i) * ow + x]).sum();
        }
    }
    (out, ow, oh)
}

/// Mean SSIM over valid window positions, averaged across channels. Images
/// smaller than the window use a window of the smaller side.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::argument("ssim inputs must have the same shape"));
    }
    let (w, h, ch) = (a.width(), a.height(), a.channels());
    if w == 0 || h == 0 {
        return Err(Error::argument("ssim of an empty image"));
    }
    let k = gaussian_window(SSIM_WINDOW.min(w).min(h), SSIM_SIGMA);
    let (c1, c2) = (K1 * K1, K2 * K2);
    let mut total = 0.0;
    for c in 0..ch {
        let xa: Vec<f64> = (0..w * h).map(|i| a.data()[i * ch + c]).collect();
        let xb: Vec<f64> = (0..w * h).map(|i| b.data()[i * ch + c]).collect();
        let prod = |p: &[f64], q: &[f64]| -> Vec<f64> { p.iter().zip(q).map(|(x, y)| x * y).collect() };
        let (mu_a, ow, oh) = filter_valid(&xa, w, h, &k);
        let (mu_b, ..) = filter_valid(&xb, w, h, &k);
        let (saa, ..) = filter_valid(&prod(&xa, &xa), w, h, &k);
        let (sbb, ..) = filter_valid(&prod(&xb, &xb), w, h, &k);
        let (sab, ..) = filter_valid(&prod(&xa, &xb), w, h, &k);
        let mut sum = 0.0;
        for i in 0..ow * oh {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = saa[i] - ma * ma;
            let vb = sbb[i] - mb * mb;
            let cov = sab[i] - ma * mb;
            sum += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
        total += sum / (ow * oh) as f64;
    }
    Ok(total / ch as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewMetrics {
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub per_view: Vec<ViewMetrics>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
}

impl Metrics {
    pub fn from_views(per_view: Vec<ViewMetrics>) -> Self {
        let n = per_view.len().max(1) as f64;
        let mean_psnr = per_view.iter().map(|v| v.psnr).sum::<f64>() / n;
        let mean_ssim = per_view.iter().map(|v| v.ssim).sum::<f64>() / n;
        Self { per_view, mean_psnr, mean_ssim }
    }
}

pub fn view_metrics(rendered: &Image, reference: &Image) -> Result<ViewMetrics> {
    Ok(ViewMetrics { psnr: psnr(rendered, reference)?, ssim: ssim(rendered, reference)? })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_images() {
        let a = Image::from_fn(16, 16, 3, |x, y, c| ((x + y + c) % 5) as f64 / 4.0);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_offset_psnr() {
        let a = Image::filled(4, 4, 3, 0.5);
        let b = Image::filled(4, 4, 3, 0.6);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
    }
}
