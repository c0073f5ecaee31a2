//! Epipolar feature rendering: reproject target-ray samples into the posed
//! input views, gather analytic image features, aggregate them with
//! cross-view mean and variance, and fuse along the ray with a
//! photo-consistency softmax.

use nalgebra::{DMatrix, DVector, Vector2, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{pixel_center_ray, project, CameraPose, PosedImage, Ray};
use crate::image::{gradient_magnitude, mse, Image};
use crate::render::{spacing_depth, Spacing};

/// RGB plus sixteen analytic feature channels.
pub const ENCODED_CHANNELS: usize = 19;
pub const SUMMARY_DIM: usize = 16;
const GRADIENT_BINS: usize = 10;
const BORDER_MARGIN: f64 = 0.5;
const VISIBILITY_PENALTY: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EpipolarConfig {
    pub n_samples: usize,
    pub near: f64,
    /// May be infinite: disparity then runs down to zero. JSON spells
    /// infinity as `null`.
    #[serde(with = "null_is_infinite")]
    pub far: f64,
    /// Sharpness of the photo-consistency logit.
    pub beta: f64,
    pub pe_frequencies: usize,
    /// Output feature channels after the random projection.
    pub n_features: usize,
    pub projection_seed: u64,
}

mod null_is_infinite {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_some(v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

impl Default for EpipolarConfig {
    fn default() -> Self {
        Self { n_samples: 128, near: 0.5, far: f64::INFINITY, beta: 10.0, pe_frequencies: 6, n_features: 16, projection_seed: 0 }
    }
}

impl EpipolarConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.near > 0.0 && self.far > self.near) {
            return Err(Error::argument("epipolar sampling needs 0 < near < far"));
        }
        if self.n_samples < 1 || self.n_features < 1 {
            return Err(Error::argument("n_samples and n_features must be >= 1"));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::argument("beta must be finite and non-negative"));
        }
        Ok(())
    }

    pub fn aggregate_dim(&self) -> usize {
        2 * ENCODED_CHANNELS + 3 + 6 * self.pe_frequencies
    }

    pub fn sample_depths(&self) -> Vec<f64> {
        (0..self.n_samples)
            .map(|i| {
                let s = (i as f64 + 0.5) / self.n_samples as f64;
                spacing_depth(Spacing::UniformThenDisparity, self.near, self.far, s)
            })
            .collect()
    }
}

fn box_filter(img: &Image, radius: usize) -> Image {
    let (w, h) = (img.width() as isize, img.height() as isize);
    let r = radius as isize;
    let norm = ((2 * r + 1) * (2 * r + 1)) as f64;
    Image::from_fn(img.width(), img.height(), img.channels(), |x, y, c| {
        let mut sum = 0.0;
        for dy in -r..=r {
            for dx in -r..=r {
                let sx = (x as isize + dx).clamp(0, w - 1) as usize;
                let sy = (y as isize + dy).clamp(0, h - 1) as usize;
                sum += img.get(sx, sy, c);
            }
        }
        sum / norm
    })
}

fn gradient_at_scale(img: &Image, level: u32) -> Image {
    let factor = 1usize << level;
    if factor == 1 || img.width() < factor || img.height() < factor {
        return gradient_magnitude(img);
    }
    let coarse = gradient_magnitude(&img.downsample_area(factor));
    coarse.upsample_nearest(factor, img.width(), img.height())
}

/// Fixed per-view encoder. Channels: RGB, per-channel gradient magnitude at
/// three dyadic scales (9), luminance x/y derivatives (2), luminance
/// Laplacian (1), luminance local mean and variance over 3x3 and 7x7 windows (4).
pub fn encode_input(view: &PosedImage) -> Image {
    let img = view.image();
    let (w, h) = (img.width(), img.height());
    let grads: Vec<Image> = (0..3).map(|l| gradient_at_scale(img, l)).collect();
    let lum = img.luminance();
    let at = |x: isize, y: isize| lum.get(x.clamp(0, w as isize - 1) as usize, y.clamp(0, h as isize - 1) as usize, 0);
    let stats: Vec<(Image, Image)> = [1usize, 3]
        .iter()
        .map(|&r| {
            let mean = box_filter(&lum, r);
            let sq = box_filter(&lum.map(|v| v * v), r);
            let var = sq.zip_map(&mean, |s, m| (s - m * m).max(0.0)).expect("same shape");
            (mean, var)
        })
        .collect();
    Image::from_fn(w, h, ENCODED_CHANNELS, |x, y, c| {
        let (xi, yi) = (x as isize, y as isize);
        match c {
            0..=2 => img.get(x, y, c),
            3..=11 => grads[(c - 3) / 3].get(x, y, (c - 3) % 3),
            12 => 0.5 * (at(xi + 1, yi) - at(xi - 1, yi)),
            13 => 0.5 * (at(xi, yi + 1) - at(xi, yi - 1)),
            14 => at(xi + 1, yi) + at(xi - 1, yi) + at(xi, yi + 1) + at(xi, yi - 1) - 4.0 * at(xi, yi),
            15 => stats[0].0.get(x, y, 0),
            16 => stats[0].1.get(x, y, 0),
            17 => stats[1].0.get(x, y, 0),
            _ => stats[1].1.get(x, y, 0),
        }
    })
}

/// Fixed-length description of one input view: mean color (3), per-channel
/// color variance (3), and a normalized histogram of luminance gradient
/// magnitude in [0, 0.5) with the last bin catching the rest (10).
pub fn input_summary(image: &Image) -> Vec<f64> {
    let n = (image.width() * image.height()).max(1) as f64;
    let mut out = vec![0.0; SUMMARY_DIM];
    for px in image.data().chunks(image.channels()) {
        for c in 0..3.min(px.len()) {
            out[c] += px[c] / n;
        }
    }
    for px in image.data().chunks(image.channels()) {
        for c in 0..3.min(px.len()) {
            out[3 + c] += (px[c] - out[c]).powi(2) / n;
        }
    }
    let g = gradient_magnitude(&image.luminance());
    for &v in g.data() {
        let bin = ((v / 0.05) as usize).min(GRADIENT_BINS - 1);
        out[6 + bin] += 1.0 / n;
    }
    out
}

/// Bilinear sample at continuous pixel coordinates, where pixel `(i, j)` has
/// its center at `(i + 0.5, j + 0.5)`. `None` outside the valid region.
fn bilinear(img: &Image, px: &Vector2<f64>, out: &mut [f64]) -> bool {
    let (w, h) = (img.width() as f64, img.height() as f64);
    if !(px.x >= BORDER_MARGIN && px.x <= w - BORDER_MARGIN && px.y >= BORDER_MARGIN && px.y <= h - BORDER_MARGIN) {
        return false;
    }
    let fx = px.x - 0.5;
    let fy = px.y - 0.5;
    let x0 = (fx.floor() as usize).min(img.width() - 1);
    let y0 = (fy.floor() as usize).min(img.height() - 1);
    let x1 = (x0 + 1).min(img.width() - 1);
    let y1 = (y0 + 1).min(img.height() - 1);
    let ax = fx - x0 as f64;
    let ay = fy - y0 as f64;
    let (p00, p10, p01, p11) = (img.pixel(x0, y0), img.pixel(x1, y0), img.pixel(x0, y1), img.pixel(x1, y1));
    for c in 0..out.len() {
        out[c] = (1.0 - ay) * ((1.0 - ax) * p00[c] + ax * p10[c]) + ay * ((1.0 - ax) * p01[c] + ax * p11[c]);
    }
    true
}

/// Per-view encoded features at a world point; `None` for views where the
/// point is behind the camera or outside the image.
pub fn epipolar_gather(inputs: &[PosedImage], features: &[Image], point: &Vector3<f64>) -> Vec<Option<Vec<f64>>> {
    inputs
        .iter()
        .zip(features)
        .map(|(view, feat)| {
            let (px, _) = project(view.pose(), *point).ok()?;
            let scaled = Vector2::new(
                px.x * feat.width() as f64 / view.pose().width() as f64,
                px.y * feat.height() as f64 / view.pose().height() as f64,
            );
            let mut v = vec![0.0; feat.channels()];
            bilinear(feat, &scaled, &mut v).then_some(v)
        })
        .collect()
}

fn positional_encoding(p: &Vector3<f64>, freqs: usize, out: &mut Vec<f64>) {
    out.extend(p.iter());
    for f in 0..freqs {
        let scale = (1u64 << f) as f64 * std::f64::consts::PI;
        for &v in p.iter() {
            out.push((scale * v).sin());
            out.push((scale * v).cos());
        }
    }
}

/// Seeded matrix with orthonormal rows mapping the aggregate to the output
/// feature channels.
pub fn projection_matrix(config: &EpipolarConfig) -> DMatrix<f64> {
    let d = config.aggregate_dim();
    let f = config.n_features;
    let mut rng = ChaCha8Rng::seed_from_u64(config.projection_seed);
    let g = DMatrix::<f64>::from_fn(d, f.min(d), |_, _| StandardNormal.sample(&mut rng));
    let q = g.qr().q();
    let mut p = DMatrix::<f64>::zeros(f, d);
    for r in 0..f.min(d) {
        p.row_mut(r).copy_from(&q.column(r).transpose());
    }
    p
}

/// Target-view conditioning render.
#[derive(Clone, Debug, PartialEq)]
pub struct EpipolarOutput {
    /// RGB head followed by the projected features.
    pub features: Image,
    pub rgb: Image,
    /// 1 where at least one ray sample had a valid gather.
    pub alpha: Image,
}

fn ray_features(
    inputs: &[PosedImage],
    features: &[Image],
    ray: &Ray,
    depths: &[f64],
    config: &EpipolarConfig,
) -> Option<(Vec<f64>, [f64; 3])> {
    let dim = config.aggregate_dim();
    let mut aggregates: Vec<Vec<f64>> = Vec::with_capacity(depths.len());
    let mut logits: Vec<f64> = Vec::with_capacity(depths.len());
    let mut counts: Vec<usize> = Vec::with_capacity(depths.len());
    let mut gathered = vec![0.0; ENCODED_CHANNELS];
    for &t in depths {
        let p = ray.point_at(t);
        let mut sum = [0.0; ENCODED_CHANNELS];
        let mut sum_sq = [0.0; ENCODED_CHANNELS];
        let mut count = 0usize;
        for (view, feat) in inputs.iter().zip(features) {
            let Ok((px, _)) = project(view.pose(), p) else { continue };
            let scaled = Vector2::new(
                px.x * feat.width() as f64 / view.pose().width() as f64,
                px.y * feat.height() as f64 / view.pose().height() as f64,
            );
            if !bilinear(feat, &scaled, &mut gathered) {
                continue;
            }
            count += 1;
            for c in 0..ENCODED_CHANNELS {
                sum[c] += gathered[c];
                sum_sq[c] += gathered[c] * gathered[c];
            }
        }
        if count == 0 {
            continue;
        }
        let n = count as f64;
        let mut agg = Vec::with_capacity(dim);
        agg.extend(sum.iter().map(|s| s / n));
        let mut var_mean = 0.0;
        for c in 0..ENCODED_CHANNELS {
            let m = sum[c] / n;
            let v = (sum_sq[c] / n - m * m).max(0.0);
            agg.push(v);
            var_mean += v / ENCODED_CHANNELS as f64;
        }
        positional_encoding(&p, config.pe_frequencies, &mut agg);
        logits.push(-config.beta * var_mean);
        counts.push(count);
        aggregates.push(agg);
    }
    if aggregates.is_empty() {
        return None;
    }
    // samples seen by fewer views than the best-covered one are trivially
    // consistent; charge them per missing view
    let best = counts.iter().copied().max().unwrap_or(0);
    for (l, &c) in logits.iter_mut().zip(&counts) {
        *l -= config.beta * VISIBILITY_PENALTY * (best - c) as f64;
    }
    let max_logit = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max_logit).exp()).collect();
    let z: f64 = exps.iter().sum();
    let mut fused = vec![0.0; dim];
    for (agg, e) in aggregates.iter().zip(&exps) {
        let w = e / z;
        for (f, a) in fused.iter_mut().zip(agg) {
            *f += w * a;
        }
    }
    let rgb = [fused[0], fused[1], fused[2]];
    Some((fused, rgb))
}

/// Render the conditioning image for `target` at its own image size.
pub fn epipolar_render(
    inputs: &[PosedImage],
    input_features: &[Image],
    target: &CameraPose,
    config: &EpipolarConfig,
) -> Result<EpipolarOutput> {
    if inputs.is_empty() {
        return Err(Error::InsufficientData { needed: 1, got: 0 });
    }
    if inputs.len() != input_features.len() {
        return Err(Error::argument("one feature image per input view is required"));
    }
    if input_features.iter().any(|f| f.channels() != ENCODED_CHANNELS) {
        return Err(Error::argument(format!("input features must have {ENCODED_CHANNELS} channels")));
    }
    config.validate()?;
    target.intrinsics().validate()?;
    let (w, h) = (target.width() as usize, target.height() as usize);
    let depths = config.sample_depths();
    let projection = projection_matrix(config);
    let per_pixel: Vec<Option<(Vec<f64>, [f64; 3])>> = (0..w * h)
        .into_par_iter()
        .map(|i| {
            let ray = pixel_center_ray(target, i % w, i / w);
            ray_features(inputs, input_features, &ray, &depths, config)
        })
        .collect();
    let nf = config.n_features;
    let mut features = Image::new(w, h, 3 + nf);
    let mut rgb = Image::filled(w, h, 3, 0.5);
    let mut alpha = Image::new(w, h, 1);
    for (i, px) in per_pixel.into_iter().enumerate() {
        let (x, y) = (i % w, i / w);
        let out = features.pixel_mut(x, y);
        match px {
            Some((fused, c)) => {
                let projected = &projection * DVector::from_vec(fused);
                out[..3].copy_from_slice(&c);
                out[3..].copy_from_slice(projected.as_slice());
                rgb.pixel_mut(x, y).copy_from_slice(&c);
                alpha.set(x, y, 0, 1.0);
            }
            None => out[..3].copy_from_slice(&[0.5; 3]),
        }
    }
    Ok(EpipolarOutput { features, rgb, alpha })
}

/// Mean squared error between the RGB head and the area-downsampled target.
pub fn pixelnerf_loss(rendered_rgb: &Image, target: &PosedImage) -> Result<f64> {
    let down = target.image().resize_area(rendered_rgb.width(), rendered_rgb.height())?;
    mse(rendered_rgb, &down)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Intrinsics;

    fn view(img: Image) -> PosedImage {
        let intr = Intrinsics::centered(20.0, img.width() as u32, img.height() as u32);
        let pose = CameraPose::look_at(Vector3::new(0.0, -2.0, 0.0), Vector3::zeros(), Vector3::z(), intr).unwrap();
        PosedImage::new(img, pose).unwrap()
    }

    #[test]
    fn constant_image_has_no_gradient_response() {
        let f = encode_input(&view(Image::filled(8, 8, 3, 0.4)));
        for c in (3..15).chain([16, 18]) {
            assert!((0..8).all(|y| (0..8).all(|x| f.get(x, y, c).abs() < 1e-15)), "channel {c}");
        }
    }

    #[test]
    fn projection_rows_are_orthonormal() {
        let cfg = EpipolarConfig::default();
        let p = projection_matrix(&cfg);
        let gram = &p * p.transpose();
        assert!((gram - DMatrix::identity(cfg.n_features, cfg.n_features)).amax() < 1e-12);
    }

    #[test]
    fn zero_inputs_is_an_error() {
        let pose = *view(Image::new(4, 4, 3)).pose();
        assert!(epipolar_render(&[], &[], &pose, &EpipolarConfig::default()).is_err());
    }

    #[test]
    fn summary_has_fixed_length() {
        let s = input_summary(&Image::filled(5, 3, 3, 0.2));
        assert_eq!(s.len(), SUMMARY_DIM);
        assert!((s[0] - 0.2).abs() < 1e-15 && s[3].abs() < 1e-15);
        assert!((s[6..].iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
