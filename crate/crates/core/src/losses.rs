//! Training objectives and their annealing schedules.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{add_noise, gaussian_like, ConditioningBundle, Denoiser, SCHEDULE};
use crate::error::{Error, Result};
use crate::field::VoxelField;
use crate::geometry::PosedImage;
use crate::image::{gradient_magnitude, gradient_magnitude_backward, Image};
use crate::render::{distortion_loss, render_backward, render_image, RenderConfig, RenderOutput, DISTORTION_WEIGHT};

pub const CHARBONNIER_EPS: f64 = 1e-3;
pub const PERCEPTUAL_SCALES: u32 = 3;

/// Noise-level weighting of the sample loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Weighting {
    /// `w(t) = sigma(t)^2`
    #[default]
    SigmaSquared,
    /// `w(t) = 1`
    Unit,
}

impl Weighting {
    pub fn at(&self, t: f64) -> f64 {
        match self {
            Weighting::SigmaSquared => SCHEDULE.sigma(t).powi(2),
            Weighting::Unit => 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Schedules {
    pub total_iters: usize,
    pub t_min_start: f64,
    pub t_min_end: f64,
    pub t_max: f64,
    pub lambda_sample_start: f64,
    pub lambda_sample_end: f64,
    pub lambda_distortion: f64,
    pub weighting: Weighting,
    /// Include the perceptual term in the sample loss.
    pub perceptual: bool,
}

impl Default for Schedules {
    fn default() -> Self {
        Self {
            total_iters: 1000,
            t_min_start: 1.0,
            t_min_end: 0.0,
            t_max: 1.0,
            lambda_sample_start: 1.0,
            lambda_sample_end: 0.1,
            lambda_distortion: DISTORTION_WEIGHT,
            weighting: Weighting::SigmaSquared,
            perceptual: true,
        }
    }
}

impl Schedules {
    pub fn validate(&self) -> Result<()> {
        if self.total_iters == 0 {
            return Err(Error::Config("total_iters must be >= 1".into()));
        }
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !(unit(self.t_min_start) && unit(self.t_min_end) && unit(self.t_max)) {
            return Err(Error::Config("noise levels must lie in [0, 1]".into()));
        }
        if self.t_min_start.max(self.t_min_end) > self.t_max {
            return Err(Error::Config("t_min must not exceed t_max".into()));
        }
        if !(self.lambda_sample_start >= 0.0 && self.lambda_sample_end >= 0.0 && self.lambda_distortion >= 0.0) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        Ok(())
    }

    pub fn weight(&self, t: f64) -> f64 {
        self.weighting.at(t)
    }
}

fn lerp(a: f64, b: f64, f: f64) -> f64 {
    (1.0 - f) * a + f * b
}

/// `(t_min, lambda_sample)` at iteration `iter`.
pub fn schedule_at(sched: &Schedules, iter: usize) -> Result<(f64, f64)> {
    if iter > sched.total_iters {
        return Err(Error::Bounds(format!("iteration {iter} beyond total {}", sched.total_iters)));
    }
    let f = iter as f64 / sched.total_iters as f64;
    Ok((lerp(sched.t_min_start, sched.t_min_end, f), lerp(sched.lambda_sample_start, sched.lambda_sample_end, f)))
}

fn check(a: &Image, b: &Image) -> Result<()> {
    if a.same_shape(b) {
        Ok(())
    } else {
        Err(Error::argument("loss inputs must have the same shape"))
    }
}

pub fn charbonnier(a: &Image, b: &Image, eps: f64) -> Result<f64> {
    Ok(charbonnier_grad(a, b, eps)?.0)
}

/// Mean Charbonnier penalty and its gradient with respect to `a`.
pub fn charbonnier_grad(a: &Image, b: &Image, eps: f64) -> Result<(f64, Image)> {
    check(a, b)?;
    let n = a.len().max(1) as f64;
    let mut sum = 0.0;
    let grad = a.zip_map(b, |x, y| {
        let d = x - y;
        let r = (d * d + eps * eps).sqrt();
        sum += r - eps;
        d / r / n
    })?;
    Ok((sum / n, grad))
}

/// Mean absolute difference and its subgradient with respect to `a`.
pub fn l1_grad(a: &Image, b: &Image) -> Result<(f64, Image)> {
    check(a, b)?;
    let n = a.len().max(1) as f64;
    let mut sum = 0.0;
    let grad = a.zip_map(b, |x, y| {
        let d = x - y;
        sum += d.abs();
        if d > 0.0 {
            1.0 / n
        } else if d < 0.0 {
            -1.0 / n
        } else {
            0.0
        }
    })?;
    Ok((sum / n, grad))
}

pub fn perceptual_surrogate(a: &Image, b: &Image) -> Result<f64> {
    Ok(perceptual_surrogate_grad(a, b)?.0)
}

/// Mean L1 distance between gradient-magnitude maps at full, half and
/// quarter resolution, averaged over the scales; with the gradient with
/// respect to `a`. Scales too small to hold a pixel are skipped.
pub fn perceptual_surrogate_grad(a: &Image, b: &Image) -> Result<(f64, Image)> {
    check(a, b)?;
    let mut grad = Image::new(a.width(), a.height(), a.channels());
    let levels: Vec<usize> =
        (0..PERCEPTUAL_SCALES).map(|l| 1usize << l).filter(|&f| a.width() / f >= 1 && a.height() / f >= 1).collect();
    let n_levels = levels.len().max(1) as f64;
    let mut total = 0.0;
    for factor in levels {
        let (da, db) = (a.downsample_area(factor), b.downsample_area(factor));
        let (ga, gb) = (gradient_magnitude(&da), gradient_magnitude(&db));
        let (value, dg) = l1_grad(&ga, &gb)?;
        total += value / n_levels;
        let mut d_down = gradient_magnitude_backward(&da, &dg);
        d_down.scale(1.0 / n_levels);
        grad.add_assign(&d_down.downsample_area_adjoint(factor, a.width(), a.height()))?;
    }
    Ok((total, grad))
}

/// `w(t) * (L1 + perceptual)` with the gradient flowing into `render` only.
pub fn sample_loss(render: &Image, sample: &Image, t: f64, sched: &Schedules) -> Result<(f64, Image)> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::argument(format!("t = {t} outside [0, 1]")));
    }
    check(render, sample)?;
    let w = sched.weight(t);
    let (mut value, mut grad) = l1_grad(render, sample)?;
    if sched.perceptual {
        let (pv, pg) = perceptual_surrogate_grad(render, sample)?;
        value += pv;
        grad.add_assign(&pg)?;
    }
    grad.scale(w);
    Ok((w * value, grad))
}

/// Score-distillation gradient `w(t) (eps_hat - eps)` for the rendered image.
pub fn sds_grad<R: Rng + ?Sized>(
    denoiser: &dyn Denoiser,
    cond: Option<&ConditioningBundle>,
    render: &Image,
    t: f64,
    sched: &Schedules,
    rng: &mut R,
) -> Result<Image> {
    if !(t > 0.0 && t <= 1.0) {
        return Err(Error::argument(format!("t = {t} outside (0, 1]")));
    }
    let eps = gaussian_like(render, rng);
    let z = add_noise(render, t, &eps)?;
    let eps_hat = denoiser.predict(&z, t, cond)?;
    check(&eps_hat, render)?;
    let w = sched.weight(t);
    eps_hat.zip_map(&eps, |h, e| w * (h - e))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReconTerms {
    pub recon: f64,
    pub distortion: f64,
}

/// Render `observation`'s view, add the Charbonnier loss against it plus the
/// weighted distortion loss, and accumulate their gradients into the field.
pub fn recon_loss(
    field: &mut VoxelField,
    observation: &PosedImage,
    config: &RenderConfig,
    distortion_weight: f64,
) -> Result<(ReconTerms, RenderOutput)> {
    let pose = observation.pose();
    let cfg = RenderConfig { width: pose.width(), height: pose.height(), ..*config };
    let out = render_image(field, pose, &cfg)?;
    let (recon, d_rgb) = charbonnier_grad(&out.rgb, observation.image(), CHARBONNIER_EPS)?;
    let (distortion, d_weights) = if distortion_weight > 0.0 {
        let (v, mut g) = distortion_loss(&out.records);
        g.scale(distortion_weight);
        (v, Some(g))
    } else {
        (0.0, None)
    };
    render_backward(field, &out.records, &d_rgb, None, d_weights.as_ref())?;
    Ok((ReconTerms { recon, distortion }, out))
}
