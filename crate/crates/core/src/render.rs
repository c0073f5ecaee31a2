//! Emission-absorption volume rendering of a [`VoxelField`] with an analytic
//! adjoint, plus the distortion regularizer on ray weights.
//!
//! Each ray is split into `n_samples` bins that are uniform in a normalized
//! coordinate `s` in `[0, 1]`; the spacing maps `s` to metric depth. A bin's
//! sample sits at its midpoint or, when stratified, at a jittered position
//! inside it.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::VoxelField;
use crate::geometry::{pixel_center_ray, CameraPose, Ray};
use crate::image::Image;

pub const DISTORTION_WEIGHT: f64 = 0.01;
const DEPTH_EPS: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Spacing {
    Uniform,
    /// Uniform in depth up to distance 1, then linear in disparity.
    UniformThenDisparity,
}

/// Metric depth at normalized ray coordinate `s`. `far` may be infinite for
/// the disparity spacing.
pub fn spacing_depth(spacing: Spacing, near: f64, far: f64, s: f64) -> f64 {
    match spacing {
        Spacing::Uniform => near + s * (far - near),
        Spacing::UniformThenDisparity => {
            if far <= 1.0 {
                near + s * (far - near)
            } else if near >= 1.0 {
                let d = 1.0 / near + s * (1.0 / far - 1.0 / near);
                1.0 / d
            } else if s <= 0.5 {
                near + 2.0 * s * (1.0 - near)
            } else {
                let d = 1.0 + 2.0 * (s - 0.5) * (1.0 / far - 1.0);
                1.0 / d
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RenderConfig {
    pub width: u32,
    pub height: u32,
    pub near: f64,
    pub far: f64,
    pub n_samples: usize,
    pub spacing: Spacing,
    pub background: [f64; 3],
    /// Jitter each sample inside its bin.
    pub stratified: bool,
    pub seed: u64,
    /// Stop marching once transmittance drops below this (0 disables).
    pub transmittance_cutoff: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            near: 0.5,
            far: 4.0,
            n_samples: 64,
            spacing: Spacing::Uniform,
            background: [0.0; 3],
            stratified: true,
            seed: 0,
            transmittance_cutoff: 1e-4,
        }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.near > 0.0 && self.far > self.near && self.far.is_finite()) {
            return Err(Error::argument(format!("need 0 < near < far < inf, got {} .. {}", self.near, self.far)));
        }
        if self.n_samples < 2 {
            return Err(Error::argument("n_samples must be >= 2"));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::argument("render size must be positive"));
        }
        if !(self.transmittance_cutoff >= 0.0 && self.transmittance_cutoff < 1.0) {
            return Err(Error::argument("transmittance_cutoff must be in [0, 1)"));
        }
        Ok(())
    }

    /// Deterministic evaluation settings: bin midpoints, no early stop.
    pub fn for_eval(&self) -> Self {
        Self { stratified: false, ..*self }
    }
}

/// Per-sample forward state kept for the backward pass.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SampleRecord {
    pub t: f64,
    pub delta: f64,
    pub sigma: f64,
    pub rgb: [f64; 3],
    /// Transmittance before this sample.
    pub trans: f64,
    pub weight: f64,
}

/// Result of marching one ray.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RayResult {
    pub rgb: [f64; 3],
    pub depth: f64,
    pub accumulation: f64,
    /// Number of samples evaluated before early termination.
    pub n_active: usize,
    pub final_transmittance: f64,
}

#[derive(Clone, Debug)]
pub struct RayRender {
    pub result: RayResult,
    pub samples: Vec<SampleRecord>,
}

#[derive(Clone, Copy, Debug)]
struct March {
    near: f64,
    far: f64,
    n_samples: usize,
    spacing: Spacing,
    background: [f64; 3],
    cutoff: f64,
}

fn march_ray(
    field: &VoxelField,
    ray: &Ray,
    m: &March,
    mut jitter: Option<&mut dyn RngCore>,
    out: &mut [SampleRecord],
) -> RayResult {
    let n = m.n_samples;
    let span = field.bbox().ray_interval(&ray.origin, &ray.direction);
    let mut trans = 1.0;
    let mut rgb = [0.0; 3];
    let mut acc = 0.0;
    let mut depth_num = 0.0;
    let mut n_active = n;
    let mut prev_edge = spacing_depth(m.spacing, m.near, m.far, 0.0);
    for i in 0..n {
        let next_edge = spacing_depth(m.spacing, m.near, m.far, (i + 1) as f64 / n as f64);
        let frac = match jitter.as_deref_mut() {
            Some(rng) => rng.random::<f64>(),
            None => 0.5,
        };
        let t = spacing_depth(m.spacing, m.near, m.far, (i as f64 + frac) / n as f64);
        let delta = next_edge - prev_edge;
        prev_edge = next_edge;

        let inside = span.is_some_and(|(t0, t1)| t >= t0 && t <= t1);
        let (sigma, color) = if inside {
            let q = field.query(&ray.point_at(t));
            (q.density, q.rgb)
        } else {
            (0.0, crate::field::OUTSIDE_RGB)
        };
        let alpha = 1.0 - (-sigma * delta).exp();
        let weight = trans * alpha;
        out[i] = SampleRecord { t, delta, sigma, rgb: color, trans, weight };
        rgb[0] += weight * color[0];
        rgb[1] += weight * color[1];
        rgb[2] += weight * color[2];
        acc += weight;
        depth_num += weight * t;
        trans *= 1.0 - alpha;
        if trans < m.cutoff {
            n_active = i + 1;
            break;
        }
    }
    for s in out.iter_mut().skip(n_active) {
        *s = SampleRecord::default();
    }
    for (c, bg) in rgb.iter_mut().zip(&m.background) {
        *c += trans * bg;
    }
    RayResult { rgb, depth: depth_num / acc.max(DEPTH_EPS), accumulation: acc, n_active, final_transmittance: trans }
}

/// Render a single ray. `jitter` enables stratified sampling.
#[allow(clippy::too_many_arguments)]
pub fn render_ray(
    field: &VoxelField,
    ray: &Ray,
    near: f64,
    far: f64,
    n_samples: usize,
    spacing: Spacing,
    background: [f64; 3],
    jitter: Option<&mut dyn RngCore>,
) -> Result<RayRender> {
    if !(near > 0.0 && far > near && far.is_finite()) {
        return Err(Error::argument(format!("need 0 < near < far < inf, got {near} .. {far}")));
    }
    if n_samples < 2 {
        return Err(Error::argument("n_samples must be >= 2"));
    }
    let m = March { near, far, n_samples, spacing, background, cutoff: 0.0 };
    let mut samples = vec![SampleRecord::default(); n_samples];
    let result = march_ray(field, ray, &m, jitter, &mut samples);
    Ok(RayRender { result, samples })
}

/// Forward state of one rendered image, consumed by [`render_backward`] and
/// [`distortion_loss`].
#[derive(Clone, Debug)]
pub struct RenderRecords {
    width: usize,
    height: usize,
    n_samples: usize,
    field_version: u64,
    field_resolution: [usize; 3],
    background: [f64; 3],
    rays: Vec<Ray>,
    samples: Vec<SampleRecord>,
    results: Vec<RayResult>,
}

impl RenderRecords {
    pub fn n_rays(&self) -> usize {
        self.rays.len()
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn ray(&self, i: usize) -> &Ray {
        &self.rays[i]
    }

    pub fn ray_samples(&self, i: usize) -> &[SampleRecord] {
        let n = self.n_samples;
        &self.samples[i * n..i * n + self.results[i].n_active]
    }

    pub fn ray_result(&self, i: usize) -> &RayResult {
        &self.results[i]
    }
}

pub struct RenderOutput {
    pub rgb: Image,
    pub depth: Image,
    pub accumulation: Image,
    pub records: RenderRecords,
}

/// Render `pose` at the configured resolution.
pub fn render_image(field: &VoxelField, pose: &CameraPose, config: &RenderConfig) -> Result<RenderOutput> {
    config.validate()?;
    let pose = if (pose.width(), pose.height()) == (config.width, config.height) {
        *pose
    } else {
        pose.resized(config.width, config.height)
    };
    let (w, h, n) = (config.width as usize, config.height as usize, config.n_samples);
    let m = March {
        near: config.near,
        far: config.far,
        n_samples: n,
        spacing: config.spacing,
        background: config.background,
        cutoff: config.transmittance_cutoff,
    };
    let rays: Vec<Ray> = (0..w * h).map(|i| pixel_center_ray(&pose, i % w, i / w)).collect();
    let mut samples = vec![SampleRecord::default(); w * h * n];
    let results: Vec<RayResult> = samples
        .par_chunks_mut(n)
        .zip(rays.par_iter())
        .enumerate()
        .map(|(i, (chunk, ray))| {
            if config.stratified {
                let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
                rng.set_stream(i as u64);
                march_ray(field, ray, &m, Some(&mut rng), chunk)
            } else {
                march_ray(field, ray, &m, None, chunk)
            }
        })
        .collect();

    let mut rgb = Image::new(w, h, 3);
    let mut depth = Image::new(w, h, 1);
    let mut accumulation = Image::new(w, h, 1);
    for (i, r) in results.iter().enumerate() {
        let (x, y) = (i % w, i / w);
        rgb.pixel_mut(x, y).copy_from_slice(&r.rgb);
        depth.set(x, y, 0, r.depth);
        accumulation.set(x, y, 0, r.accumulation);
    }
    Ok(RenderOutput {
        rgb,
        depth,
        accumulation,
        records: RenderRecords {
            width: w,
            height: h,
            n_samples: n,
            field_version: field.version(),
            field_resolution: field.resolution(),
            background: config.background,
            rays,
            samples,
            results,
        },
    })
}

/// Upstream gradient with respect to every ray weight, laid out like the
/// records (ray-major, `n_samples` per ray).
#[derive(Clone, Debug, PartialEq)]
pub struct WeightGrads {
    n_samples: usize,
    data: Vec<f64>,
}

impl WeightGrads {
    pub fn zeros(records: &RenderRecords) -> Self {
        Self { n_samples: records.n_samples, data: vec![0.0; records.samples.len()] }
    }

    pub fn ray(&self, i: usize) -> &[f64] {
        &self.data[i * self.n_samples..(i + 1) * self.n_samples]
    }

    pub fn ray_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.n_samples..(i + 1) * self.n_samples]
    }

    pub fn scale(&mut self, factor: f64) {
        self.data.iter_mut().for_each(|g| *g *= factor);
    }

    fn len(&self) -> usize {
        self.data.len()
    }
}

/// Per-sample upstream for the field: `(d_density, d_rgb)`.
type SampleGrad = (f64, [f64; 3]);

fn ray_adjoint(
    samples: &[SampleRecord],
    result: &RayResult,
    background: &[f64; 3],
    d_rgb: [f64; 3],
    d_depth: f64,
    d_weights: Option<&[f64]>,
    out: &mut [SampleGrad],
) {
    let acc = result.accumulation;
    let g: Vec<f64> = samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mut gi = d_rgb[0] * s.rgb[0] + d_rgb[1] * s.rgb[1] + d_rgb[2] * s.rgb[2];
            if d_depth != 0.0 {
                gi += d_depth * if acc > DEPTH_EPS { (s.t - result.depth) / acc } else { s.t / DEPTH_EPS };
            }
            if let Some(dw) = d_weights {
                gi += dw[i];
            }
            gi
        })
        .collect();
    let bg_term = (d_rgb[0] * background[0] + d_rgb[1] * background[1] + d_rgb[2] * background[2]) * result.final_transmittance;
    let mut suffix = 0.0;
    for k in (0..samples.len()).rev() {
        let s = &samples[k];
        let trans_after = s.trans - s.weight;
        let d_tau = g[k] * trans_after - suffix - bg_term;
        suffix += g[k] * s.weight;
        out[k] = (d_tau * s.delta, [d_rgb[0] * s.weight, d_rgb[1] * s.weight, d_rgb[2] * s.weight]);
    }
}

/// Push image-space gradients back into the field's gradient buffers.
pub fn render_backward(
    field: &mut VoxelField,
    records: &RenderRecords,
    d_rgb: &Image,
    d_depth: Option<&Image>,
    d_weights: Option<&WeightGrads>,
) -> Result<()> {
    if records.field_version != field.version() || records.field_resolution != field.resolution() {
        return Err(Error::InvalidState(format!(
            "render records are stale (recorded field version {}, current {})",
            records.field_version,
            field.version()
        )));
    }
    let (w, h) = (records.width, records.height);
    if d_rgb.width() != w || d_rgb.height() != h || d_rgb.channels() != 3 {
        return Err(Error::argument("d_rgb does not match the rendered image"));
    }
    if let Some(dd) = d_depth {
        if dd.width() != w || dd.height() != h || dd.channels() != 1 {
            return Err(Error::argument("d_depth does not match the rendered image"));
        }
    }
    if let Some(dw) = d_weights {
        if dw.len() != records.samples.len() {
            return Err(Error::argument("weight gradients do not match the records"));
        }
    }
    let n = records.n_samples;
    let mut per_sample = vec![(0.0, [0.0; 3]); records.samples.len()];
    per_sample.par_chunks_mut(n).enumerate().for_each(|(i, out)| {
        let result = &records.results[i];
        let active = result.n_active;
        let (x, y) = (i % w, i / w);
        let px = d_rgb.pixel(x, y);
        ray_adjoint(
            &records.samples[i * n..i * n + active],
            result,
            &records.background,
            [px[0], px[1], px[2]],
            d_depth.map_or(0.0, |d| d.get(x, y, 0)),
            d_weights.map(|dw| &dw.ray(i)[..active]),
            &mut out[..active],
        );
    });

    let mut grads = std::mem::replace(field.grads_mut(), crate::field::FieldGrads::zeros(0));
    for (i, ray) in records.rays.iter().enumerate() {
        let active = records.results[i].n_active;
        for k in 0..active {
            let (d_sigma, d_c) = per_sample[i * n + k];
            let s = &records.samples[i * n + k];
            field.query_backward_into(&mut grads, &ray.point_at(s.t), d_sigma, d_c);
        }
    }
    *field.grads_mut() = grads;
    Ok(())
}

/// Distortion of one ray: `sum_ij w_i w_j |m_i - m_j| + 1/3 sum_i w_i^2 d_i`
/// for bin midpoints `m` and widths `d`, and its gradient with respect to `w`.
/// Midpoints must be ascending.
pub fn ray_distortion(weights: &[f64], mids: &[f64], widths: &[f64], grad: Option<&mut [f64]>) -> f64 {
    let n = weights.len();
    let mut w_prefix = 0.0;
    let mut wm_prefix = 0.0;
    let mut cross = 0.0;
    let mut self_term = 0.0;
    for i in 0..n {
        cross += weights[i] * (mids[i] * w_prefix - wm_prefix);
        w_prefix += weights[i];
        wm_prefix += weights[i] * mids[i];
        self_term += weights[i] * weights[i] * widths[i];
    }
    if let Some(g) = grad {
        let (w_total, wm_total) = (w_prefix, wm_prefix);
        let mut w_before = 0.0;
        let mut wm_before = 0.0;
        for i in 0..n {
            let w_after = w_total - w_before - weights[i];
            let wm_after = wm_total - wm_before - weights[i] * mids[i];
            g[i] = 2.0 * (mids[i] * w_before - wm_before + wm_after - mids[i] * w_after) + 2.0 / 3.0 * weights[i] * widths[i];
            w_before += weights[i];
            wm_before += weights[i] * mids[i];
        }
    }
    2.0 * cross + self_term / 3.0
}

/// Mean distortion over all rays of a render, in normalized ray coordinates,
/// with the gradient with respect to every weight.
pub fn distortion_loss(records: &RenderRecords) -> (f64, WeightGrads) {
    let n = records.n_samples;
    let mids: Vec<f64> = (0..n).map(|i| (i as f64 + 0.5) / n as f64).collect();
    let widths = vec![1.0 / n as f64; n];
    let mut grads = WeightGrads::zeros(records);
    let n_rays = records.n_rays().max(1) as f64;
    let values: Vec<f64> = grads
        .data
        .par_chunks_mut(n)
        .enumerate()
        .map(|(i, g)| {
            let weights: Vec<f64> = records.samples[i * n..(i + 1) * n].iter().map(|s| s.weight).collect();
            let v = ray_distortion(&weights, &mids, &widths, Some(g));
            g.iter_mut().for_each(|x| *x /= n_rays);
            v
        })
        .collect();
    (values.iter().sum::<f64>() / n_rays, grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::Aabb;
    use crate::geometry::Intrinsics;
    use nalgebra::{Matrix3, Vector3};

    fn axis_ray() -> Ray {
        Ray { origin: Vector3::new(0.0, 0.0, -2.0), direction: Vector3::new(0.0, 0.0, 1.0) }
    }

    #[test]
    fn vacuum_renders_background() {
        let field = VoxelField::filled([4, 4, 4], Aabb::unit_cube(), -200.0, 0.0).unwrap();
        let bg = [0.2, 0.4, 0.6];
        let r = render_ray(&field, &axis_ray(), 0.5, 4.0, 32, Spacing::Uniform, bg, None).unwrap();
        assert!(r.result.accumulation < 1e-80);
        for c in 0..3 {
            assert!((r.result.rgb[c] - bg[c]).abs() < 1e-12);
        }
    }

    #[test]
    fn invalid_interval_is_rejected() {
        let field = VoxelField::new([2, 2, 2], Aabb::unit_cube()).unwrap();
        assert!(render_ray(&field, &axis_ray(), 0.0, 4.0, 8, Spacing::Uniform, [0.0; 3], None).is_err());
        assert!(render_ray(&field, &axis_ray(), 2.0, 1.0, 8, Spacing::Uniform, [0.0; 3], None).is_err());
        assert!(render_ray(&field, &axis_ray(), 0.5, 1.0, 1, Spacing::Uniform, [0.0; 3], None).is_err());
    }

    #[test]
    fn disparity_spacing_is_monotone_and_continuous() {
        let depths: Vec<f64> =
            (0..=100).map(|i| spacing_depth(Spacing::UniformThenDisparity, 0.5, 50.0, i as f64 / 100.0)).collect();
        assert!((depths[0] - 0.5).abs() < 1e-12);
        assert!((depths[50] - 1.0).abs() < 1e-12);
        assert!((depths[100] - 50.0).abs() < 1e-9);
        assert!(depths.windows(2).all(|w| w[1] > w[0]));
        assert!(spacing_depth(Spacing::UniformThenDisparity, 0.5, f64::INFINITY, 0.99).is_finite());
    }

    #[test]
    fn single_weight_distortion() {
        let w = [0.0, 0.7, 0.0];
        let mids = [0.1, 0.5, 0.9];
        let widths = [0.2, 0.3, 0.2];
        let v = ray_distortion(&w, &mids, &widths, None);
        assert!((v - 0.7 * 0.7 * 0.3 / 3.0).abs() < 1e-15);
        assert_eq!(ray_distortion(&[0.0; 3], &mids, &widths, None), 0.0);
    }

    #[test]
    fn stale_records_are_rejected() {
        let mut field = VoxelField::new([2, 2, 2], Aabb::unit_cube()).unwrap();
        let intr = Intrinsics::centered(2.0, 2, 2);
        let pose = CameraPose::new(Matrix3::identity(), Vector3::new(0.0, 0.0, -2.0), intr).unwrap();
        let cfg = RenderConfig { width: 2, height: 2, n_samples: 4, ..Default::default() };
        let out = render_image(&field, &pose, &cfg).unwrap();
        field.params_mut();
        let err = render_backward(&mut field, &out.records, &Image::new(2, 2, 3), None, None).unwrap_err();
        assert!(matches!(err, Error::InvalidState(_)));
    }
}
