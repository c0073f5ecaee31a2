//! Novel-view pose distribution: a path fitted to the training cameras
//! (ellipse or B-spline) plus bounded random perturbations.

use std::f64::consts::TAU;

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CameraPose, Intrinsics, PosedImage};

/// Axis length as a multiple of the in-plane standard deviation.
pub const ELLIPSE_AXIS_SCALE: f64 = 1.5;
pub const BSPLINE_DEGREE: usize = 3;
const MAX_RESAMPLES: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EllipsePath {
    pub center: Vector3<f64>,
    pub axis_u: Vector3<f64>,
    pub axis_v: Vector3<f64>,
    pub look_at: Vector3<f64>,
    pub up: Vector3<f64>,
    pub intrinsics: Intrinsics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BsplinePath {
    pub control_points: Vec<Vector3<f64>>,
    pub degree: usize,
    pub look_ats: Vec<Vector3<f64>>,
    pub up: Vector3<f64>,
    pub intrinsics: Intrinsics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum RawPosePath {
    Ellipse(EllipsePath),
    Bspline(BsplinePath),
}

/// Camera path that novel views are drawn from. Serializes with a `"kind"`
/// discriminator (`"ellipse"` or `"bspline"`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", try_from = "RawPosePath")]
pub enum PosePath {
    Ellipse(EllipsePath),
    Bspline(BsplinePath),
}

impl TryFrom<RawPosePath> for PosePath {
    type Error = Error;

    fn try_from(raw: RawPosePath) -> Result<Self> {
        let path = match raw {
            RawPosePath::Ellipse(e) => PosePath::Ellipse(e),
            RawPosePath::Bspline(b) => PosePath::Bspline(b),
        };
        path.validate()?;
        Ok(path)
    }
}

impl PosePath {
    pub fn validate(&self) -> Result<()> {
        let finite = |v: &Vector3<f64>| v.iter().all(|c| c.is_finite());
        match self {
            PosePath::Ellipse(e) => {
                e.intrinsics.validate()?;
                let (nu, nv) = (e.axis_u.norm(), e.axis_v.norm());
                if !(nu > 1e-9 && nv > 1e-9) {
                    return Err(Error::DegenerateGeometry("ellipse axis has zero length".into()));
                }
                if (e.axis_u.dot(&e.axis_v) / (nu * nv)).abs() >= 0.999 {
                    return Err(Error::DegenerateGeometry("ellipse axes are parallel".into()));
                }
                if ![e.center, e.look_at, e.up].iter().all(finite) || !(e.up.norm() > 1e-9) {
                    return Err(Error::DegenerateGeometry("ellipse center/look-at/up invalid".into()));
                }
            }
            PosePath::Bspline(b) => {
                b.intrinsics.validate()?;
                if b.degree < 1 {
                    return Err(Error::argument("B-spline degree must be >= 1"));
                }
                if b.control_points.len() < b.degree + 1 {
                    return Err(Error::InsufficientData { needed: b.degree + 1, got: b.control_points.len() });
                }
                if b.look_ats.len() != b.control_points.len() {
                    return Err(Error::argument("B-spline needs one look-at per control point"));
                }
                if !b.control_points.iter().chain(&b.look_ats).all(finite) || !(b.up.norm() > 1e-9) {
                    return Err(Error::DegenerateGeometry("B-spline points/up invalid".into()));
                }
            }
        }
        Ok(())
    }

    pub fn intrinsics(&self) -> &Intrinsics {
        match self {
            PosePath::Ellipse(e) => &e.intrinsics,
            PosePath::Bspline(b) => &b.intrinsics,
        }
    }

    /// Whether the parameter domain wraps around (`u = 0` and `u = 1` coincide).
    pub fn is_closed(&self) -> bool {
        matches!(self, PosePath::Ellipse(_))
    }

    /// Camera position and look-at point at path parameter `u` in `[0, 1]`.
    pub fn frame_at(&self, u: f64) -> (Vector3<f64>, Vector3<f64>) {
        match self {
            PosePath::Ellipse(e) => {
                let angle = TAU * u;
                (e.center + e.axis_u * angle.cos() + e.axis_v * angle.sin(), e.look_at)
            }
            PosePath::Bspline(b) => {
                let knots = clamped_uniform_knots(b.control_points.len(), b.degree);
                (de_boor(&b.control_points, b.degree, &knots, u), de_boor(&b.look_ats, b.degree, &knots, u))
            }
        }
    }

    pub fn up(&self) -> Vector3<f64> {
        match self {
            PosePath::Ellipse(e) => e.up,
            PosePath::Bspline(b) => b.up,
        }
    }

    /// Unperturbed camera at path parameter `u`.
    pub fn pose_at(&self, u: f64) -> Result<CameraPose> {
        let (position, look_at) = self.frame_at(u);
        CameraPose::look_at(position, look_at, self.up(), *self.intrinsics())
    }
}

/// Knot vector with `degree + 1` repeated knots at each end and uniform
/// interior spacing on `[0, 1]`.
pub fn clamped_uniform_knots(n_control: usize, degree: usize) -> Vec<f64> {
    let spans = n_control - degree;
    let mut knots = vec![0.0; degree + 1];
    for j in 1..spans {
        knots.push(j as f64 / spans as f64);
    }
    knots.extend(std::iter::repeat_n(1.0, degree + 1));
    knots
}

/// De Boor evaluation of a B-spline curve at `u` in `[0, 1]`.
pub fn de_boor(control: &[Vector3<f64>], degree: usize, knots: &[f64], u: f64) -> Vector3<f64> {
    let n = control.len();
    let u = u.clamp(0.0, 1.0);
    let mut span = degree;
    while span < n - 1 && u >= knots[span + 1] {
        span += 1;
    }
    let mut d: Vec<Vector3<f64>> = (0..=degree).map(|j| control[j + span - degree]).collect();
    for r in 1..=degree {
        for j in (r..=degree).rev() {
            let left = knots[j + span - degree];
            let right = knots[j + 1 + span - r];
            let alpha = if right > left { (u - left) / (right - left) } else { 0.0 };
            d[j] = d[j - 1] * (1.0 - alpha) + d[j] * alpha;
        }
    }
    d[degree]
}

/// Bounded perturbation ranges for novel views.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PerturbSpec {
    pub position_radius: f64,
    pub lookat_radius: f64,
    /// Radians.
    pub up_angle_max: f64,
}

impl Default for PerturbSpec {
    fn default() -> Self {
        Self { position_radius: 0.05, lookat_radius: 0.05, up_angle_max: 0.05 }
    }
}

impl PerturbSpec {
    pub const NONE: PerturbSpec = PerturbSpec { position_radius: 0.0, lookat_radius: 0.0, up_angle_max: 0.0 };

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("position_radius", self.position_radius),
            ("lookat_radius", self.lookat_radius),
            ("up_angle_max", self.up_angle_max),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::argument(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

fn centroid(points: &[Vector3<f64>]) -> Vector3<f64> {
    points.iter().sum::<Vector3<f64>>() / points.len() as f64
}

fn mean_up(poses: &[CameraPose]) -> Result<Vector3<f64>> {
    let up: Vector3<f64> = poses.iter().map(|p| p.up()).sum();
    let norm = up.norm();
    if !(norm > 1e-9) {
        return Err(Error::DegenerateGeometry("camera up vectors cancel out".into()));
    }
    Ok(up / norm)
}

/// Flip an eigenvector so its largest-magnitude component is positive.
fn canonical_sign(v: Vector3<f64>) -> Vector3<f64> {
    let i = v.iamax();
    if v[i] < 0.0 {
        -v
    } else {
        v
    }
}

/// Ellipse through the camera positions' best-fit plane, facing `focus`.
pub fn fit_ellipse_path(poses: &[CameraPose], focus: Vector3<f64>) -> Result<PosePath> {
    if poses.len() < 3 {
        return Err(Error::InsufficientData { needed: 3, got: poses.len() });
    }
    let positions: Vec<Vector3<f64>> = poses.iter().map(|p| p.position()).collect();
    let center = centroid(&positions);
    let mut cov = Matrix3::zeros();
    for p in &positions {
        let d = p - center;
        cov += d * d.transpose();
    }
    cov /= positions.len() as f64;

    let eig = cov.symmetric_eigen();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let (l1, l2) = (eig.eigenvalues[order[0]], eig.eigenvalues[order[1]]);
    let scale_ref = cov.trace().max(f64::MIN_POSITIVE);
    if !(l1 > 1e-12 * scale_ref.max(1.0)) || !(l2 > 1e-10 * l1) {
        return Err(Error::DegenerateGeometry("camera positions are collinear".into()));
    }
    let e1 = canonical_sign(eig.eigenvectors.column(order[0]).into_owned());
    let e2 = canonical_sign(eig.eigenvectors.column(order[1]).into_owned());

    let path = PosePath::Ellipse(EllipsePath {
        center,
        axis_u: e1 * (ELLIPSE_AXIS_SCALE * l1.sqrt()),
        axis_v: e2 * (ELLIPSE_AXIS_SCALE * l2.sqrt()),
        look_at: focus,
        up: mean_up(poses)?,
        intrinsics: *poses[0].intrinsics(),
    });
    path.validate()?;
    Ok(path)
}

/// Clamped cubic B-spline through the capture order of the cameras.
pub fn fit_bspline_path(poses: &[CameraPose]) -> Result<PosePath> {
    if poses.len() < BSPLINE_DEGREE + 1 {
        return Err(Error::InsufficientData { needed: BSPLINE_DEGREE + 1, got: poses.len() });
    }
    let path = PosePath::Bspline(BsplinePath {
        control_points: poses.iter().map(|p| p.position()).collect(),
        degree: BSPLINE_DEGREE,
        look_ats: poses.iter().map(|p| p.position() + p.forward()).collect(),
        up: mean_up(poses)?,
        intrinsics: *poses[0].intrinsics(),
    });
    path.validate()?;
    Ok(path)
}

/// Uniform sample from the ball of the given radius (rejection from the cube).
pub fn uniform_in_ball<R: Rng + ?Sized>(rng: &mut R, radius: f64) -> Vector3<f64> {
    loop {
        let v = Vector3::new(rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0));
        if v.norm_squared() <= 1.0 {
            return v * radius;
        }
    }
}

/// Rodrigues rotation of `v` about the unit `axis`.
fn rotate_about(v: Vector3<f64>, axis: Vector3<f64>, angle: f64) -> Vector3<f64> {
    let (s, c) = angle.sin_cos();
    v * c + axis.cross(&v) * s + axis * (axis.dot(&v) * (1.0 - c))
}

/// Draw one perturbed camera from the path.
pub fn sample_novel_pose<R: Rng + ?Sized>(path: &PosePath, perturb: &PerturbSpec, rng: &mut R) -> Result<CameraPose> {
    perturb.validate()?;
    for _ in 0..MAX_RESAMPLES {
        let u: f64 = rng.random_range(0.0..1.0);
        let (base, look_base) = path.frame_at(u);
        let position = base + uniform_in_ball(rng, perturb.position_radius);
        let look_at = look_base + uniform_in_ball(rng, perturb.lookat_radius);
        let angle = if perturb.up_angle_max > 0.0 { rng.random_range(-perturb.up_angle_max..=perturb.up_angle_max) } else { 0.0 };
        let to_target = look_at - position;
        if !(to_target.norm() >= 1e-9) {
            continue;
        }
        let up = rotate_about(path.up(), to_target.normalize(), angle);
        match CameraPose::look_at(position, look_at, up, *path.intrinsics()) {
            Ok(pose) => return Ok(pose),
            Err(Error::DegenerateGeometry(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    Err(Error::DegenerateGeometry(format!("no valid novel pose after {MAX_RESAMPLES} draws")))
}

/// Indices of the `k` positions closest to `target`, ascending by distance,
/// ties broken by index.
pub fn nearest_positions(target: Vector3<f64>, positions: &[Vector3<f64>], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > positions.len() {
        return Err(Error::Bounds(format!("k = {k} with {} candidates", positions.len())));
    }
    let mut order: Vec<(f64, usize)> = positions.iter().enumerate().map(|(i, p)| ((p - target).norm(), i)).collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    Ok(order.into_iter().take(k).map(|(_, i)| i).collect())
}

pub fn nearest_views(target: &CameraPose, observations: &[PosedImage], k: usize) -> Result<Vec<usize>> {
    let positions: Vec<Vector3<f64>> = observations.iter().map(|o| o.pose().position()).collect();
    nearest_positions(target.position(), &positions, k)
}
