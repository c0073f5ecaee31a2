//! Pinhole cameras, rays, and scene normalization.
//!
//! Convention: rotations are camera-to-world; in the camera frame +z looks
//! forward, +x points right and +y points down. Pixel `(u, v)` is a
//! continuous coordinate with pixel centers at half-integers.

use nalgebra::{Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

const ORTHONORMAL_TOL: f64 = 1e-9;
const FOCUS_MAX_CONDITION: f64 = 1e12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Intrinsics {
    pub focal_px: f64,
    pub principal_point: Vector2<f64>,
    pub width: u32,
    pub height: u32,
}

impl Intrinsics {
    /// Square-pixel intrinsics with the principal point at the image center.
    pub fn centered(focal_px: f64, width: u32, height: u32) -> Self {
        Self { focal_px, principal_point: Vector2::new(width as f64 / 2.0, height as f64 / 2.0), width, height }
    }

    /// Intrinsics for the same field of view at another resolution.
    pub fn resized(&self, width: u32, height: u32) -> Self {
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        Self {
            focal_px: self.focal_px * sx,
            principal_point: Vector2::new(self.principal_point.x * sx, self.principal_point.y * sy),
            width,
            height,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.focal_px.is_finite() && self.focal_px > 0.0) {
            return Err(Error::InvalidPose(format!("focal length {} must be positive", self.focal_px)));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidPose("image size must be positive".into()));
        }
        let (cx, cy) = (self.principal_point.x, self.principal_point.y);
        if !(cx >= 0.0 && cx <= self.width as f64 && cy >= 0.0 && cy <= self.height as f64) {
            return Err(Error::InvalidPose(format!("principal point ({cx}, {cy}) outside the image")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraPose {
    rotation: Matrix3<f64>,
    position: Vector3<f64>,
    intrinsics: Intrinsics,
}

impl CameraPose {
    pub fn new(rotation: Matrix3<f64>, position: Vector3<f64>, intrinsics: Intrinsics) -> Result<Self> {
        let residual = (rotation.transpose() * rotation - Matrix3::identity()).amax();
        if !(residual <= ORTHONORMAL_TOL) {
            return Err(Error::InvalidPose(format!("rotation is not orthonormal (residual {residual:e})")));
        }
        if rotation.determinant() <= 0.0 {
            return Err(Error::InvalidPose("rotation has negative determinant".into()));
        }
        if !position.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidPose("position must be finite".into()));
        }
        intrinsics.validate()?;
        Ok(Self { rotation, position, intrinsics })
    }

    /// Camera at `position` looking at `target`, rolled so that `up` points up
    /// in the image.
    pub fn look_at(position: Vector3<f64>, target: Vector3<f64>, up: Vector3<f64>, intrinsics: Intrinsics) -> Result<Self> {
        Self::new(look_at_rotation(position, target, up)?, position, intrinsics)
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn position(&self) -> Vector3<f64> {
        self.position
    }

    pub fn intrinsics(&self) -> &Intrinsics {
        &self.intrinsics
    }

    pub fn focal_px(&self) -> f64 {
        self.intrinsics.focal_px
    }

    pub fn principal_point(&self) -> Vector2<f64> {
        self.intrinsics.principal_point
    }

    pub fn width(&self) -> u32 {
        self.intrinsics.width
    }

    pub fn height(&self) -> u32 {
        self.intrinsics.height
    }

    /// Optical axis direction in world coordinates.
    pub fn forward(&self) -> Vector3<f64> {
        self.rotation.column(2).into_owned()
    }

    /// World direction that appears as "up" in the image (negated camera +y).
    pub fn up(&self) -> Vector3<f64> {
        -self.rotation.column(1).into_owned()
    }

    pub fn with_position(&self, position: Vector3<f64>) -> Self {
        Self { position, ..*self }
    }

    pub fn with_intrinsics(&self, intrinsics: Intrinsics) -> Result<Self> {
        intrinsics.validate()?;
        Ok(Self { intrinsics, ..*self })
    }

    /// Same camera rendered at another resolution.
    pub fn resized(&self, width: u32, height: u32) -> Self {
        Self { intrinsics: self.intrinsics.resized(width, height), ..*self }
    }

    pub fn to_record(&self) -> PoseRecord {
        let r = &self.rotation;
        PoseRecord {
            rotation: [r[(0, 0)], r[(0, 1)], r[(0, 2)], r[(1, 0)], r[(1, 1)], r[(1, 2)], r[(2, 0)], r[(2, 1)], r[(2, 2)]],
            position: [self.position.x, self.position.y, self.position.z],
            focal_px: self.intrinsics.focal_px,
            principal_point: [self.intrinsics.principal_point.x, self.intrinsics.principal_point.y],
            image_size: [self.intrinsics.width, self.intrinsics.height],
        }
    }
}

/// Flat JSON form of a camera pose; the rotation is row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseRecord {
    pub rotation: [f64; 9],
    pub position: [f64; 3],
    pub focal_px: f64,
    pub principal_point: [f64; 2],
    pub image_size: [u32; 2],
}

impl TryFrom<PoseRecord> for CameraPose {
    type Error = Error;

    fn try_from(rec: PoseRecord) -> Result<Self> {
        let rotation = Matrix3::from_row_slice(&rec.rotation);
        let intrinsics = Intrinsics {
            focal_px: rec.focal_px,
            principal_point: Vector2::new(rec.principal_point[0], rec.principal_point[1]),
            width: rec.image_size[0],
            height: rec.image_size[1],
        };
        CameraPose::new(rotation, Vector3::from(rec.position), intrinsics)
    }
}

impl Serialize for CameraPose {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_record().serialize(s)
    }
}

impl<'de> Deserialize<'de> for CameraPose {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let rec = PoseRecord::deserialize(d)?;
        CameraPose::try_from(rec).map_err(serde::de::Error::custom)
    }
}

/// Parse a JSON array of pose records.
pub fn poses_from_json(bytes: &[u8]) -> Result<Vec<CameraPose>> {
    Ok(serde_json::from_slice(bytes)?)
}

pub fn look_at_rotation(position: Vector3<f64>, target: Vector3<f64>, up: Vector3<f64>) -> Result<Matrix3<f64>> {
    let to_target = target - position;
    let dist = to_target.norm();
    if !(dist > 1e-9) {
        return Err(Error::DegenerateGeometry("look-at target coincides with camera".into()));
    }
    let forward = to_target / dist;
    let side = forward.cross(&up);
    let side_norm = side.norm();
    if !(side_norm > 1e-9) {
        return Err(Error::DegenerateGeometry("up vector is parallel to the view direction".into()));
    }
    let right = side / side_norm;
    let true_up = right.cross(&forward);
    Ok(Matrix3::from_columns(&[right, -true_up, forward]))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vector3<f64>,
    pub direction: Vector3<f64>,
}

impl Ray {
    pub fn point_at(&self, t: f64) -> Vector3<f64> {
        self.origin + self.direction * t
    }
}

#[derive(Clone, Debug)]
pub struct PosedImage {
    image: Image,
    pose: CameraPose,
}

impl PosedImage {
    pub fn new(image: Image, pose: CameraPose) -> Result<Self> {
        if image.width() != pose.width() as usize || image.height() != pose.height() as usize || image.channels() != 3 {
            return Err(Error::argument(format!(
                "image {}x{}x{} does not match pose size {}x{}",
                image.width(),
                image.height(),
                image.channels(),
                pose.width(),
                pose.height()
            )));
        }
        Ok(Self { image, pose })
    }

    pub fn image(&self) -> &Image {
        &self.image
    }

    pub fn pose(&self) -> &CameraPose {
        &self.pose
    }
}

pub fn ray_for_pixel(pose: &CameraPose, pixel: Vector2<f64>) -> Result<Ray> {
    let (w, h) = (pose.width() as f64, pose.height() as f64);
    if !(pixel.x >= 0.0 && pixel.x <= w && pixel.y >= 0.0 && pixel.y <= h) {
        return Err(Error::Bounds(format!("pixel ({}, {}) outside {w}x{h} image", pixel.x, pixel.y)));
    }
    Ok(unchecked_ray(pose, pixel.x, pixel.y))
}

/// Ray through `(u, v)` without the bounds check; used by the renderers on
/// pixel centers they generate themselves.
#[inline]
pub(crate) fn unchecked_ray(pose: &CameraPose, u: f64, v: f64) -> Ray {
    let f = pose.intrinsics.focal_px;
    let c = pose.intrinsics.principal_point;
    let cam = Vector3::new((u - c.x) / f, (v - c.y) / f, 1.0);
    Ray { origin: pose.position, direction: (pose.rotation * cam).normalize() }
}

/// Ray through the center of integer pixel `(x, y)`.
#[inline]
pub fn pixel_center_ray(pose: &CameraPose, x: usize, y: usize) -> Ray {
    unchecked_ray(pose, x as f64 + 0.5, y as f64 + 0.5)
}

/// Pixel coordinate and camera-frame depth of a world point.
pub fn project(pose: &CameraPose, point: Vector3<f64>) -> Result<(Vector2<f64>, f64)> {
    let cam = pose.rotation.transpose() * (point - pose.position);
    if !(cam.z > 1e-9) {
        return Err(Error::BehindCamera { z: cam.z });
    }
    let f = pose.intrinsics.focal_px;
    let c = pose.intrinsics.principal_point;
    Ok((Vector2::new(f * cam.x / cam.z + c.x, f * cam.y / cam.z + c.y), cam.z))
}

/// Point with the least summed squared distance to every camera's optical axis.
pub fn focus_point(poses: &[CameraPose]) -> Result<Vector3<f64>> {
    if poses.len() < 2 {
        return Err(Error::InsufficientData { needed: 2, got: poses.len() });
    }
    let mut a = Matrix3::zeros();
    let mut b = Vector3::zeros();
    for pose in poses {
        let d = pose.forward();
        let proj = Matrix3::identity() - d * d.transpose();
        a += proj;
        b += proj * pose.position;
    }
    let eig = a.symmetric_eigen();
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    if !(min > 0.0) || max / min > FOCUS_MAX_CONDITION {
        return Err(Error::DegenerateGeometry(format!(
            "optical axes are (nearly) parallel: condition number {:e}",
            if min > 0.0 { max / min } else { f64::INFINITY }
        )));
    }
    a.lu().solve(&b).ok_or_else(|| Error::DegenerateGeometry("focus-point system is singular".into()))
}

/// Scene normalization applied to every pose: `p' = (p + translation) * scale`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SceneTransform {
    pub scale: f64,
    pub translation: Vector3<f64>,
}

impl SceneTransform {
    pub const IDENTITY: SceneTransform = SceneTransform { scale: 1.0, translation: Vector3::new(0.0, 0.0, 0.0) };

    pub fn apply_point(&self, p: Vector3<f64>) -> Vector3<f64> {
        (p + self.translation) * self.scale
    }

    pub fn invert_point(&self, p: Vector3<f64>) -> Vector3<f64> {
        p / self.scale - self.translation
    }

    pub fn apply_pose(&self, pose: &CameraPose) -> CameraPose {
        pose.with_position(self.apply_point(pose.position))
    }
}

/// Move the focus point to the origin and scale camera positions into [-1, 1]^3.
pub fn rescale_scene(poses: &[CameraPose]) -> Result<(Vec<CameraPose>, SceneTransform)> {
    let focus = focus_point(poses)?;
    let translation = -focus;
    let extent = poses.iter().map(|p| (p.position + translation).amax()).fold(0.0_f64, f64::max);
    if !(extent > 1e-12) {
        return Err(Error::DegenerateGeometry("all cameras coincide with the focus point".into()));
    }
    let transform = SceneTransform { scale: 1.0 / extent, translation };
    Ok((poses.iter().map(|p| transform.apply_pose(p)).collect(), transform))
}
