//! Dense voxel radiance field with trilinear interpolation.
//!
//! Raw parameters live on grid nodes spanning the bounding box corner to
//! corner. Queries interpolate the raw values first and activate afterwards
//! (softplus for density, sigmoid for color).

use std::fs;
use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"VOXF1";
pub const DEFAULT_RESOLUTION: usize = 64;
pub const INIT_DENSITY_PARAM: f64 = -2.0;
pub const INIT_COLOR_PARAM: f64 = 0.0;
/// Color reported for points outside the bounding box.
pub const OUTSIDE_RGB: [f64; 3] = [0.5, 0.5, 0.5];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: Vector3<f64>,
    pub max: Vector3<f64>,
}

impl Aabb {
    pub fn new(min: Vector3<f64>, max: Vector3<f64>) -> Result<Self> {
        let ok = (0..3).all(|i| min[i].is_finite() && max[i].is_finite() && min[i] < max[i]);
        if !ok {
            return Err(Error::argument(format!("invalid bounding box {min:?}..{max:?}")));
        }
        Ok(Self { min, max })
    }

    /// The normalized scene cube [-1, 1]^3.
    pub fn unit_cube() -> Self {
        Self { min: Vector3::repeat(-1.0), max: Vector3::repeat(1.0) }
    }

    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }

    /// Parametric entry/exit distances of a ray, if it hits the box.
    pub fn ray_interval(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<(f64, f64)> {
        let mut t0 = f64::NEG_INFINITY;
        let mut t1 = f64::INFINITY;
        for i in 0..3 {
            let inv = 1.0 / dir[i];
            let mut a = (self.min[i] - origin[i]) * inv;
            let mut b = (self.max[i] - origin[i]) * inv;
            if a.is_nan() || b.is_nan() {
                // origin on a slab plane with a parallel ray
                if origin[i] < self.min[i] || origin[i] > self.max[i] {
                    return None;
                }
                continue;
            }
            if a > b {
                std::mem::swap(&mut a, &mut b);
            }
            t0 = t0.max(a);
            t1 = t1.min(b);
        }
        (t0 <= t1).then_some((t0, t1))
    }
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse of [`softplus`] for positive arguments.
pub fn softplus_inverse(y: f64) -> f64 {
    assert!(y > 0.0, "softplus_inverse needs y > 0");
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Activated field value at a point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FieldSample {
    pub density: f64,
    pub rgb: [f64; 3],
}

/// Eight interpolation corners of one query point.
#[derive(Clone, Copy, Debug)]
pub struct Trilinear {
    pub nodes: [usize; 8],
    pub weights: [f64; 8],
}

/// Gradient buffers with the same layout as the field parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldGrads {
    pub density: Vec<f64>,
    pub color: Vec<f64>,
}

impl FieldGrads {
    pub fn zeros(n_nodes: usize) -> Self {
        Self { density: vec![0.0; n_nodes], color: vec![0.0; 3 * n_nodes] }
    }

    pub fn clear(&mut self) {
        self.density.iter_mut().for_each(|g| *g = 0.0);
        self.color.iter_mut().for_each(|g| *g = 0.0);
    }

    /// Sum another shard into this one.
    pub fn merge(&mut self, other: &FieldGrads) {
        self.density.iter_mut().zip(&other.density).for_each(|(a, b)| *a += b);
        self.color.iter_mut().zip(&other.color).for_each(|(a, b)| *a += b);
    }

    pub fn is_zero(&self) -> bool {
        self.density.iter().chain(&self.color).all(|&g| g == 0.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VoxelField {
    resolution: [usize; 3],
    bbox: Aabb,
    density_param: Vec<f64>,
    color_param: Vec<f64>,
    grads: FieldGrads,
    version: u64,
}

impl VoxelField {
    /// Field with the standard near-transparent gray initialization.
    pub fn new(resolution: [usize; 3], bbox: Aabb) -> Result<Self> {
        Self::filled(resolution, bbox, INIT_DENSITY_PARAM, INIT_COLOR_PARAM)
    }

    pub fn filled(resolution: [usize; 3], bbox: Aabb, density: f64, color: f64) -> Result<Self> {
        if resolution.iter().any(|&n| n < 2) {
            return Err(Error::argument(format!("resolution {resolution:?} must be >= 2 per axis")));
        }
        let n = resolution
            .iter()
            .try_fold(1usize, |acc, &r| acc.checked_mul(r))
            .filter(|n| n.checked_mul(3).is_some())
            .ok_or_else(|| Error::argument("resolution overflows"))?;
        Ok(Self {
            resolution,
            bbox,
            density_param: vec![density; n],
            color_param: vec![color; 3 * n],
            grads: FieldGrads::zeros(n),
            version: 0,
        })
    }

    pub fn from_params(resolution: [usize; 3], bbox: Aabb, density_param: Vec<f64>, color_param: Vec<f64>) -> Result<Self> {
        let mut field = Self::filled(resolution, bbox, 0.0, 0.0)?;
        if density_param.len() != field.n_nodes() || color_param.len() != 3 * field.n_nodes() {
            return Err(Error::argument("parameter arrays do not match the resolution"));
        }
        field.density_param = density_param;
        field.color_param = color_param;
        Ok(field)
    }

    pub fn resolution(&self) -> [usize; 3] {
        self.resolution
    }

    pub fn bbox(&self) -> &Aabb {
        &self.bbox
    }

    pub fn n_nodes(&self) -> usize {
        self.density_param.len()
    }

    /// Monotone counter bumped on every parameter mutation; render records
    /// remember it so a stale backward pass can be detected.
    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn density_params(&self) -> &[f64] {
        &self.density_param
    }

    pub fn color_params(&self) -> &[f64] {
        &self.color_param
    }

    /// Mutable access to `(density, color)` parameters; bumps the version.
    pub fn params_mut(&mut self) -> (&mut [f64], &mut [f64]) {
        self.version += 1;
        (&mut self.density_param, &mut self.color_param)
    }

    pub fn grads(&self) -> &FieldGrads {
        &self.grads
    }

    pub fn grads_mut(&mut self) -> &mut FieldGrads {
        &mut self.grads
    }

    pub fn zero_grads(&mut self) {
        self.grads.clear();
    }

    /// Parameters and gradients at once, for optimizer steps.
    pub fn params_and_grads_mut(&mut self) -> (&mut [f64], &mut [f64], &FieldGrads) {
        self.version += 1;
        (&mut self.density_param, &mut self.color_param, &self.grads)
    }

    #[inline]
    pub fn node_index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.resolution[0] * (j + self.resolution[1] * k)
    }

    pub fn node_position(&self, i: usize, j: usize, k: usize) -> Vector3<f64> {
        let ext = self.bbox.max - self.bbox.min;
        Vector3::new(
            self.bbox.min.x + ext.x * i as f64 / (self.resolution[0] - 1) as f64,
            self.bbox.min.y + ext.y * j as f64 / (self.resolution[1] - 1) as f64,
            self.bbox.min.z + ext.z * k as f64 / (self.resolution[2] - 1) as f64,
        )
    }

    /// Interpolation corners, or `None` outside the bounding box.
    #[inline]
    pub fn locate(&self, p: &Vector3<f64>) -> Option<Trilinear> {
        if !self.bbox.contains(p) {
            return None;
        }
        let mut cell = [0usize; 3];
        let mut frac = [0.0f64; 3];
        for a in 0..3 {
            let n = self.resolution[a];
            let g = (p[a] - self.bbox.min[a]) / (self.bbox.max[a] - self.bbox.min[a]) * (n - 1) as f64;
            let c = (g.floor() as usize).min(n - 2);
            cell[a] = c;
            frac[a] = g - c as f64;
        }
        let (nx, nxy) = (self.resolution[0], self.resolution[0] * self.resolution[1]);
        let base = cell[0] + nx * cell[1] + nxy * cell[2];
        let [fx, fy, fz] = frac;
        let (gx, gy, gz) = (1.0 - fx, 1.0 - fy, 1.0 - fz);
        Some(Trilinear {
            nodes: [base, base + 1, base + nx, base + nx + 1, base + nxy, base + nxy + 1, base + nxy + nx, base + nxy + nx + 1],
            weights: [
                gx * gy * gz,
                fx * gy * gz,
                gx * fy * gz,
                fx * fy * gz,
                gx * gy * fz,
                fx * gy * fz,
                gx * fy * fz,
                fx * fy * fz,
            ],
        })
    }

    /// Interpolated raw (pre-activation) density and color parameters.
    #[inline]
    pub fn interpolate_raw(&self, tri: &Trilinear) -> (f64, [f64; 3]) {
        let mut d = 0.0;
        let mut c = [0.0; 3];
        for (&node, &w) in tri.nodes.iter().zip(&tri.weights) {
            d += w * self.density_param[node];
            let cp = &self.color_param[3 * node..3 * node + 3];
            c[0] += w * cp[0];
            c[1] += w * cp[1];
            c[2] += w * cp[2];
        }
        (d, c)
    }

    #[inline]
    pub fn query(&self, p: &Vector3<f64>) -> FieldSample {
        match self.locate(p) {
            None => FieldSample { density: 0.0, rgb: OUTSIDE_RGB },
            Some(tri) => {
                let (d, c) = self.interpolate_raw(&tri);
                FieldSample { density: softplus(d), rgb: [sigmoid(c[0]), sigmoid(c[1]), sigmoid(c[2])] }
            }
        }
    }

    /// Accumulate the gradient of `d_density * density + d_rgb . rgb` at `p`
    /// into the field's own buffers.
    pub fn query_backward(&mut self, p: &Vector3<f64>, d_density: f64, d_rgb: [f64; 3]) {
        let mut grads = std::mem::replace(&mut self.grads, FieldGrads::zeros(0));
        self.query_backward_into(&mut grads, p, d_density, d_rgb);
        self.grads = grads;
    }

    /// Same as [`VoxelField::query_backward`] but into a caller-owned shard.
    #[inline]
    pub fn query_backward_into(&self, grads: &mut FieldGrads, p: &Vector3<f64>, d_density: f64, d_rgb: [f64; 3]) {
        if d_density == 0.0 && d_rgb == [0.0; 3] {
            return;
        }
        let Some(tri) = self.locate(p) else { return };
        let (d, c) = self.interpolate_raw(&tri);
        // softplus' = sigmoid, sigmoid' = s (1 - s)
        let gd = d_density * sigmoid(d);
        let mut gc = [0.0; 3];
        for ch in 0..3 {
            let s = sigmoid(c[ch]);
            gc[ch] = d_rgb[ch] * s * (1.0 - s);
        }
        for (&node, &w) in tri.nodes.iter().zip(&tri.weights) {
            grads.density[node] += w * gd;
            let g = &mut grads.color[3 * node..3 * node + 3];
            g[0] += w * gc[0];
            g[1] += w * gc[1];
            g[2] += w * gc[2];
        }
    }

    /// Binary checkpoint: magic, resolution (3 x u32), bbox (6 x f64), then
    /// density and per-node RGB color parameters as f32, all little-endian,
    /// x-fastest node order.
    pub fn encode_checkpoint(&self) -> Vec<u8> {
        let n = self.n_nodes();
        let mut out = Vec::with_capacity(5 + 12 + 48 + 16 * n);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        for &r in &self.resolution {
            out.extend_from_slice(&(r as u32).to_le_bytes());
        }
        for v in self.bbox.min.iter().chain(self.bbox.max.iter()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in self.density_param.iter().chain(&self.color_param) {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        out
    }

    pub fn decode_checkpoint(bytes: &[u8]) -> Result<Self> {
        let header = 5 + 12 + 48;
        if bytes.len() < header {
            return Err(Error::Decode(format!("checkpoint too short ({} bytes)", bytes.len())));
        }
        if &bytes[..5] != CHECKPOINT_MAGIC {
            return Err(Error::Decode("bad checkpoint magic".into()));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
        let f64_at = |o: usize| f64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
        let resolution = [u32_at(5), u32_at(9), u32_at(13)];
        if resolution.iter().any(|&r| r < 2) {
            return Err(Error::Decode(format!("invalid resolution {resolution:?}")));
        }
        let bbox = Aabb::new(Vector3::new(f64_at(17), f64_at(25), f64_at(33)), Vector3::new(f64_at(41), f64_at(49), f64_at(57)))
            .map_err(|e| Error::Decode(e.to_string()))?;
        let n = resolution
            .iter()
            .try_fold(1usize, |acc, &r| acc.checked_mul(r))
            .ok_or_else(|| Error::Decode("resolution overflows".into()))?;
        let expected =
            n.checked_mul(16).and_then(|b| b.checked_add(header)).ok_or_else(|| Error::Decode("resolution overflows".into()))?;
        if bytes.len() != expected {
            return Err(Error::Decode(format!("checkpoint has {} bytes, expected {expected}", bytes.len())));
        }
        let mut values = bytes[header..].chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64);
        let density: Vec<f64> = values.by_ref().take(n).collect();
        let color: Vec<f64> = values.collect();
        if density.iter().chain(&color).any(|v| !v.is_finite()) {
            return Err(Error::Decode("non-finite parameter in checkpoint".into()));
        }
        VoxelField::from_params(resolution, bbox, density, color)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.encode_checkpoint()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode_checkpoint(&bytes)
    }
}
