//! Procedural sphere/box scenes with an analytic Lambertian ray tracer, view
//! generation along a camera path, and dataset directories on disk.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{softplus_inverse, Aabb, VoxelField};
use crate::geometry::{pixel_center_ray, CameraPose, Intrinsics, PoseRecord, PosedImage, Ray, SceneTransform};
use crate::image::Image;
use crate::posedist::{EllipsePath, PosePath};

pub const SCENE_HALF_EXTENT: f64 = 0.8;
pub const AMBIENT: f64 = 0.3;
const PLACEMENT_RADIUS: f64 = 0.55;
const MAX_REJECTIONS: usize = 1000;
const HIT_EPS: f64 = 1e-9;
pub const DATASET_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Primitive {
    Sphere { center: Vector3<f64>, radius: f64, albedo: [f64; 3] },
    Box { min: Vector3<f64>, max: Vector3<f64>, albedo: [f64; 3] },
}

impl Primitive {
    pub fn albedo(&self) -> [f64; 3] {
        match self {
            Primitive::Sphere { albedo, .. } | Primitive::Box { albedo, .. } => *albedo,
        }
    }

    fn validate(&self, contained: bool) -> Result<()> {
        let albedo_ok = self.albedo().iter().all(|a| (0.0..=1.0).contains(a));
        let shape_ok = match self {
            Primitive::Sphere { center, radius, .. } => {
                *radius > 0.0
                    && radius.is_finite()
                    && center.iter().all(|c| c.is_finite() && (!contained || c.abs() + radius <= 1.0))
            }
            Primitive::Box { min, max, .. } => (0..3).all(|i| {
                min[i].is_finite() && max[i].is_finite() && min[i] < max[i] && (!contained || (min[i] >= -1.0 && max[i] <= 1.0))
            }),
        };
        if albedo_ok && shape_ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid primitive {self:?}")))
        }
    }

    /// Signed distance (negative inside).
    pub fn signed_distance(&self, p: &Vector3<f64>) -> f64 {
        match self {
            Primitive::Sphere { center, radius, .. } => (p - center).norm() - radius,
            Primitive::Box { min, max, .. } => {
                let c = (min + max) * 0.5;
                let h = (max - min) * 0.5;
                let q = (p - c).abs() - h;
                let outside = q.map(|v| v.max(0.0)).norm();
                outside + q.max().min(0.0)
            }
        }
    }

    /// Outward surface normal associated with the point (closest face for boxes).
    pub fn normal_at(&self, p: &Vector3<f64>) -> Vector3<f64> {
        match self {
            Primitive::Sphere { center, .. } => {
                let d = p - center;
                if d.norm() > 0.0 {
                    d.normalize()
                } else {
                    Vector3::z()
                }
            }
            Primitive::Box { min, max, .. } => {
                let c = (min + max) * 0.5;
                let h = (max - min) * 0.5;
                let q = (p - c).abs() - h;
                let axis = q.imax();
                let mut n = Vector3::zeros();
                n[axis] = if p[axis] >= c[axis] { 1.0 } else { -1.0 };
                n
            }
        }
    }

    /// Nearest hit distance along the ray beyond a small epsilon.
    pub fn intersect(&self, ray: &Ray) -> Option<(f64, Vector3<f64>)> {
        match self {
            Primitive::Sphere { center, radius, .. } => {
                let oc = ray.origin - center;
                let b = oc.dot(&ray.direction);
                let c = oc.norm_squared() - radius * radius;
                let disc = b * b - c;
                if disc < 0.0 {
                    return None;
                }
                let sq = disc.sqrt();
                let t = if -b - sq > HIT_EPS { -b - sq } else { -b + sq };
                (t > HIT_EPS).then(|| (t, (ray.point_at(t) - center) / *radius))
            }
            Primitive::Box { min, max, .. } => {
                let mut t0 = f64::NEG_INFINITY;
                let mut t1 = f64::INFINITY;
                let mut axis0 = 0;
                let mut axis1 = 0;
                for i in 0..3 {
                    let d = ray.direction[i];
                    let o = ray.origin[i];
                    if d.abs() < 1e-300 {
                        if o < min[i] || o > max[i] {
                            return None;
                        }
                        continue;
                    }
                    let mut a = (min[i] - o) / d;
                    let mut b = (max[i] - o) / d;
                    if a > b {
                        std::mem::swap(&mut a, &mut b);
                    }
                    if a > t0 {
                        t0 = a;
                        axis0 = i;
                    }
                    if b < t1 {
                        t1 = b;
                        axis1 = i;
                    }
                }
                if t0 > t1 {
                    return None;
                }
                let (t, axis, sign) = if t0 > HIT_EPS {
                    (t0, axis0, -ray.direction[axis0].signum())
                } else if t1 > HIT_EPS {
                    (t1, axis1, ray.direction[axis1].signum())
                } else {
                    return None;
                };
                let mut n = Vector3::zeros();
                n[axis] = sign;
                Some((t, n))
            }
        }
    }

    fn bounding_sphere(&self) -> (Vector3<f64>, f64) {
        match self {
            Primitive::Sphere { center, radius, .. } => (*center, *radius),
            Primitive::Box { min, max, .. } => ((min + max) * 0.5, ((max - min) * 0.5).norm()),
        }
    }

    fn transformed(&self, t: &SceneTransform) -> Primitive {
        match *self {
            Primitive::Sphere { center, radius, albedo } => {
                Primitive::Sphere { center: t.apply_point(center), radius: radius * t.scale, albedo }
            }
            Primitive::Box { min, max, albedo } => Primitive::Box { min: t.apply_point(min), max: t.apply_point(max), albedo },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticScene {
    pub primitives: Vec<Primitive>,
    pub background: [f64; 3],
    /// Unit direction towards the light.
    pub light_dir: Vector3<f64>,
}

pub fn default_light_dir() -> Vector3<f64> {
    Vector3::new(0.3, 0.5, 1.0).normalize()
}

impl SyntheticScene {
    pub fn new(primitives: Vec<Primitive>, background: [f64; 3]) -> Result<Self> {
        let scene = Self { primitives, background, light_dir: default_light_dir() };
        scene.validate()?;
        Ok(scene)
    }

    /// Checks the invariants, including containment in [-1, 1]^3.
    pub fn validate(&self) -> Result<()> {
        for p in &self.primitives {
            p.validate(true)?;
        }
        self.validate_renderable()
    }

    /// Checks everything except containment.
    pub fn validate_renderable(&self) -> Result<()> {
        for p in &self.primitives {
            p.validate(false)?;
        }
        if !self.background.iter().all(|b| (0.0..=1.0).contains(b)) {
            return Err(Error::Config("background must be in [0, 1]".into()));
        }
        if !((self.light_dir.norm() - 1.0).abs() < 1e-9) {
            return Err(Error::Config("light_dir must be a unit vector".into()));
        }
        Ok(())
    }

    /// Same scene with every primitive mapped through `t`. The result may
    /// leave the canonical cube; it is meant for rendering in a normalized
    /// frame.
    pub fn transformed(&self, t: &SceneTransform) -> SyntheticScene {
        SyntheticScene {
            primitives: self.primitives.iter().map(|p| p.transformed(t)).collect(),
            background: self.background,
            light_dir: self.light_dir,
        }
    }

    pub fn shade(&self, albedo: [f64; 3], normal: &Vector3<f64>) -> [f64; 3] {
        let k = AMBIENT + (1.0 - AMBIENT) * normal.dot(&self.light_dir).max(0.0);
        [albedo[0] * k, albedo[1] * k, albedo[2] * k]
    }

    pub fn trace(&self, ray: &Ray) -> Option<(f64, [f64; 3])> {
        let mut best: Option<(f64, [f64; 3])> = None;
        for p in &self.primitives {
            if let Some((t, n)) = p.intersect(ray) {
                if best.is_none_or(|(bt, _)| t < bt) {
                    best = Some((t, self.shade(p.albedo(), &n)));
                }
            }
        }
        best
    }

    /// Smallest signed distance over primitives with the index of the closest.
    pub fn signed_distance(&self, p: &Vector3<f64>) -> Option<(f64, usize)> {
        self.primitives.iter().enumerate().map(|(i, prim)| (prim.signed_distance(p), i)).min_by(|a, b| a.0.total_cmp(&b.0))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub n_primitives: usize,
    pub seed: u64,
    #[serde(default)]
    pub background: [f64; 3],
}

/// Seeded non-overlapping placement inside the canonical cube.
pub fn make_scene(spec: &SceneSpec) -> Result<SyntheticScene> {
    if spec.n_primitives == 0 {
        return Err(Error::argument("n_primitives must be >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut primitives: Vec<Primitive> = Vec::with_capacity(spec.n_primitives);
    for _ in 0..spec.n_primitives {
        let mut placed = false;
        for _ in 0..MAX_REJECTIONS {
            let center = crate::posedist::uniform_in_ball(&mut rng, PLACEMENT_RADIUS);
            let albedo = [rng.random_range(0.2..0.95), rng.random_range(0.2..0.95), rng.random_range(0.2..0.95)];
            let candidate = if rng.random_bool(0.5) {
                Primitive::Sphere { center, radius: rng.random_range(0.1..0.2), albedo }
            } else {
                let half = Vector3::new(rng.random_range(0.07..0.15), rng.random_range(0.07..0.15), rng.random_range(0.07..0.15));
                Primitive::Box { min: center - half, max: center + half, albedo }
            };
            let (c, r) = candidate.bounding_sphere();
            let inside = c.iter().all(|v| v.abs() + r <= SCENE_HALF_EXTENT);
            let separated = primitives.iter().all(|p| {
                let (pc, pr) = p.bounding_sphere();
                (pc - c).norm() > pr + r
            });
            if inside && separated {
                primitives.push(candidate);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Capacity(format!(
                "could not place primitive {} of {} after {MAX_REJECTIONS} attempts",
                primitives.len() + 1,
                spec.n_primitives
            )));
        }
    }
    SyntheticScene::new(primitives, spec.background)
}

/// First-hit render at `width x height` (intrinsics rescaled from the pose).
pub fn render_gt(scene: &SyntheticScene, pose: &CameraPose, width: u32, height: u32) -> Image {
    let pose = pose.resized(width, height);
    let (w, h) = (width as usize, height as usize);
    let data: Vec<f64> = (0..w * h)
        .into_par_iter()
        .flat_map_iter(|i| {
            let ray = pixel_center_ray(&pose, i % w, i / w);
            scene.trace(&ray).map_or(scene.background, |(_, c)| c)
        })
        .collect();
    Image::from_vec(w, h, 3, data).expect("buffer size matches")
}

/// Binary coverage mask of the first-hit tracer.
pub fn render_mask(scene: &SyntheticScene, pose: &CameraPose, width: u32, height: u32) -> Image {
    let pose = pose.resized(width, height);
    Image::from_fn(width as usize, height as usize, 1, |x, y, _| {
        f64::from(u8::from(scene.trace(&pixel_center_ray(&pose, x, y)).is_some()))
    })
}

/// Horizontal ring of cameras looking at the origin with world up `+z`.
pub fn ring_path(radius: f64, height: f64, fov_deg: f64, width: u32, height_px: u32) -> Result<PosePath> {
    if !(radius > 0.0 && fov_deg > 0.0 && fov_deg < 180.0) {
        return Err(Error::argument("ring radius and fov must be positive, fov < 180"));
    }
    let focal = 0.5 * width as f64 / (0.5 * fov_deg.to_radians()).tan();
    let path = PosePath::Ellipse(EllipsePath {
        center: Vector3::new(0.0, 0.0, height),
        axis_u: Vector3::new(radius, 0.0, 0.0),
        axis_v: Vector3::new(0.0, radius, 0.0),
        look_at: Vector3::zeros(),
        up: Vector3::z(),
        intrinsics: Intrinsics::centered(focal, width, height_px),
    });
    path.validate()?;
    Ok(path)
}

/// Path parameters of evenly spaced training views and of test views placed
/// inside the gaps between consecutive training parameters.
pub fn view_parameters(closed: bool, n_train: usize, n_test: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if n_train == 0 {
        return Err(Error::argument("n_train must be >= 1"));
    }
    let train: Vec<f64> = if closed || n_train == 1 {
        (0..n_train).map(|i| i as f64 / n_train as f64).collect()
    } else {
        (0..n_train).map(|i| i as f64 / (n_train - 1) as f64).collect()
    };
    let gaps: Vec<(f64, f64)> = if closed {
        (0..n_train).map(|i| (train[i], (i + 1) as f64 / n_train as f64)).collect()
    } else if n_train == 1 {
        vec![(0.0, 1.0)]
    } else {
        train.windows(2).map(|w| (w[0], w[1])).collect()
    };
    let owner: Vec<usize> = (0..n_test).map(|j| j * gaps.len() / n_test.max(1)).collect();
    let test = (0..n_test)
        .map(|j| {
            let g = owner[j];
            let count = owner.iter().filter(|&&o| o == g).count();
            let rank = owner[..j].iter().filter(|&&o| o == g).count();
            let (a, b) = gaps[g];
            a + (b - a) * (rank + 1) as f64 / (count + 1) as f64
        })
        .collect();
    Ok((train, test))
}

#[derive(Clone, Debug)]
pub struct Views {
    pub train: Vec<PosedImage>,
    pub test: Vec<PosedImage>,
    pub train_params: Vec<f64>,
    pub test_params: Vec<f64>,
}

pub fn generate_views(
    scene: &SyntheticScene,
    path: &PosePath,
    n_train: usize,
    n_test: usize,
    width: u32,
    height: u32,
) -> Result<Views> {
    let (train_params, test_params) = view_parameters(path.is_closed(), n_train, n_test)?;
    let render = |params: &[f64]| -> Result<Vec<PosedImage>> {
        params
            .iter()
            .map(|&u| {
                let pose = path.pose_at(u)?.resized(width, height);
                PosedImage::new(render_gt(scene, &pose, width, height), pose)
            })
            .collect()
    };
    Ok(Views { train: render(&train_params)?, test: render(&test_params)?, train_params, test_params })
}

/// Volumetric approximation of the scene: near-opaque density inside
/// primitives with a one-voxel linear falloff, shaded albedo as color.
pub fn bake_into_field(scene: &SyntheticScene, resolution: [usize; 3], bbox: Aabb, peak_density: f64) -> Result<VoxelField> {
    let mut field = VoxelField::new(resolution, bbox)?;
    let n = field.n_nodes();
    let voxel = (0..3).map(|a| (bbox.max[a] - bbox.min[a]) / (resolution[a] - 1) as f64).fold(0.0_f64, f64::max);
    let positions: Vec<Vector3<f64>> = (0..n)
        .map(|idx| {
            let i = idx % resolution[0];
            let j = (idx / resolution[0]) % resolution[1];
            let k = idx / (resolution[0] * resolution[1]);
            field.node_position(i, j, k)
        })
        .collect();
    let values: Vec<(f64, [f64; 3])> = positions
        .par_iter()
        .map(|p| match scene.signed_distance(p) {
            Some((d, i)) => {
                let occupancy = (-d / voxel).clamp(0.0, 1.0);
                let density = softplus_inverse((peak_density * occupancy).max(1e-4));
                let prim = &scene.primitives[i];
                (density, scene.shade(prim.albedo(), &prim.normal_at(p)))
            }
            None => (softplus_inverse(1e-4), scene.background),
        })
        .collect();
    let (density, color) = field.params_mut();
    for (idx, (d, rgb)) in values.into_iter().enumerate() {
        density[idx] = d;
        for c in 0..3 {
            color[3 * idx + c] = crate::field::logit(rgb[c].clamp(1e-4, 1.0 - 1e-4));
        }
    }
    Ok(field)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub image: String,
    pub param: f64,
    pub pose: PoseRecord,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub schema_version: u32,
    pub scene: SyntheticScene,
    pub path: PosePath,
    pub train: Vec<ManifestEntry>,
    pub test: Vec<ManifestEntry>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub scene: SyntheticScene,
    pub path: PosePath,
    pub views: Views,
}

pub const MANIFEST_FILE: &str = "manifest.json";

pub fn manifest_from_json(bytes: &[u8]) -> Result<Manifest> {
    let manifest: Manifest = serde_json::from_slice(bytes)?;
    if manifest.schema_version != DATASET_SCHEMA_VERSION {
        return Err(Error::Config(format!(
            "unsupported dataset schema version {} (expected {DATASET_SCHEMA_VERSION})",
            manifest.schema_version
        )));
    }
    manifest.scene.validate()?;
    for e in manifest.train.iter().chain(&manifest.test) {
        CameraPose::try_from(e.pose.clone())?;
        if e.image.contains("..") || Path::new(&e.image).is_absolute() {
            return Err(Error::Config(format!("image path {:?} escapes the dataset", e.image)));
        }
    }
    Ok(manifest)
}

/// Write PNGs under `train/` and `test/` plus a JSON manifest.
pub fn save_dataset(dataset: &Dataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    let entries = |split: &str, views: &[PosedImage], params: &[f64]| -> Result<Vec<ManifestEntry>> {
        let sub = dir.join(split);
        fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
        views
            .iter()
            .zip(params)
            .enumerate()
            .map(|(i, (v, &param))| {
                let name = format!("{split}/{i:03}.png");
                v.image().write_png(dir.join(&name))?;
                Ok(ManifestEntry { image: name, param, pose: v.pose().to_record() })
            })
            .collect()
    };
    let train = entries("train", &dataset.views.train, &dataset.views.train_params)?;
    let test = entries("test", &dataset.views.test, &dataset.views.test_params)?;
    let manifest = Manifest {
        schema_version: DATASET_SCHEMA_VERSION,
        scene: dataset.scene.clone(),
        path: dataset.path.clone(),
        train,
        test,
    };
    let path = dir.join(MANIFEST_FILE);
    let mut json = serde_json::to_vec_pretty(&manifest)?;
    json.push(b'\n');
    fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let path = dir.join(MANIFEST_FILE);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let manifest = manifest_from_json(&bytes)?;
    let load = |entries: &[ManifestEntry]| -> Result<Vec<PosedImage>> {
        entries
            .iter()
            .map(|e| {
                let file: PathBuf = dir.join(&e.image);
                PosedImage::new(Image::read_png(&file)?, CameraPose::try_from(e.pose.clone())?)
            })
            .collect()
    };
    Ok(Dataset {
        views: Views {
            train: load(&manifest.train)?,
            test: load(&manifest.test)?,
            train_params: manifest.train.iter().map(|e| e.param).collect(),
            test_params: manifest.test.iter().map(|e| e.param).collect(),
        },
        scene: manifest.scene,
        path: manifest.path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_sphere() -> SyntheticScene {
        SyntheticScene::new(vec![Primitive::Sphere { center: Vector3::zeros(), radius: 0.5, albedo: [0.8, 0.6, 0.4] }], [0.0; 3])
            .unwrap()
    }

    #[test]
    fn camera_facing_away_sees_background() {
        let scene = SyntheticScene { background: [0.1, 0.2, 0.3], ..one_sphere() };
        let pose = CameraPose::look_at(
            Vector3::new(0.0, -2.0, 0.0),
            Vector3::new(0.0, -5.0, 0.0),
            Vector3::z(),
            Intrinsics::centered(20.0, 16, 16),
        )
        .unwrap();
        let img = render_gt(&scene, &pose, 16, 16);
        assert!(img.data().chunks(3).all(|p| p == [0.1, 0.2, 0.3]));
    }

    #[test]
    fn center_pixel_is_lambert_shaded() {
        let scene = one_sphere();
        let eye = scene.light_dir * 3.0;
        let pose = CameraPose::look_at(eye, Vector3::zeros(), Vector3::z(), Intrinsics::centered(40.0, 9, 9)).unwrap();
        let img = render_gt(&scene, &pose, 9, 9);
        // normal at the hit equals the light direction
        for (got, want) in img.pixel(4, 4).iter().zip([0.8, 0.6, 0.4]) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn parameters_for_three_views() {
        let (train, test) = view_parameters(true, 3, 3).unwrap();
        assert_eq!(train, vec![0.0, 1.0 / 3.0, 2.0 / 3.0]);
        for (got, want) in test.iter().zip([1.0 / 6.0, 0.5, 5.0 / 6.0]) {
            assert!((got - want).abs() < 1e-15);
        }
        let (train, test) = view_parameters(false, 3, 4).unwrap();
        assert_eq!(train, vec![0.0, 0.5, 1.0]);
        assert!(test.iter().all(|u| !train.contains(u)));
    }

    #[test]
    fn too_many_primitives_is_capacity_error() {
        let err = make_scene(&SceneSpec { n_primitives: 200, seed: 1, background: [0.0; 3] }).unwrap_err();
        assert!(matches!(err, Error::Capacity(_)));
    }

    #[test]
    fn box_hit_from_outside_and_inside() {
        let b = Primitive::Box { min: Vector3::repeat(-0.5), max: Vector3::repeat(0.5), albedo: [1.0; 3] };
        let ray = Ray { origin: Vector3::new(0.0, 0.0, -2.0), direction: Vector3::z() };
        let (t, n) = b.intersect(&ray).unwrap();
        assert!((t - 1.5).abs() < 1e-12);
        assert_eq!(n, Vector3::new(0.0, 0.0, -1.0));
        assert!(b.signed_distance(&Vector3::zeros()) < 0.0);
    }
}
