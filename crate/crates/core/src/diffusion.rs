//! Variance-preserving cosine schedule, the epsilon-prediction denoiser
//! contract, DDIM sampling with classifier-free guidance, and an oracle
//! denoiser backed by a synthetic scene.

use std::f64::consts::FRAC_PI_2;
use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::geometry::CameraPose;
use crate::image::Image;
use crate::scenes::{render_gt, SyntheticScene};

/// Lowest rung of every sampling ladder.
pub const LADDER_FLOOR: f64 = 1e-3;
/// Highest rung actually evaluated. At `t = 1` the signal coefficient is zero
/// and the clean estimate is undefined, so the top rung is pulled just below.
pub const LADDER_CEILING: f64 = 1.0 - 1e-4;
pub const DEFAULT_STEPS: usize = 10;
pub const DEFAULT_CFG_SCALE: f64 = 3.0;
const ALPHA_FLOOR: f64 = 1e-6;
const SIGMA_FLOOR: f64 = 1e-6;

/// `alpha(t) = cos(pi t / 2)`, `sigma(t) = sin(pi t / 2)`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct NoiseSchedule;

impl NoiseSchedule {
    pub fn alpha(&self, t: f64) -> f64 {
        if t >= 1.0 {
            0.0
        } else {
            (FRAC_PI_2 * t).cos()
        }
    }

    pub fn sigma(&self, t: f64) -> f64 {
        if t >= 1.0 {
            1.0
        } else {
            (FRAC_PI_2 * t).sin()
        }
    }
}

pub const SCHEDULE: NoiseSchedule = NoiseSchedule;

/// Everything a conditional prediction may look at.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditioningBundle {
    /// Conditioning render at latent resolution.
    pub feature_image: Option<Image>,
    /// One fixed-length summary per conditioning input view.
    pub input_summaries: Vec<Vec<f64>>,
    pub target_pose: Option<CameraPose>,
    /// Seed for any stochasticity inside the denoiser for this sample.
    pub sample_seed: u64,
    /// Set on the nulled copy used for the unconditional guidance branch.
    pub dropped: bool,
}

impl ConditioningBundle {
    pub fn for_pose(pose: CameraPose, sample_seed: u64) -> Self {
        Self { feature_image: None, input_summaries: Vec::new(), target_pose: Some(pose), sample_seed, dropped: false }
    }

    /// Copy with features and summaries zeroed.
    pub fn nulled(&self) -> Self {
        Self {
            feature_image: self.feature_image.as_ref().map(|f| Image::new(f.width(), f.height(), f.channels())),
            input_summaries: self.input_summaries.iter().map(|s| vec![0.0; s.len()]).collect(),
            target_pose: self.target_pose,
            sample_seed: self.sample_seed,
            dropped: true,
        }
    }
}

/// Epsilon-prediction contract. `cond = None` asks for the unconditional
/// prediction.
pub trait Denoiser: Sync {
    fn predict(&self, z: &Image, t: f64, cond: Option<&ConditioningBundle>) -> Result<Image>;

    /// Whether the prediction reads `feature_image`; callers may skip
    /// building it otherwise.
    fn uses_features(&self) -> bool {
        true
    }
}

fn check_shape(a: &Image, b: &Image) -> Result<()> {
    if a.same_shape(b) {
        Ok(())
    } else {
        Err(Error::argument(format!(
            "shape mismatch: {}x{}x{} vs {}x{}x{}",
            a.width(),
            a.height(),
            a.channels(),
            b.width(),
            b.height(),
            b.channels()
        )))
    }
}

pub fn add_noise(x: &Image, t: f64, eps: &Image) -> Result<Image> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::argument(format!("t = {t} outside [0, 1]")));
    }
    check_shape(x, eps)?;
    let (a, s) = (SCHEDULE.alpha(t), SCHEDULE.sigma(t));
    x.zip_map(eps, |x, e| a * x + s * e)
}

/// Standard-normal image of the given shape.
pub fn gaussian_like<R: Rng + ?Sized>(shape: &Image, rng: &mut R) -> Image {
    Image::from_fn(shape.width(), shape.height(), shape.channels(), |_, _, _| rng.sample(StandardNormal))
}

/// Clean-image estimate implied by `eps_hat` at level `t`.
pub fn predict_x0(z: &Image, t: f64, eps_hat: &Image) -> Result<Image> {
    check_shape(z, eps_hat)?;
    let a = SCHEDULE.alpha(t).max(ALPHA_FLOOR);
    let s = SCHEDULE.sigma(t);
    z.zip_map(eps_hat, |z, e| (z - s * e) / a)
}

/// Deterministic DDIM update from `t` to `t_next`.
pub fn ddim_step(z: &Image, t: f64, t_next: f64, eps_hat: &Image) -> Result<Image> {
    if !(0.0 <= t_next && t_next < t && t <= 1.0) {
        return Err(Error::argument(format!("need 0 <= t_next < t <= 1, got t = {t}, t_next = {t_next}")));
    }
    let x0 = predict_x0(z, t, eps_hat)?;
    let (a, s) = (SCHEDULE.alpha(t_next), SCHEDULE.sigma(t_next));
    x0.zip_map(eps_hat, |x, e| a * x + s * e)
}

pub fn cfg_combine(eps_uncond: &Image, eps_cond: &Image, scale: f64) -> Result<Image> {
    check_shape(eps_uncond, eps_cond)?;
    eps_uncond.zip_map(eps_cond, |u, c| u + scale * (c - u))
}

/// Rungs `t, ..., > floor`, uniformly spaced, `k` of them.
pub fn timestep_ladder(t: f64, k: usize) -> Result<Vec<f64>> {
    if k == 0 {
        return Err(Error::argument("k must be >= 1"));
    }
    if !(t > 0.0 && t <= 1.0) {
        return Err(Error::argument(format!("t = {t} outside (0, 1]")));
    }
    let top = t.min(LADDER_CEILING);
    if top <= LADDER_FLOOR {
        return Ok(vec![top]);
    }
    Ok((0..k).map(|i| top - i as f64 * (top - LADDER_FLOOR) / k as f64).collect())
}

/// Multistep DDIM sample from `z` at level `t` down to a clean image.
pub fn ddim_sample(
    denoiser: &dyn Denoiser,
    cond: &ConditioningBundle,
    z: &Image,
    t: f64,
    k: usize,
    cfg_scale: f64,
) -> Result<Image> {
    let ladder = timestep_ladder(t, k)?;
    let uncond = cond.nulled();
    let mut z = z.clone();
    for (i, &ti) in ladder.iter().enumerate() {
        let eps_c = denoiser.predict(&z, ti, Some(cond))?;
        let eps = if cfg_scale == 1.0 {
            eps_c
        } else {
            let eps_u = denoiser.predict(&z, ti, Some(&uncond))?;
            cfg_combine(&eps_u, &eps_c, cfg_scale)?
        };
        check_shape(&z, &eps)?;
        let next = ladder.get(i + 1).copied().unwrap_or(0.0);
        z = ddim_step(&z, ti, next, &eps)?;
    }
    Ok(z)
}

/// One Monte-Carlo draw of the simplified epsilon-prediction loss.
pub fn diffusion_loss<R: Rng + ?Sized>(
    denoiser: &dyn Denoiser,
    cond: Option<&ConditioningBundle>,
    x: &Image,
    rng: &mut R,
) -> Result<f64> {
    let t = 1.0 - rng.random::<f64>();
    let eps = gaussian_like(x, rng);
    let z = add_noise(x, t, &eps)?;
    let eps_hat = denoiser.predict(&z, t, cond)?;
    check_shape(&eps, &eps_hat)?;
    let sum: f64 = eps.data().iter().zip(eps_hat.data()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(sum / eps.len() as f64)
}

/// Epsilon prediction whose implied clean image is exactly `target`.
pub fn eps_towards(z: &Image, t: f64, target: &Image) -> Result<Image> {
    check_shape(z, target)?;
    let a = SCHEDULE.alpha(t);
    let s = SCHEDULE.sigma(t).max(SIGMA_FLOOR);
    z.zip_map(target, |z, g| (z - a * g) / s)
}

type CacheKey = ([u64; 12], usize, usize, u64);

/// Prior that knows the scene: it predicts noise consistent with the (blurred,
/// noise-corrupted) ground-truth render at the bundle's target pose.
/// Unconditional queries (`None`) pull towards mid-gray.
pub struct OracleDenoiser {
    scene: SyntheticScene,
    blur_sigma: f64,
    noise_floor: f64,
    cache: Mutex<Option<(CacheKey, Image)>>,
}

impl OracleDenoiser {
    pub fn scene(&self) -> &SyntheticScene {
        &self.scene
    }

    /// The clean image this oracle steers towards for `pose` at the given
    /// latent size and sample seed.
    pub fn target_image(&self, pose: &CameraPose, width: usize, height: usize, seed: u64) -> Result<Image> {
        let key = cache_key(pose, width, height, seed);
        let mut cache = self.cache.lock().unwrap_or_else(|e| e.into_inner());
        if let Some((k, img)) = cache.as_ref() {
            if *k == key {
                return Ok(img.clone());
            }
        }
        let img = self.compute_target(pose, width, height, seed)?;
        *cache = Some((key, img.clone()));
        Ok(img)
    }

    fn compute_target(&self, pose: &CameraPose, width: usize, height: usize, seed: u64) -> Result<Image> {
        let (pw, ph) = (pose.width() as usize, pose.height() as usize);
        let full = render_gt(&self.scene, pose, pose.width(), pose.height());
        let mut g = if (pw, ph) == (width, height) {
            full
        } else if pw % width == 0 && ph % height == 0 && pw / width == ph / height {
            full.resize_area(width, height)?
        } else {
            render_gt(&self.scene, pose, width as u32, height as u32)
        };
        g = g.gaussian_blur(self.blur_sigma);
        if self.noise_floor > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let noise = gaussian_like(&g, &mut rng);
            g = g.zip_map(&noise, |v, n| v + self.noise_floor * n)?;
        }
        Ok(g)
    }
}

fn cache_key(pose: &CameraPose, width: usize, height: usize, seed: u64) -> CacheKey {
    let r = pose.rotation();
    let p = pose.position();
    let mut bits = [0u64; 12];
    for (i, v) in r.iter().chain(p.iter()).enumerate() {
        bits[i] = v.to_bits();
    }
    let i = pose.intrinsics();
    let intr = i.focal_px.to_bits()
        ^ i.principal_point.x.to_bits().rotate_left(17)
        ^ i.principal_point.y.to_bits().rotate_left(31)
        ^ ((i.width as u64) << 32 | i.height as u64);
    (bits, width, height, seed ^ intr.rotate_left(7))
}

impl Denoiser for OracleDenoiser {
    fn predict(&self, z: &Image, t: f64, cond: Option<&ConditioningBundle>) -> Result<Image> {
        let target = match cond {
            None => Image::filled(z.width(), z.height(), z.channels(), 0.5),
            Some(bundle) => {
                let pose = bundle
                    .target_pose
                    .as_ref()
                    .ok_or_else(|| Error::argument("oracle denoiser needs a target pose in the conditioning"))?;
                if z.channels() != 3 {
                    return Err(Error::argument("oracle denoiser expects a 3-channel latent"));
                }
                self.target_image(pose, z.width(), z.height(), bundle.sample_seed)?
            }
        };
        eps_towards(z, t, &target)
    }

    fn uses_features(&self) -> bool {
        false
    }
}

pub fn make_oracle_denoiser(scene: SyntheticScene, blur_sigma: f64, noise_floor: f64) -> Result<OracleDenoiser> {
    if !(blur_sigma >= 0.0 && noise_floor >= 0.0 && blur_sigma.is_finite() && noise_floor.is_finite()) {
        return Err(Error::argument("blur_sigma and noise_floor must be finite and non-negative"));
    }
    scene.validate_renderable()?;
    Ok(OracleDenoiser { scene, blur_sigma, noise_floor, cache: Mutex::new(None) })
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Zero;
    impl Denoiser for Zero {
        fn predict(&self, z: &Image, _t: f64, _c: Option<&ConditioningBundle>) -> Result<Image> {
            Ok(Image::new(z.width(), z.height(), z.channels()))
        }
    }

    #[test]
    fn schedule_endpoints() {
        assert_eq!((SCHEDULE.alpha(0.0), SCHEDULE.sigma(0.0)), (1.0, 0.0));
        assert_eq!((SCHEDULE.alpha(1.0), SCHEDULE.sigma(1.0)), (0.0, 1.0));
    }

    #[test]
    fn noise_endpoints() {
        let x = Image::from_fn(3, 2, 3, |x, y, c| (x + 2 * y + c) as f64 * 0.1);
        let e = Image::from_fn(3, 2, 3, |x, y, c| (x * y) as f64 - c as f64);
        assert_eq!(add_noise(&x, 0.0, &e).unwrap(), x);
        assert_eq!(add_noise(&x, 1.0, &e).unwrap(), e);
        assert!(add_noise(&x, 0.5, &Image::new(2, 2, 3)).is_err());
    }

    #[test]
    fn identity_step_is_rejected() {
        let z = Image::new(2, 2, 3);
        assert!(ddim_step(&z, 0.4, 0.4, &z).is_err());
    }

    #[test]
    fn ladder_is_uniform_and_above_floor() {
        let l = timestep_ladder(0.5, 4).unwrap();
        assert_eq!(l.len(), 4);
        assert_eq!(l[0], 0.5);
        assert!(l.windows(2).all(|w| w[0] > w[1]));
        assert!(*l.last().unwrap() > LADDER_FLOOR);
        assert_eq!(timestep_ladder(1.0, 1).unwrap(), vec![LADDER_CEILING]);
        assert!(timestep_ladder(0.5, 0).is_err());
    }

    #[test]
    fn zero_denoiser_returns_scaled_input_in_one_step() {
        let z = Image::filled(2, 2, 3, 0.3);
        let cond = ConditioningBundle {
            feature_image: None,
            input_summaries: vec![],
            target_pose: None,
            sample_seed: 0,
            dropped: false,
        };
        let out = ddim_sample(&Zero, &cond, &z, 0.5, 1, 1.0).unwrap();
        let a = SCHEDULE.alpha(0.5);
        assert!(out.data().iter().all(|v| (v - 0.3 / a).abs() < 1e-12));
    }
}
