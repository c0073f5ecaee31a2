//! The optimization loop: a reconstruction loss on observed views plus a
//! diffusion-sampled target (or a score-distillation gradient) at random
//! novel views, with Adam updates on the voxel field.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conditioning::{encode_input, epipolar_render, input_summary, EpipolarConfig};
use crate::diffusion::{add_noise, ddim_sample, gaussian_like, ConditioningBundle, Denoiser, DEFAULT_CFG_SCALE, DEFAULT_STEPS};
use crate::error::{Error, Result};
use crate::field::{Aabb, VoxelField, DEFAULT_RESOLUTION};
use crate::geometry::{CameraPose, PosedImage};
use crate::image::Image;
use crate::losses::{recon_loss, sample_loss, schedule_at, sds_grad, Schedules};
use crate::metrics::{view_metrics, Metrics};
use crate::optim::{Adam, AdamConfig};
use crate::posedist::{nearest_views, sample_novel_pose, PerturbSpec, PosePath};
use crate::render::{distortion_loss, render_backward, render_image, RenderConfig};

/// How the prior's signal reaches the rendered novel view.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PriorMode {
    /// Multistep DDIM target with an image-space loss.
    #[default]
    Sample,
    /// Score-distillation gradient.
    Sds,
}

/// Resolution at which the novel-view render for the prior is produced.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NovelRender {
    /// Render directly at the latent size.
    #[default]
    Direct,
    /// Render at the path's image size and area-downsample to the latent size.
    RenderThenDownsample,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReconConfig {
    pub iters: usize,
    pub optimizer: AdamConfig,
    pub k_ddim: usize,
    pub cfg_scale: f64,
    pub n_condition_views: usize,
    pub schedules: Schedules,
    /// Training renders; the width and height follow each target view.
    pub render: RenderConfig,
    pub latent_size: u32,
    pub novel_render: NovelRender,
    pub mode: PriorMode,
    pub perturb: PerturbSpec,
    pub epipolar: EpipolarConfig,
    pub distortion_on_observed: bool,
    pub distortion_on_novel: bool,
    /// Multiply the sample-loss weight by `reference_views / n_views`.
    pub view_count_scaling: bool,
    pub reference_views: usize,
    pub grid_resolution: usize,
    pub seed: u64,
}

impl Default for ReconConfig {
    fn default() -> Self {
        Self {
            iters: 1000,
            optimizer: AdamConfig::default(),
            k_ddim: DEFAULT_STEPS,
            cfg_scale: DEFAULT_CFG_SCALE,
            n_condition_views: 3,
            schedules: Schedules::default(),
            render: RenderConfig::default(),
            latent_size: 64,
            novel_render: NovelRender::Direct,
            mode: PriorMode::Sample,
            perturb: PerturbSpec::default(),
            epipolar: EpipolarConfig::default(),
            distortion_on_observed: true,
            distortion_on_novel: true,
            view_count_scaling: false,
            reference_views: 3,
            grid_resolution: DEFAULT_RESOLUTION,
            seed: 0,
        }
    }
}

impl ReconConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iters == 0 || self.k_ddim == 0 || self.n_condition_views == 0 {
            return Err(Error::Config("iters, k_ddim and n_condition_views must be >= 1".into()));
        }
        if self.latent_size == 0 || self.grid_resolution < 2 || self.reference_views == 0 {
            return Err(Error::Config("latent_size, grid_resolution and reference_views must be positive".into()));
        }
        if !self.cfg_scale.is_finite() {
            return Err(Error::Config("cfg_scale must be finite".into()));
        }
        self.optimizer.validate()?;
        self.schedules.validate()?;
        self.render.validate()?;
        self.perturb.validate()?;
        self.epipolar.validate()
    }

    /// Schedules stretched over the configured iteration count.
    pub fn effective_schedules(&self) -> Schedules {
        Schedules { total_iters: self.iters, ..self.schedules }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iter: usize,
    pub recon: f64,
    pub sample: f64,
    pub distortion: f64,
    pub t_min: f64,
    pub lambda_sample: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconReport {
    pub records: Vec<LossRecord>,
    pub checkpoint: Option<String>,
    pub heldout: Option<Metrics>,
}

fn render_seed(seed: u64, iter: usize, branch: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x005e_ed0f_4e4d_u64);
    rng.set_stream(((iter as u64) << 1) | branch);
    rng.next_u64()
}

/// Conditioning inputs that do not change during a run.
struct Observed {
    features: Vec<Image>,
    summaries: Vec<Vec<f64>>,
}

struct Prior<'a> {
    denoiser: &'a dyn Denoiser,
    path: &'a PosePath,
    observed: Option<Observed>,
}

/// Fit a voxel field to the observations, regularized by `denoiser` when
/// given. Held-out views, if any, are evaluated at the end.
pub fn reconstruct(
    observations: &[PosedImage],
    heldout: &[PosedImage],
    path: &PosePath,
    config: &ReconConfig,
    denoiser: Option<&dyn Denoiser>,
) -> Result<(VoxelField, ReconReport)> {
    if observations.is_empty() {
        return Err(Error::InsufficientData { needed: 1, got: 0 });
    }
    config.validate()?;
    let sched = config.effective_schedules();
    let r = config.grid_resolution;
    let mut field = VoxelField::new([r, r, r], Aabb::unit_cube())?;
    let mut adam = Adam::new(&field, config.optimizer)?;
    let mut rng_recon = ChaCha8Rng::seed_from_u64(config.seed);
    rng_recon.set_stream(0);
    let mut rng_prior = ChaCha8Rng::seed_from_u64(config.seed);
    rng_prior.set_stream(1);

    let count_scale = if config.view_count_scaling { config.reference_views as f64 / observations.len() as f64 } else { 1.0 };
    let mut prior = denoiser.map(|d| Prior { denoiser: d, path, observed: None });

    let mut records = Vec::with_capacity(config.iters);
    for iter in 0..config.iters {
        let record = step(
            iter,
            &mut field,
            &mut adam,
            observations,
            config,
            &sched,
            count_scale,
            prior.as_mut(),
            &mut rng_recon,
            &mut rng_prior,
        )
        .map_err(|e| Error::Iteration { iter, source: Box::new(e) })?;
        records.push(record);
    }
    let heldout = if heldout.is_empty() { None } else { Some(evaluate(&field, heldout, &config.render)?) };
    Ok((field, ReconReport { records, checkpoint: None, heldout }))
}

#[allow(clippy::too_many_arguments)]
fn step(
    iter: usize,
    field: &mut VoxelField,
    adam: &mut Adam,
    observations: &[PosedImage],
    config: &ReconConfig,
    sched: &Schedules,
    count_scale: f64,
    prior: Option<&mut Prior<'_>>,
    rng_recon: &mut ChaCha8Rng,
    rng_prior: &mut ChaCha8Rng,
) -> Result<LossRecord> {
    let (t_min, lambda) = schedule_at(sched, iter)?;
    let lambda = lambda * count_scale;

    let obs = &observations[rng_recon.random_range(0..observations.len())];
    let render_cfg = RenderConfig { seed: render_seed(config.seed, iter, 0), ..config.render };
    let d_weight = if config.distortion_on_observed { sched.lambda_distortion } else { 0.0 };
    let (terms, _) = recon_loss(field, obs, &render_cfg, d_weight)?;
    let mut distortion = terms.distortion;
    let mut sample = 0.0;

    if let Some(prior) = prior.filter(|_| lambda > 0.0) {
        let (s, d) = prior_step(iter, field, observations, config, sched, t_min, lambda, prior, rng_prior)?;
        sample = s;
        distortion += d;
    }
    adam.step(field)?;
    Ok(LossRecord { iter, recon: terms.recon, sample, distortion, t_min, lambda_sample: lambda })
}

#[allow(clippy::too_many_arguments)]
fn prior_step(
    iter: usize,
    field: &mut VoxelField,
    observations: &[PosedImage],
    config: &ReconConfig,
    sched: &Schedules,
    t_min: f64,
    lambda: f64,
    prior: &mut Prior<'_>,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, f64)> {
    let latent = config.latent_size;
    let novel = sample_novel_pose(prior.path, &config.perturb, rng)?;
    let (render_pose, factor) = match config.novel_render {
        NovelRender::Direct => (novel.resized(latent, latent), 1usize),
        NovelRender::RenderThenDownsample => {
            let (w, h) = (novel.width(), novel.height());
            if w % latent != 0 || h != w {
                return Err(Error::Config(
                    "render-then-downsample needs a square image that is a multiple of the latent size".into(),
                ));
            }
            (novel, (w / latent) as usize)
        }
    };
    let cfg = RenderConfig {
        width: render_pose.width(),
        height: render_pose.height(),
        seed: render_seed(config.seed, iter, 1),
        ..config.render
    };
    let out = render_image(field, &render_pose, &cfg)?;
    let x = out.rgb.downsample_area(factor);

    let t = (t_min + (sched.t_max - t_min) * rng.random::<f64>()).clamp(1e-6, 1.0);
    let latent_pose = novel.resized(latent, latent);
    let cond = build_conditioning(prior, observations, &latent_pose, config, rng.next_u64())?;

    let (sample_value, mut d_latent) = match config.mode {
        PriorMode::Sample => {
            let eps = gaussian_like(&x, rng);
            let z = add_noise(&x, t, &eps)?;
            let target = ddim_sample(prior.denoiser, &cond, &z, t, config.k_ddim, config.cfg_scale)?;
            sample_loss(&x, &target, t, sched)?
        }
        PriorMode::Sds => {
            let mut g = sds_grad(prior.denoiser, Some(&cond), &x, t, sched, rng)?;
            g.scale(1.0 / x.len() as f64);
            (0.0, g)
        }
    };
    d_latent.scale(lambda);
    let d_rgb = d_latent.downsample_area_adjoint(factor, out.rgb.width(), out.rgb.height());

    let (distortion, d_weights) = if config.distortion_on_novel && sched.lambda_distortion > 0.0 {
        let (v, mut g) = distortion_loss(&out.records);
        g.scale(sched.lambda_distortion * lambda);
        (v, Some(g))
    } else {
        (0.0, None)
    };
    render_backward(field, &out.records, &d_rgb, None, d_weights.as_ref())?;
    Ok((sample_value, distortion))
}

fn build_conditioning(
    prior: &mut Prior<'_>,
    observations: &[PosedImage],
    target: &CameraPose,
    config: &ReconConfig,
    sample_seed: u64,
) -> Result<ConditioningBundle> {
    let mut bundle = ConditioningBundle::for_pose(*target, sample_seed);
    if !prior.denoiser.uses_features() {
        return Ok(bundle);
    }
    let observed = prior.observed.get_or_insert_with(|| Observed {
        features: observations.iter().map(encode_input).collect(),
        summaries: observations.iter().map(|o| input_summary(o.image())).collect(),
    });
    let k = config.n_condition_views.min(observations.len());
    let nearest = nearest_views(target, observations, k)?;
    let views: Vec<PosedImage> = nearest.iter().map(|&i| observations[i].clone()).collect();
    let feats: Vec<Image> = nearest.iter().map(|&i| observed.features[i].clone()).collect();
    let rendered = epipolar_render(&views, &feats, target, &config.epipolar)?;
    bundle.feature_image = Some(rendered.features);
    bundle.input_summaries = nearest.iter().map(|&i| observed.summaries[i].clone()).collect();
    Ok(bundle)
}

/// Deterministic renders of the held-out views scored with PSNR and SSIM.
pub fn evaluate(field: &VoxelField, heldout: &[PosedImage], render: &RenderConfig) -> Result<Metrics> {
    if heldout.is_empty() {
        return Err(Error::InsufficientData { needed: 1, got: 0 });
    }
    let per_view = heldout
        .iter()
        .map(|view| {
            let pose = view.pose();
            let cfg = RenderConfig { width: pose.width(), height: pose.height(), ..render.for_eval() };
            let out = render_image(field, pose, &cfg)?;
            view_metrics(&out.rgb.map(|v| v.clamp(0.0, 1.0)), view.image())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Metrics::from_views(per_view))
}
