//! End-to-end helpers behind the command-line tool: dataset creation and the
//! normalize, fit path, build prior, reconstruct sequence.

use nalgebra::Vector3;

use crate::config::{DatasetSpec, PathKind, PriorConfig, PriorKind, RunConfig};
use crate::diffusion::{make_oracle_denoiser, Denoiser, OracleDenoiser};
use crate::error::Result;
use crate::field::VoxelField;
use crate::geometry::{rescale_scene, PosedImage, SceneTransform};
use crate::posedist::{fit_bspline_path, fit_ellipse_path, PosePath};
use crate::recon::{reconstruct, ReconReport};
use crate::scenes::{generate_views, make_scene, ring_path, Dataset, SceneSpec, SyntheticScene};

pub fn make_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    let scene = make_scene(&SceneSpec { n_primitives: spec.n_primitives, seed: spec.seed, background: spec.background })?;
    let path = ring_path(spec.ring_radius, spec.ring_height, spec.fov_deg, spec.width, spec.height)?;
    let views = generate_views(&scene, &path, spec.n_train, spec.n_test, spec.width, spec.height)?;
    Ok(Dataset { scene, path, views })
}

/// A dataset moved into the normalized frame, with the novel-view path
/// fitted to its training cameras.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub train: Vec<PosedImage>,
    pub test: Vec<PosedImage>,
    pub path: PosePath,
    /// The ground-truth scene in the normalized frame.
    pub scene: SyntheticScene,
    pub transform: SceneTransform,
}

fn moved(views: &[PosedImage], t: &SceneTransform) -> Result<Vec<PosedImage>> {
    views.iter().map(|v| PosedImage::new(v.image().clone(), t.apply_pose(v.pose()))).collect()
}

pub fn prepare(dataset: &Dataset, path_kind: PathKind) -> Result<Prepared> {
    let poses: Vec<_> = dataset.views.train.iter().map(|v| *v.pose()).collect();
    let (_, transform) = rescale_scene(&poses)?;
    let train = moved(&dataset.views.train, &transform)?;
    let test = moved(&dataset.views.test, &transform)?;
    let normalized: Vec<_> = train.iter().map(|v| *v.pose()).collect();
    let path = match path_kind {
        PathKind::Ellipse => fit_ellipse_path(&normalized, Vector3::zeros())?,
        PathKind::Bspline => fit_bspline_path(&normalized)?,
    };
    Ok(Prepared { train, test, path, scene: dataset.scene.transformed(&transform), transform })
}

pub fn make_denoiser(prior: &PriorConfig, scene: &SyntheticScene) -> Result<Option<OracleDenoiser>> {
    match prior.kind {
        PriorKind::None => Ok(None),
        PriorKind::Oracle => make_oracle_denoiser(scene.clone(), prior.blur_sigma, 0.0).map(Some),
        PriorKind::OracleNoisy => make_oracle_denoiser(scene.clone(), prior.blur_sigma, prior.noise_floor).map(Some),
    }
}

pub struct FitResult {
    pub field: VoxelField,
    pub report: ReconReport,
    pub prepared: Prepared,
}

pub fn fit(dataset: &Dataset, config: &RunConfig) -> Result<FitResult> {
    config.validate()?;
    let prepared = prepare(dataset, config.prior.path_kind)?;
    let denoiser = make_denoiser(&config.prior, &prepared.scene)?;
    let (field, report) = reconstruct(
        &prepared.train,
        &prepared.test,
        &prepared.path,
        &config.recon,
        denoiser.as_ref().map(|d| d as &dyn Denoiser),
    )?;
    Ok(FitResult { field, report, prepared })
}
