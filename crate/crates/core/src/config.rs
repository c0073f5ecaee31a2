//! JSON run configuration shared by every command.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::recon::{PriorMode, ReconConfig};

pub const RUN_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PriorKind {
    #[default]
    None,
    Oracle,
    OracleNoisy,
}

impl std::str::FromStr for PriorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(PriorKind::None),
            "oracle" => Ok(PriorKind::Oracle),
            "oracle-noisy" => Ok(PriorKind::OracleNoisy),
            other => Err(Error::Config(format!("unknown prior {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PathKind {
    #[default]
    Ellipse,
    Bspline,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorConfig {
    pub kind: PriorKind,
    /// Blur applied by the oracle before noise.
    pub blur_sigma: f64,
    /// Noise std of the noisy oracle; the plain oracle ignores it.
    pub noise_floor: f64,
    pub path_kind: PathKind,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self { kind: PriorKind::None, blur_sigma: 0.0, noise_floor: 0.1, path_kind: PathKind::Ellipse }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub recon: ReconConfig,
    #[serde(default)]
    pub prior: PriorConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self { schema_version: RUN_SCHEMA_VERSION, recon: ReconConfig::default(), prior: PriorConfig::default() }
    }
}

impl RunConfig {
    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_slice(bytes)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        check_schema(self.schema_version)?;
        if !(self.prior.blur_sigma >= 0.0 && self.prior.noise_floor >= 0.0) {
            return Err(Error::Config("prior blur and noise must be non-negative".into()));
        }
        self.recon.validate()
    }

    pub fn with_mode(mut self, mode: PriorMode) -> Self {
        self.recon.mode = mode;
        self
    }
}

pub(crate) fn check_schema(version: u32) -> Result<()> {
    if version == RUN_SCHEMA_VERSION {
        Ok(())
    } else {
        Err(Error::Config(format!("unsupported schema_version {version} (expected {RUN_SCHEMA_VERSION})")))
    }
}

/// Input of `make-scene`: the scene and how views are drawn from it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub schema_version: u32,
    #[serde(default = "defaults::n_primitives")]
    pub n_primitives: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub background: [f64; 3],
    #[serde(default = "defaults::n_train")]
    pub n_train: usize,
    #[serde(default = "defaults::n_test")]
    pub n_test: usize,
    #[serde(default = "defaults::size")]
    pub width: u32,
    #[serde(default = "defaults::size")]
    pub height: u32,
    #[serde(default = "defaults::ring_radius")]
    pub ring_radius: f64,
    #[serde(default = "defaults::ring_height")]
    pub ring_height: f64,
    #[serde(default = "defaults::fov_deg")]
    pub fov_deg: f64,
}

mod defaults {
    pub fn n_primitives() -> usize {
        4
    }
    pub fn n_train() -> usize {
        3
    }
    pub fn n_test() -> usize {
        6
    }
    pub fn size() -> u32 {
        64
    }
    pub fn ring_radius() -> f64 {
        2.0
    }
    pub fn ring_height() -> f64 {
        0.8
    }
    pub fn fov_deg() -> f64 {
        60.0
    }
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            schema_version: RUN_SCHEMA_VERSION,
            n_primitives: defaults::n_primitives(),
            seed: 0,
            background: [0.0; 3],
            n_train: defaults::n_train(),
            n_test: defaults::n_test(),
            width: defaults::size(),
            height: defaults::size(),
            ring_radius: defaults::ring_radius(),
            ring_height: defaults::ring_height(),
            fov_deg: defaults::fov_deg(),
        }
    }
}

impl DatasetSpec {
    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let spec: DatasetSpec = serde_json::from_slice(bytes)?;
        check_schema(spec.schema_version)?;
        if spec.n_train == 0 || spec.width == 0 || spec.height == 0 {
            return Err(Error::Config("n_train, width and height must be positive".into()));
        }
        Ok(spec)
    }

    pub fn with_train_views(&self, n_train: usize) -> Self {
        Self { n_train, ..self.clone() }
    }
}
