//! Run configuration: a JSON file (unknown keys rejected) overlaid by
//! command-line flags.

use std::path::Path;

use mvpf::denoiser::{DenoiserConfig, TrainConfig};
use mvpf::depth_refine::RefineParams;
use mvpf::harness::{DatasetSpec, DegradeParams};
use mvpf::{Error, Result};
use serde::{Deserialize, Serialize};

/// Ring rig and frame count for `render-gt`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderConfig {
    pub views: usize,
    pub radius: f64,
    pub height: f64,
    pub size: usize,
    pub fov_deg: f64,
    pub frames: usize,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self { views: 4, radius: 3.0, height: 0.3, size: 64, fov_deg: 45.0, frames: 1 }
    }
}

/// Every tunable of every subcommand. `seed` is the only source of
/// randomness and overrides the per-group seeds, which must be left unset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub splat_radius: usize,
    pub sample_steps: usize,
    pub render: RenderConfig,
    pub degrade: DegradeParams,
    pub refine: RefineParams,
    pub dataset: DatasetSpec,
    pub model: DenoiserConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            splat_radius: 1,
            sample_steps: 50,
            render: RenderConfig::default(),
            degrade: DegradeParams::default(),
            refine: RefineParams::default(),
            dataset: DatasetSpec::default(),
            model: DenoiserConfig::toy(),
            train: TrainConfig::toy(),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else { return Ok(Self::default()) };
        let cfg: Self = mvpf::io::read_json(path)?;
        if cfg.dataset.seed != 0 || cfg.model.seed != 0 || cfg.train.seed != 0 {
            return Err(Error::Config("set `seed` at the top level only".into()));
        }
        Ok(cfg)
    }

    /// Pushes the top-level seed into every group.
    pub fn seeded(mut self) -> Self {
        self.dataset.seed = self.seed;
        self.model.seed = self.seed;
        self.train.seed = self.seed;
        self
    }
}
