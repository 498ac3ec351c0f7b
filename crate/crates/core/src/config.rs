//! Run configuration: one TOML file with namespaced sections.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffusion::ScheduleKind;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::planner::CemConfig;
use crate::sim::WorldConfig;
use crate::training::{AccConfig, StageIConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionConfig {
    #[serde(rename = "T")]
    pub steps: usize,
    pub kind: ScheduleKind,
    /// Sampling steps for post-training and deployment.
    #[serde(rename = "T_prime")]
    pub sub_steps: usize,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        DiffusionConfig { steps: 1000, kind: ScheduleKind::LinearBeta, sub_steps: 5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub horizons: Vec<usize>,
    /// Frames between evaluation segment starts on held-out trajectories.
    pub stride: usize,
    /// Sampling steps of the many-step baseline.
    pub baseline_steps: usize,
    /// Goal tasks in the planning benchmark.
    pub tasks: usize,
    pub success_radius: f64,
    pub goal_min: f64,
    pub goal_max: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            horizons: crate::metrics::HORIZONS.to_vec(),
            stride: 16,
            baseline_steps: 25,
            tasks: 20,
            success_radius: crate::planner::SUCCESS_RADIUS,
            goal_min: 2.0,
            goal_max: 6.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PerceptualConfig {
    pub seed: u64,
}

impl Default for PerceptualConfig {
    fn default() -> Self {
        PerceptualConfig { seed: 7 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub master_seed: u64,
    pub out_dir: String,
    pub world: WorldConfig,
    pub model: ModelConfig,
    pub diffusion: DiffusionConfig,
    pub stage1: StageIConfig,
    pub acc: AccConfig,
    pub cem: CemConfig,
    pub eval: EvalConfig,
    pub perceptual: PerceptualConfig,
}

/// Defaults sized for a single CPU core: a 2-block, width-32 denoiser and
/// step counts that finish in seconds to minutes.
impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            master_seed: 0,
            out_dir: "runs/default".into(),
            world: WorldConfig::default(),
            model: ModelConfig { hidden: 32, blocks: 2, embed: 16, ..ModelConfig::default() },
            diffusion: DiffusionConfig::default(),
            stage1: StageIConfig { lr: 1e-3, ..StageIConfig::default() },
            acc: AccConfig { steps: 1000, ..AccConfig::default() },
            cem: CemConfig::default(),
            eval: EvalConfig::default(),
            perceptual: PerceptualConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// First 16 hex digits of SHA-256 over the resolved TOML, with `out_dir`
    /// cleared so that the same experiment hashes alike wherever it is written.
    pub fn hash(&self) -> Result<String> {
        let keyed = RunConfig { out_dir: String::new(), ..self.clone() };
        let digest = Sha256::digest(keyed.to_toml()?.as_bytes());
        Ok(digest[..8].iter().map(|b| format!("{b:02x}")).collect())
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.model.validate()?;
        self.stage1.validate()?;
        self.acc.validate()?;
        self.cem.validate()?;
        let w = &self.world;
        // TOML integers are signed 64-bit
        let big = [self.master_seed, w.world_seed, self.model.init_seed, self.perceptual.seed];
        if big.iter().any(|&s| s > i64::MAX as u64) {
            return Err(Error::Config("seeds must be below 2^63".into()));
        }
        if self.model.obs_dim != w.obs_dim {
            return Err(Error::Config(format!("model.obs_dim {} differs from world.obs_dim {}", self.model.obs_dim, w.obs_dim)));
        }
        if self.model.v_max != w.v_max || self.model.w_max != w.w_max {
            return Err(Error::Config("model action bounds must equal the world's".into()));
        }
        if w.trajectories < 2 || w.traj_len < 2 {
            return Err(Error::Config("world.trajectories and world.traj_len must be at least 2".into()));
        }
        if self.diffusion.steps < 2 || self.diffusion.sub_steps == 0 || self.diffusion.sub_steps > self.diffusion.steps {
            return Err(Error::Config("diffusion needs T >= 2 and 1 <= T_prime <= T".into()));
        }
        if self.eval.baseline_steps == 0 || self.eval.baseline_steps > self.diffusion.steps {
            return Err(Error::Config("eval.baseline_steps must be in 1..=T".into()));
        }
        if self.eval.horizons.is_empty() || self.eval.horizons.contains(&0) {
            return Err(Error::Config("eval.horizons must be non-empty and positive".into()));
        }
        if !(self.eval.success_radius > 0.0 && self.eval.goal_min > 0.0 && self.eval.goal_min < self.eval.goal_max) {
            return Err(Error::Config("eval goal range and success radius must be positive and ordered".into()));
        }
        Ok(())
    }
}
