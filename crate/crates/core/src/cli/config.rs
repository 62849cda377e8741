//! Declarative run configuration, read from a single TOML file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::control::AMConfig;
use crate::costs::{CostKind, SceneSpec};
use crate::error::{Error, Result};
use crate::field::{ToyTarget, TrainConfig};
use crate::sampler::{SampleMode, SamplerConfig, DEFAULT_STEPS, DEFAULT_T_START};
use crate::schedules::{vp_to_fm_schedule, DiffusionSchedule, InterpolantSchedule, VpRateTable};

/// A scalar or a list of values; lists expand into one child run per value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Sweep {
    One(f64),
    Many(Vec<f64>),
}

impl Sweep {
    pub fn values(&self) -> Vec<f64> {
        match self {
            Sweep::One(v) => vec![*v],
            Sweep::Many(vs) => vs.clone(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ScheduleSpec {
    #[default]
    RectifiedFlow,
    Vp {
        #[serde(rename = "K")]
        k: usize,
        beta_min: f64,
        beta_max: f64,
    },
}

impl ScheduleSpec {
    pub fn build(&self) -> Result<InterpolantSchedule> {
        match self {
            ScheduleSpec::RectifiedFlow => Ok(InterpolantSchedule::RectifiedFlow),
            ScheduleSpec::Vp { k, beta_min, beta_max } => vp_to_fm_schedule(&self.vp_table(*k, *beta_min, *beta_max)?),
        }
    }

    fn vp_table(&self, k: usize, beta_min: f64, beta_max: f64) -> Result<VpRateTable> {
        VpRateTable::linear(k, beta_min, beta_max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FieldSpec {
    pub hidden: Vec<usize>,
    /// Initialization seed.
    pub seed: u64,
    /// Checkpoint to read; defaults to `field.fctl` in the output directory.
    pub checkpoint: Option<PathBuf>,
}

impl Default for FieldSpec {
    fn default() -> Self {
        Self { hidden: vec![64, 64], seed: 1, checkpoint: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiffusionKind {
    Zero,
    Memoryless,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerSpec {
    pub steps: usize,
    pub mode: SampleMode,
    pub t_start: f64,
    /// Noise schedule for `mode = "sde"`.
    pub diffusion: DiffusionKind,
    /// Learned control checkpoint to apply while sampling.
    pub control: Option<PathBuf>,
}

impl Default for SamplerSpec {
    fn default() -> Self {
        Self { steps: DEFAULT_STEPS, mode: SampleMode::Ode, t_start: DEFAULT_T_START, diffusion: DiffusionKind::Memoryless, control: None }
    }
}

impl SamplerSpec {
    pub fn build(&self) -> SamplerConfig {
        let diffusion = match (self.mode, self.diffusion) {
            (SampleMode::Ode, _) | (_, DiffusionKind::Zero) => DiffusionSchedule::Zero,
            (SampleMode::Sde, DiffusionKind::Memoryless) => DiffusionSchedule::Memoryless,
        };
        SamplerConfig { steps: self.steps, mode: self.mode, diffusion, t_start: self.t_start }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CostSpec {
    pub kind: CostKind,
    /// Test-time control weight. The running cost is always weighted by
    /// `sigma_mem(t)^2`.
    pub lambda: Sweep,
    pub gamma_reg: f64,
    pub scene: SceneSpec,
    /// Extra scenes scored by `sample`, e.g. held-out subject counts.
    pub eval_scenes: Vec<SceneSpec>,
}

impl Default for CostSpec {
    fn default() -> Self {
        Self { kind: CostKind::Focus, lambda: Sweep::One(0.0), gamma_reg: 0.0, scene: SceneSpec::default(), eval_scenes: Vec::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneSpec {
    /// Cost weight; a list expands into child runs.
    pub lambda: Sweep,
    pub am: AMConfig,
    pub seed: u64,
}

impl Default for FinetuneSpec {
    fn default() -> Self {
        Self { lambda: Sweep::One(AMConfig::default().lambda), am: AMConfig::default(), seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub schedule: ScheduleSpec,
    pub target: ToyTarget,
    pub seeds: Vec<u64>,
    pub out_dir: Option<PathBuf>,
    pub field: FieldSpec,
    pub train: TrainConfig,
    pub sampler: SamplerSpec,
    pub cost: CostSpec,
    pub finetune: FinetuneSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schedule: ScheduleSpec::RectifiedFlow,
            target: ToyTarget::four_mode_mixture(),
            seeds: (0..5).collect(),
            out_dir: None,
            field: FieldSpec::default(),
            train: TrainConfig::default(),
            sampler: SamplerSpec::default(),
            cost: CostSpec::default(),
            finetune: FinetuneSpec::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run configs serialize")
    }

    /// The config with where-to-write stripped, so identical runs written to
    /// different directories hash alike.
    pub fn normalized(&self) -> Self {
        Self { out_dir: None, ..self.clone() }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn dim(&self) -> usize {
        self.target.dim()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        crate::field::validate_arch(d, &self.field.hidden)?;
        if let ToyTarget::Mixture { means, .. } = &self.target {
            if means.is_empty() || means.iter().any(|m| m.len() != d) {
                return Err(Error::Config("mixture means must be nonempty and share one dimension".into()));
            }
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        self.sampler.build().validate()?;
        Ok(())
    }

    /// SHA-256 of the normalized config in canonical serialized form.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.normalized().to_toml().as_bytes());
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}
