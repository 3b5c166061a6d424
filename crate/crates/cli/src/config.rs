//! Run configuration: one TOML file with a section per pipeline stage.
//! Every field has a default, unknown keys are rejected, and command-line
//! flags override the file.

use std::path::Path;

use flowcast_core::codec::{CodecConfig, VaeTrainConfig};
use flowcast_core::data::EventSampler;
use flowcast_core::diffusion::NoiseSchedule;
use flowcast_core::field::ModelConfig;
use flowcast_core::metrics::{ThresholdSet, SEVIR_THRESHOLDS};
use flowcast_core::ode::{Method, SolverConfig};
use flowcast_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Fraction of validation/test windows used by training checks,
    /// forecasting, evaluation and ablations.
    pub subset: f64,
    pub data: DataConfig,
    pub vae: VaeSection,
    pub model: ModelConfig,
    pub cfm: ObjectiveSection,
    pub ddpm: DdpmSection,
    pub forecast: ForecastSection,
    pub evaluate: EvaluateSection,
    pub ablate: AblateSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            subset: 1.0,
            data: DataConfig::default(),
            vae: VaeSection::default(),
            model: ModelConfig::default(),
            cfm: ObjectiveSection::default(),
            ddpm: DdpmSection::default(),
            forecast: ForecastSection::default(),
            evaluate: EvaluateSection::default(),
            ablate: AblateSection::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub events: usize,
    pub stride: usize,
    /// Train, validation and test fractions.
    pub ratios: [f64; 3],
    pub sampler: EventSampler,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { events: 200, stride: 12, ratios: [0.6, 0.2, 0.2], sampler: EventSampler::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct VaeSection {
    pub codec: CodecConfig,
    pub train: VaeTrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Validation {
    pub members: usize,
    pub steps: usize,
}

impl Default for Validation {
    fn default() -> Self {
        Validation { members: 2, steps: 10 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObjectiveSection {
    pub sigma: f64,
    pub train: TrainConfig,
    pub validation: Validation,
}

impl Default for ObjectiveSection {
    fn default() -> Self {
        ObjectiveSection { sigma: flowcast_core::cfm::DEFAULT_SIGMA, train: desk_train(), validation: Validation::default() }
    }
}

fn desk_train() -> TrainConfig {
    TrainConfig { steps: 1500, batch: 8, eval_every: 250, ..TrainConfig::default() }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DdpmSection {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub train: TrainConfig,
    pub validation: Validation,
}

impl Default for DdpmSection {
    fn default() -> Self {
        DdpmSection {
            timesteps: 1000,
            beta_start: 1e-4,
            beta_end: 2e-2,
            train: desk_train(),
            validation: Validation::default(),
        }
    }
}

impl DdpmSection {
    pub fn schedule(&self) -> CliResult<NoiseSchedule> {
        NoiseSchedule::linear(self.timesteps, self.beta_start, self.beta_end).map_err(|e| CliError::config(e.to_string()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveKind {
    Cfm,
    Ddpm,
}

impl ObjectiveKind {
    pub fn name(self) -> &'static str {
        match self {
            ObjectiveKind::Cfm => "cfm",
            ObjectiveKind::Ddpm => "ddpm",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ForecastSection {
    pub members: usize,
    pub objective: ObjectiveKind,
    /// ODE solver for the flow model.
    pub solver: SolverConfig,
    /// DDIM steps for the diffusion model.
    pub ddim_steps: usize,
}

impl Default for ForecastSection {
    fn default() -> Self {
        ForecastSection {
            members: 8,
            objective: ObjectiveKind::Cfm,
            solver: SolverConfig::fixed(Method::Euler, 10),
            ddim_steps: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluateSection {
    /// Thresholds in data units (intensities scaled to [0, 1]).
    pub thresholds: Vec<f64>,
}

impl Default for EvaluateSection {
    fn default() -> Self {
        EvaluateSection { thresholds: SEVIR_THRESHOLDS.iter().map(|t| t / 255.0).collect() }
    }
}

impl EvaluateSection {
    pub fn threshold_set(&self) -> CliResult<ThresholdSet> {
        ThresholdSet::new(self.thresholds.clone()).map_err(|e| CliError::config(e.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateSection {
    pub nfe: Vec<usize>,
    pub objective_nfe: Vec<usize>,
    pub solvers: Vec<Method>,
    pub solver_steps: usize,
    pub members: usize,
}

impl Default for AblateSection {
    fn default() -> Self {
        AblateSection {
            nfe: vec![1, 2, 3, 5, 10, 20, 50],
            objective_nfe: vec![1, 10, 50],
            solvers: Method::ALL.to_vec(),
            solver_steps: 10,
            members: 8,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> CliResult<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }

    pub fn validate(&self) -> CliResult<()> {
        if !(self.subset > 0.0 && self.subset <= 1.0) {
            return Err(CliError::config(format!("subset {} must lie in (0, 1]", self.subset)));
        }
        if self.data.stride == 0 {
            return Err(CliError::config("data.stride must be at least 1"));
        }
        self.model.validate().map_err(|e| CliError::config(e.to_string()))?;
        let codec = &self.vae.codec;
        let latent = |n: usize| n.div_ceil(flowcast_core::codec::PAD_MULTIPLE) * flowcast_core::codec::PAD_MULTIPLE / codec.downsample_factor;
        let (s, m) = (&self.data.sampler, &self.model);
        if m.latent_channels != codec.latent_channels
            || m.latent_height != latent(s.height)
            || m.latent_width != latent(s.width)
        {
            return Err(CliError::config(format!(
                "model latent grid {}x{}x{} does not match the codec's {}x{}x{}",
                m.latent_height,
                m.latent_width,
                m.latent_channels,
                latent(s.height),
                latent(s.width),
                codec.latent_channels
            )));
        }
        for (name, t) in [("cfm.train", &self.cfm.train), ("ddpm.train", &self.ddpm.train)] {
            t.validate().map_err(|e| CliError::config(format!("{name}: {e}")))?;
        }
        self.forecast.solver.validate().map_err(|e| CliError::config(e.to_string()))?;
        if self.forecast.members == 0 || self.ablate.members == 0 {
            return Err(CliError::config("ensemble size must be at least 1"));
        }
        if self.cfm.sigma < 0.0 {
            return Err(CliError::config("cfm.sigma must be non-negative"));
        }
        for (name, list) in [("ablate.nfe", &self.ablate.nfe), ("ablate.objective_nfe", &self.ablate.objective_nfe)] {
            if list.is_empty() || list.contains(&0) || list.windows(2).any(|w| w[0] >= w[1]) {
                return Err(CliError::config(format!("{name} must be strictly increasing positive counts")));
            }
        }
        self.ddpm.schedule()?;
        self.evaluate.threshold_set()?;
        Ok(())
    }

    /// Number of windows kept by the subset fraction (at least one).
    pub fn subset_len(&self, n: usize) -> usize {
        if n == 0 {
            0
        } else {
            ((self.subset * n as f64).ceil() as usize).clamp(1, n)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
    }

    #[test]
    fn default_round_trips() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::parse(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::parse("[data]\nevent = 3\n").is_err());
        assert!(RunConfig::parse("bogus = 1\n").is_err());
    }

    #[test]
    fn partial_sections_merge() {
        let cfg = RunConfig::parse("[cfm.train]\nsteps = 5\n[forecast.solver]\nmethod = \"rk4\"\n").unwrap();
        assert_eq!(cfg.cfm.train.steps, 5);
        assert_eq!(cfg.cfm.train.batch, 8);
        assert_eq!(cfg.forecast.solver.method, Method::Rk4);
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(RunConfig::parse("subset = 0.0\n").is_err());
        assert!(RunConfig::parse("[ablate]\nnfe = [2, 1]\n").is_err());
        assert!(RunConfig::parse("[evaluate]\nthresholds = [0.5, 0.1]\n").is_err());
        assert!(RunConfig::parse("[model]\nbase_dim = 30\n").is_err());
        assert!(RunConfig::parse("[model]\nlatent_channels = 3\n").is_err());
        assert!(RunConfig::parse("[data.sampler]\nheight = 48\n").is_err());
    }

    #[test]
    fn subset_sizes() {
        let cfg = RunConfig { subset: 0.25, ..RunConfig::default() };
        assert_eq!(cfg.subset_len(40), 10);
        assert_eq!(cfg.subset_len(3), 1);
        assert_eq!(cfg.subset_len(0), 0);
    }
}
