//! Run configuration: a sectioned TOML file with every hyper-parameter,
//! seed and path a command needs. Missing keys take their defaults;
//! unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::inference::{InferenceConfig, SearchMode};
use crate::policies::{InitConfig, PolicyConfig};
use crate::simworld::{Family, SimParams, TaskSpec, Tolerances};
use crate::training::{EmConfig, PriorLow, TrainConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSection {
    pub family: Family,
    /// Number of demonstrations to generate.
    pub demos: usize,
    /// Demonstrations longer than this are downsampled to it; 0 keeps them.
    pub max_len: usize,
}

impl Default for TaskSection {
    fn default() -> Self {
        TaskSection {
            family: Family::StackingA,
            demos: 40,
            max_len: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmSection {
    pub epsilon: f64,
    pub max_outer: usize,
    pub prior_low: PriorLow,
    /// Log standard deviation of the straight-line low-level prior.
    pub prior_low_log_std: f64,
}

impl Default for EmSection {
    fn default() -> Self {
        let em = EmConfig::default();
        EmSection {
            epsilon: em.epsilon,
            max_outer: em.max_outer,
            prior_low: em.prior_low,
            prior_low_log_std: em.prior_low_log_std,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeName {
    Auto,
    Exact,
    Beam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceSection {
    pub mode: ModeName,
    /// Beam width when `mode = "beam"`.
    pub beam: usize,
    /// Way-point candidate stride; 0 chooses by demonstration length.
    pub stride: usize,
}

impl Default for InferenceSection {
    fn default() -> Self {
        InferenceSection {
            mode: ModeName::Auto,
            beam: 64,
            stride: 0,
        }
    }
}

impl InferenceSection {
    pub fn to_config(&self) -> InferenceConfig {
        InferenceConfig {
            mode: match self.mode {
                ModeName::Auto => SearchMode::Auto,
                ModeName::Exact => SearchMode::Exact,
                ModeName::Beam => SearchMode::Beam(self.beam),
            },
            stride: self.stride,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub episodes: usize,
    pub seeds: usize,
    pub step_cap: usize,
    /// Demonstration counts for the success-versus-data curve.
    pub sweep: Vec<usize>,
    /// Sample low-level actions instead of taking the mean.
    pub sample: bool,
    /// Only let the high level pick the held object, or the end-effector
    /// when nothing is held.
    pub feasible_only: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            episodes: 50,
            seeds: 5,
            step_cap: 600,
            sweep: Vec::new(),
            sample: false,
            feasible_only: true,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    /// Existing demonstration file or directory; generated when absent.
    pub demos: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub task: TaskSection,
    pub tolerances: Tolerances,
    pub sim: SimParams,
    pub policy: PolicyConfig,
    pub init: InitConfig,
    pub train: TrainConfig,
    pub em: EmSection,
    pub inference: InferenceSection,
    pub eval: EvalSection,
    pub paths: PathsSection,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<RunConfig, ConfigError> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<RunConfig, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        RunConfig::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is plain data")
    }

    pub fn task_spec(&self) -> TaskSpec {
        TaskSpec::with_params(self.task.family, self.tolerances.clone(), self.sim.clone())
    }

    pub fn em_config(&self) -> EmConfig {
        let inference = self.inference.to_config();
        EmConfig {
            policy: self.policy.clone(),
            init: self.init.clone(),
            train: self.train.clone(),
            prior_inference: inference,
            inference,
            prior_low: self.em.prior_low,
            prior_low_log_std: self.em.prior_low_log_std,
            epsilon: self.em.epsilon,
            max_outer: self.em.max_outer,
            seed: self.seed,
            checkpoint_dir: None,
        }
    }

    /// Checks value ranges and that every referenced input path exists.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        self.task_spec().validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let p = &self.policy;
        for (name, v) in [
            ("policy.hidden", p.hidden),
            ("policy.lstm", p.lstm),
            ("policy.embed", p.embed),
            ("policy.g_embed", p.g_embed),
            ("train.batch_frames", self.train.batch_frames),
            ("init.batch", self.init.batch),
            ("eval.step_cap", self.eval.step_cap),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if !(p.gamma > 0.0 && p.gamma < 1.0) {
            return bad(format!("policy.gamma must lie in (0, 1), got {}", p.gamma));
        }
        if !(p.beta > 0.0 && p.beta < 1.0) {
            return bad(format!("policy.beta must lie in (0, 1), got {}", p.beta));
        }
        for (name, v) in [
            ("policy.alpha", p.alpha),
            ("policy.sigma_w", p.sigma_w),
            ("policy.feature_scale", p.feature_scale),
            ("policy.diff_scale", p.diff_scale),
            ("policy.prior_position_scale", p.prior_position_scale),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        for (name, v) in [("train.lr", self.train.lr), ("init.lr", self.init.lr)] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be non-negative, got {v}"));
            }
        }
        if !(self.em.epsilon >= 0.0 && self.em.epsilon <= 1.0) {
            return bad(format!("em.epsilon must lie in [0, 1], got {}", self.em.epsilon));
        }
        if self.inference.mode == ModeName::Beam && self.inference.beam == 0 {
            return bad("inference.beam must be at least 1".into());
        }
        if self.task.max_len == 1 {
            return bad("task.max_len must be 0 or at least 2".into());
        }
        if self.eval.sweep.contains(&0) {
            return bad("eval.sweep entries must be positive".into());
        }
        for (name, path) in [("paths.demos", &self.paths.demos), ("paths.checkpoint", &self.paths.checkpoint)] {
            if let Some(path) = path {
                if !path.exists() {
                    return bad(format!("{name} {} does not exist", path.display()));
                }
            }
        }
        Ok(())
    }
}
