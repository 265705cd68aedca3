use std::fs;
use std::path::{Path, PathBuf};

use pipefreeze_core::{
    BudgetScope, LambdaMode, PhasePlan, PipelineConfig, TimingProfile, TimingSpec,
};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TimingSource {
    File { file: PathBuf },
    Inline(TimingSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default)]
    pub dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub pipeline: PipelineConfig,
    pub timing: TimingSource,
    pub phases: PhasePlan,
    pub r_max: f64,
    #[serde(default)]
    pub lambda_mode: LambdaMode,
    #[serde(default)]
    pub budget_scope: BudgetScope,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub noise_sigma: f64,
    /// Parameters per stage for mask sampling.
    #[serde(default = "default_params")]
    pub params_per_stage: usize,
    #[serde(default)]
    pub output: Option<OutputConfig>,
}

fn default_params() -> usize {
    1000
}

/// A parsed config plus the directory relative paths resolve against.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: RunConfig,
    pub base_dir: PathBuf,
    pub profile: TimingProfile,
}

pub fn parse_config(text: &str) -> Result<RunConfig, CliError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let config: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        CliError::Config(format!("at `{path}`: {}", e.inner()))
    })?;
    validate(&config)?;
    Ok(config)
}

fn validate(c: &RunConfig) -> Result<(), CliError> {
    if c.version != CONFIG_VERSION {
        return Err(CliError::Config(format!(
            "at `version`: unsupported version {}, expected {CONFIG_VERSION}",
            c.version
        )));
    }
    if !(0.0..=1.0).contains(&c.r_max) {
        return Err(CliError::Config(format!("at `r_max`: {} is outside [0, 1]", c.r_max)));
    }
    if !(c.noise_sigma >= 0.0 && c.noise_sigma.is_finite()) {
        return Err(CliError::Config(format!("at `noise_sigma`: {} must be >= 0", c.noise_sigma)));
    }
    if let LambdaMode::Explicit(l) = c.lambda_mode {
        if !(l >= 0.0 && l.is_finite()) {
            return Err(CliError::Config(format!("at `lambda_mode.explicit`: {l} must be >= 0")));
        }
    }
    if c.params_per_stage == 0 {
        return Err(CliError::Config("at `params_per_stage`: must be >= 1".into()));
    }
    c.pipeline
        .validate()
        .map_err(|e| CliError::Config(format!("at `pipeline`: {e}")))?;
    c.phases
        .validate()
        .map_err(|e| CliError::Config(format!("at `phases`: {e}")))?;
    Ok(())
}

pub fn load_config(path: &Path) -> Result<LoadedConfig, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    let config = parse_config(&text)?;
    let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let profile = resolve_timing(&config, &base_dir)?;
    Ok(LoadedConfig {
        config,
        base_dir,
        profile,
    })
}

pub fn resolve_timing(config: &RunConfig, base_dir: &Path) -> Result<TimingProfile, CliError> {
    let spec = match &config.timing {
        TimingSource::Inline(spec) => spec.clone(),
        TimingSource::File { file } => {
            let path = base_dir.join(file);
            let text = fs::read_to_string(&path).map_err(|e| {
                CliError::Config(format!("at `timing.file`: cannot read {}: {e}", path.display()))
            })?;
            let de = &mut serde_json::Deserializer::from_str(&text);
            serde_path_to_error::deserialize(de).map_err(|e| {
                CliError::Config(format!("in {} at `{}`: {}", path.display(), e.path(), e.inner()))
            })?
        }
    };
    spec.resolve(&config.pipeline)
        .map_err(|e| CliError::Config(format!("at `timing`: {e}")))
}
