//! TOML configuration files for training runs and sweeps. Unknown keys are
//! rejected so long runs fail fast on typos.

use anyhow::{bail, Context};
use clab_core::sweep::SweepPlan;
use clab_core::vae::VaeHyperParams;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Sample-matrix file the run trains on.
    pub data: PathBuf,
    pub hyper: VaeHyperParams,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub data: PathBuf,
    pub plan: SweepPlan,
}

pub fn load_train_config(path: &Path) -> anyhow::Result<TrainConfig> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read config file {}", path.display()))?;
    let config: TrainConfig = toml::from_str(&text)
        .with_context(|| format!("malformed train config {}", path.display()))?;
    if let Err(e) = config.hyper.validate() {
        bail!("invalid hyperparameters in {}: {e}", path.display());
    }
    Ok(config)
}

pub fn load_sweep_config(path: &Path) -> anyhow::Result<SweepConfig> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read plan file {}", path.display()))?;
    let config: SweepConfig =
        toml::from_str(&text).with_context(|| format!("malformed sweep plan {}", path.display()))?;
    if let Err(e) = config.plan.validate() {
        bail!("invalid sweep plan in {}: {e}", path.display());
    }
    Ok(config)
}
