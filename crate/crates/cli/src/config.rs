//! Run configuration: built-in preset, then the TOML file, then flags.

use std::path::Path;

use anyhow::Context;
use mmpoi::eval::ExperimentConfig;
use mmpoi::pipeline::PrepareConfig;
use mmpoi::synth::SynthConfig;
use serde::{Deserialize, Serialize};

use crate::UsageError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    #[serde(flatten)]
    pub experiment: ExperimentConfig,
    pub synth: SynthConfig,
    pub prepare: PrepareConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            experiment: ExperimentConfig::desk_scale(),
            synth: SynthConfig::default(),
            prepare: PrepareConfig::default(),
        }
    }
}

/// Overlays `patch` onto `base`, recursing into tables.
fn merge(base: &mut serde_json::Value, patch: serde_json::Value) {
    match (base, patch) {
        (serde_json::Value::Object(b), serde_json::Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

impl RunConfig {
    /// Preset overlaid with the TOML file, if any. Unknown keys are rejected.
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| UsageError(format!("--config {}: {e}", path.display())))?;
        let patch: toml::Table = toml::from_str(&text)
            .map_err(|e| UsageError(format!("--config {}: {e}", path.display())))?;
        let patch = serde_json::to_value(patch).context("converting config")?;
        check_keys(&serde_json::to_value(Self::default())?, &patch, "")?;
        let mut base = serde_json::to_value(Self::default())?;
        merge(&mut base, patch);
        serde_json::from_value(base)
            .map_err(|e| UsageError(format!("--config {}: {e}", path.display())).into())
    }

    /// Routes one seed into every seeded stage.
    pub fn set_seed(&mut self, seed: u64) {
        self.experiment = self.experiment.clone().with_seed(seed);
        self.synth.seed = seed;
        self.prepare.seed = seed;
    }
}

fn check_keys(known: &serde_json::Value, patch: &serde_json::Value, prefix: &str) -> Result<(), UsageError> {
    let (Some(known), Some(patch)) = (known.as_object(), patch.as_object()) else {
        return Ok(());
    };
    for (k, v) in patch {
        let name = format!("{prefix}{k}");
        match known.get(k) {
            None => return Err(UsageError(format!("unknown config key {name:?}"))),
            Some(inner) => check_keys(inner, v, &format!("{name}."))?,
        }
    }
    Ok(())
}
