use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{FactorizedPolicy, PolicyConfig};
use crate::bench::ActionNormalizer;
use crate::composition::Router;
use crate::diffusion::{DenoiserComponent, NoiseSchedule};
use crate::error::{Error, Result};
use crate::numerics::FeedForwardNet;

pub const CHECKPOINT_FORMAT: &str = "fdp-policy";
pub const CHECKPOINT_VERSION: u32 = 1;

/// JSON container. Networks are stored as `{widths, activations, layers}`
/// with row-major `weights` (`out × in`) and `bias` per layer; components are
/// an ordered list, so appended components load without schema changes.
#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    config: PolicyConfig,
    state_dim: usize,
    action_dim: usize,
    normalizer: ActionNormalizer,
    schedule: NoiseSchedule,
    encoder: FeedForwardNet,
    router: Router,
    components: Vec<DenoiserComponent>,
    #[serde(default)]
    provenance: BTreeMap<String, String>,
}

impl FactorizedPolicy {
    pub fn to_json(&self, provenance: &BTreeMap<String, String>) -> Result<String> {
        let file = CheckpointFile {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            state_dim: self.state_dim,
            action_dim: self.action_dim,
            normalizer: self.normalizer.clone(),
            schedule: self.schedule.clone(),
            encoder: self.encoder.clone(),
            router: self.router.clone(),
            components: self.components.clone(),
            provenance: provenance.clone(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    /// Parses a checkpoint; returns the policy and its provenance map.
    pub fn from_json(text: &str) -> Result<(Self, BTreeMap<String, String>)> {
        let file: CheckpointFile = serde_json::from_str(text)?;
        if file.format != CHECKPOINT_FORMAT || file.version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "expected {CHECKPOINT_FORMAT} v{CHECKPOINT_VERSION}, found {} v{}",
                file.format, file.version
            )));
        }
        let policy = Self::from_parts(
            file.config,
            file.state_dim,
            file.action_dim,
            file.encoder,
            file.router,
            file.components,
            file.schedule,
            file.normalizer,
        )?;
        Ok((policy, file.provenance))
    }

    pub fn save(&self, path: &Path, provenance: &BTreeMap<String, String>) -> Result<()> {
        std::fs::write(path, self.to_json(provenance)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(Self, BTreeMap<String, String>)> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
