//! Experiment manifests: everything needed to reproduce a run bit-for-bit
//! with the same build (wall-clock timings excepted).

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ExperimentManifest {
    pub schema_version: u32,
    pub tool_version: String,
    pub timestamp: String,
    pub scheme: String,
    pub delta_z: f64,
    pub theta: f64,
    pub lambda: f64,
    pub max_elements: usize,
    pub out_dir: String,
    /// Recorded for provenance; the pipeline is deterministic and does not
    /// consume randomness.
    pub seed: u64,
    pub compare: bool,
}

impl ExperimentManifest {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn from_json(text: &str) -> anyhow::Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}
