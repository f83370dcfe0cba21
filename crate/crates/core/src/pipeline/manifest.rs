use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Record of one training or evaluation run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub phase: String,
    pub config: serde_json::Value,
    pub corpus_seed: u64,
    pub config_hash: String,
    pub final_metrics: serde_json::Value,
}

impl RunManifest {
    pub fn new(phase: &str, config: serde_json::Value, corpus_seed: u64, final_metrics: serde_json::Value) -> Self {
        Self {
            phase: phase.to_string(),
            config_hash: config_hash(&config),
            config,
            corpus_seed,
            final_metrics,
        }
    }
}

/// Hex SHA-256 of the compact JSON form. Struct fields serialize in
/// declaration order and maps are ordered, so equal configs hash equally.
pub fn config_hash<T: Serialize>(config: &T) -> String {
    let bytes = serde_json::to_vec(config).expect("config serializes");
    Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
}
