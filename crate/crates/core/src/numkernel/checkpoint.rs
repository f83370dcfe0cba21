use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{KernelError, OptimState, ParamSet};

pub const CHECKPOINT_FORMAT: &str = "medmoe-params/1";

/// Parameter container: names to shape plus little-endian `f64` payload,
/// optional optimizer state, and the step counter. `meta` carries whatever
/// the caller needs to rebuild the model around the tensors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub step: u64,
    pub params: ParamSet,
    pub optim: Option<OptimState>,
    pub meta: serde_json::Value,
}

impl Checkpoint {
    pub fn new(params: ParamSet, optim: Option<OptimState>, step: u64, meta: serde_json::Value) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.to_string(),
            step,
            params,
            optim,
            meta,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, KernelError> {
        serde_json::to_vec_pretty(self).map_err(|e| KernelError::Checkpoint(e.to_string()))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, KernelError> {
        let ck: Self = serde_json::from_slice(bytes).map_err(|e| KernelError::Checkpoint(e.to_string()))?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(KernelError::Checkpoint(format!("unsupported format {:?}", ck.format)));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<(), KernelError> {
        fs::write(path, self.to_bytes()?).map_err(|e| KernelError::Checkpoint(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self, KernelError> {
        let bytes = fs::read(path).map_err(|e| KernelError::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}
