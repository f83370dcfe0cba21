use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::numkernel::{name_matches, LrSchedule, ParamSet};

use super::PipelineError;

/// Training stages. `Pretrain` is the text-only stand-in for a pretrained
/// language model; `Sft` tunes the dense FFN slots in place of MoE tuning.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PhaseId {
    Pretrain,
    Align,
    Instruct,
    Router,
    Moe,
    Sft,
}

impl PhaseId {
    pub fn as_str(self) -> &'static str {
        match self {
            PhaseId::Pretrain => "pretrain",
            PhaseId::Align => "align",
            PhaseId::Instruct => "instruct",
            PhaseId::Router => "router",
            PhaseId::Moe => "moe",
            PhaseId::Sft => "sft",
        }
    }
}

impl fmt::Display for PhaseId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PhaseId {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        [
            PhaseId::Pretrain,
            PhaseId::Align,
            PhaseId::Instruct,
            PhaseId::Router,
            PhaseId::Moe,
            PhaseId::Sft,
        ]
        .into_iter()
        .find(|p| p.as_str() == s)
        .ok_or_else(|| PipelineError::Config(format!("unknown phase `{s}`")))
    }
}

fn strings(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

/// Non-FFN language-model weights.
const LLM_SHARED: [&str; 6] = [
    "llm.tok_embed",
    "llm.pos_embed",
    "llm.layers.*.ln*",
    "llm.layers.*.attn.*",
    "llm.ln_f.*",
    "llm.head.*",
];

/// Which parameters a phase trains, and how.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseConfig {
    pub phase: PhaseId,
    pub trainable: Vec<String>,
    pub frozen: Vec<String>,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default = "default_warmup")]
    pub warmup_ratio: f64,
    #[serde(default)]
    pub min_lr: f64,
    /// Caps the step count below `epochs * ceil(n / batch)`.
    #[serde(default)]
    pub max_steps: Option<u64>,
}

fn default_warmup() -> f64 {
    0.03
}

impl PhaseConfig {
    /// Toy defaults; epochs keep the 1:3:9 ratio across the three phases.
    pub fn default_for(phase: PhaseId, seed: u64) -> Self {
        let (trainable, frozen, epochs, lr) = match phase {
            PhaseId::Pretrain => (strings(&["llm.*"]), strings(&["vision.*", "projector.*"]), 12, 3e-3),
            PhaseId::Align => (strings(&["projector.*"]), strings(&["vision.*", "llm.*"]), 10, 3e-3),
            PhaseId::Instruct => (strings(&["projector.*", "llm.*"]), strings(&["vision.*"]), 30, 1e-3),
            PhaseId::Moe => {
                let mut frozen = strings(&["vision.*", "projector.*", "router.*", "llm.layers.*.ffn.*"]);
                frozen.extend(strings(&LLM_SHARED));
                (strings(&["llm.layers.*.moe.*"]), frozen, 90, 1e-3)
            }
            PhaseId::Sft => {
                let mut frozen = strings(&["vision.*", "projector.*"]);
                frozen.extend(strings(&LLM_SHARED));
                (strings(&["llm.layers.*.ffn.*"]), frozen, 90, 1e-3)
            }
            PhaseId::Router => (strings(&["router.*"]), strings(&["vision.*", "projector.*", "llm.*"]), 1, 1e-2),
        };
        Self {
            phase,
            trainable,
            frozen,
            epochs,
            lr,
            batch_size: 8,
            seed,
            weight_decay: 0.0,
            warmup_ratio: default_warmup(),
            min_lr: 0.0,
            max_steps: None,
        }
    }

    /// Phase 3 with the shared language-model weights trainable as well.
    pub fn moe_with_non_ffn(seed: u64) -> Self {
        let mut c = Self::default_for(PhaseId::Moe, seed);
        c.trainable.extend(strings(&LLM_SHARED));
        c.frozen.retain(|p| !LLM_SHARED.contains(&p.as_str()));
        c
    }

    /// Dense-FFN tuning restricted to the given layers.
    pub fn sft_for_layers(layers: &[usize], n_layers: usize, seed: u64) -> Self {
        let mut c = Self::default_for(PhaseId::Sft, seed);
        c.trainable = layers.iter().map(|l| format!("llm.layers.{l}.ffn.*")).collect();
        c.frozen
            .extend((0..n_layers).filter(|l| !layers.contains(l)).map(|l| format!("llm.layers.{l}.ffn.*")));
        c
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.batch_size == 0 {
            return Err(PipelineError::Config("batch size must be positive".into()));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(PipelineError::Config(format!("invalid learning rate {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return Err(PipelineError::Config("warmup ratio must be in [0, 1)".into()));
        }
        Ok(())
    }

    /// Sets the frozen flag of every parameter. Each name must match exactly
    /// one of the two pattern lists.
    pub fn apply(&self, params: &mut ParamSet) -> Result<(), PipelineError> {
        self.validate()?;
        let names: Vec<String> = params.names().map(str::to_string).collect();
        for n in &names {
            let t = self.trainable.iter().any(|p| name_matches(p, n));
            let f = self.frozen.iter().any(|p| name_matches(p, n));
            match (t, f) {
                (true, true) => {
                    return Err(PipelineError::Config(format!("`{n}` is both trainable and frozen")));
                }
                (false, false) => {
                    return Err(PipelineError::Config(format!("`{n}` is neither trainable nor frozen")));
                }
                _ => params.set_frozen(n, f)?,
            }
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, n: usize) -> u64 {
        n.div_ceil(self.batch_size) as u64
    }

    pub fn total_steps(&self, n: usize) -> u64 {
        let full = self.epochs as u64 * self.steps_per_epoch(n);
        self.max_steps.map_or(full, |m| m.min(full))
    }

    pub fn schedule(&self, total_steps: u64) -> LrSchedule {
        LrSchedule {
            base_lr: self.lr,
            warmup_steps: (self.warmup_ratio * total_steps as f64).round() as u64,
            total_steps,
            min_lr: self.min_lr,
        }
    }
}
