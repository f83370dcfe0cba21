//! The JSON run configuration. Every field has a default, so `{}` is a
//! valid file; command-line flags override file values.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};

use medmoe::backbone::{ModelConfig, TransformerConfig, VisionConfig};
use medmoe::moe::{ExpandOptions, RouterMode};
use medmoe::pipeline::{config_hash, PhaseConfig, PhaseId, PipelineError, RouterPhaseConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelShape {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_hidden: usize,
    pub max_seq_len: usize,
    pub image_size: usize,
    pub patch_size: usize,
    pub d_vision: usize,
}

impl Default for ModelShape {
    fn default() -> Self {
        let t = TransformerConfig::toy(0);
        let v = VisionConfig::default();
        Self {
            d_model: t.d_model,
            n_layers: t.n_layers,
            n_heads: t.n_heads,
            ffn_hidden: t.ffn_hidden,
            max_seq_len: t.max_seq_len,
            image_size: v.image_size,
            patch_size: v.patch_size,
            d_vision: v.d_vision,
        }
    }
}

impl ModelShape {
    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            transformer: TransformerConfig {
                d_model: self.d_model,
                n_layers: self.n_layers,
                n_heads: self.n_heads,
                ffn_hidden: self.ffn_hidden,
                vocab_size,
                max_seq_len: self.max_seq_len,
                moe_layer_indices: Vec::new(),
            },
            vision: VisionConfig {
                image_size: self.image_size,
                patch_size: self.patch_size,
                d_vision: self.d_vision,
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MoeSettings {
    pub num_experts: usize,
    pub top_k: usize,
    pub layers: Vec<usize>,
    pub meta_expert: bool,
    pub router_mode: RouterMode,
    /// Load-balancing weight; used only with a learned router.
    pub aux_loss_coef: f64,
    /// Also train attention, norms and embeddings during MoE tuning.
    pub phase3_train_non_ffn: bool,
}

impl Default for MoeSettings {
    fn default() -> Self {
        Self {
            num_experts: 4,
            top_k: 2,
            layers: vec![1, 3],
            meta_expert: true,
            router_mode: RouterMode::Frozen,
            aux_loss_coef: 0.01,
            phase3_train_non_ffn: false,
        }
    }
}

impl MoeSettings {
    pub fn expand_options(&self) -> ExpandOptions {
        ExpandOptions {
            num_experts: self.num_experts,
            top_k: self.top_k,
            layers: self.layers.clone(),
            meta_expert: self.meta_expert,
            router_mode: self.router_mode,
            aux_loss_coef: self.aux_loss_coef,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RouterSettings {
    pub depth: usize,
    pub labels_per_modality: usize,
    pub steps: usize,
    pub lr: f64,
}

impl Default for RouterSettings {
    fn default() -> Self {
        let d = RouterPhaseConfig::default_with_seed(0);
        Self {
            depth: d.depth,
            labels_per_modality: d.labels_per_modality,
            steps: d.steps,
            lr: d.lr,
        }
    }
}

/// Per-phase overrides of the built-in defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhaseOverride {
    pub epochs: Option<usize>,
    pub lr: Option<f64>,
    pub batch_size: Option<usize>,
    pub max_steps: Option<u64>,
    pub warmup_ratio: Option<f64>,
    pub weight_decay: Option<f64>,
    pub min_lr: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub max_new_tokens: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self { max_new_tokens: 12 }
    }
}

/// Fully resolved configuration of a run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Corpus directory.
    pub data: Option<PathBuf>,
    /// Run directory; each phase writes into `<out>/<phase>/`.
    pub out: Option<PathBuf>,
    pub model: ModelShape,
    pub moe: MoeSettings,
    pub router: RouterSettings,
    pub phases: BTreeMap<PhaseId, PhaseOverride>,
    pub eval: EvalSettings,
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text)
            .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())).into())
    }

    /// Hash of everything that affects results; paths are excluded so that
    /// identical runs in different directories hash equally.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.data = None;
        c.out = None;
        config_hash(&c)
    }

    pub fn data_dir(&self) -> Result<&Path, PipelineError> {
        self.data
            .as_deref()
            .ok_or_else(|| PipelineError::Config("no corpus directory (use --data)".into()))
    }

    pub fn out_dir(&self) -> Result<&Path, PipelineError> {
        self.out
            .as_deref()
            .ok_or_else(|| PipelineError::Config("no output directory (use --out)".into()))
    }

    pub fn router_phase(&self) -> RouterPhaseConfig {
        RouterPhaseConfig {
            depth: self.router.depth,
            classes: self.moe.num_experts,
            labels_per_modality: self.router.labels_per_modality,
            steps: self.router.steps,
            lr: self.router.lr,
            seed: self.seed,
        }
    }

    /// Built-in defaults for `phase`, adjusted for the MoE settings and then
    /// overridden by the `phases` table.
    pub fn phase_config(&self, phase: PhaseId) -> PhaseConfig {
        let mut c = match phase {
            PhaseId::Moe if self.moe.phase3_train_non_ffn => PhaseConfig::moe_with_non_ffn(self.seed),
            PhaseId::Sft => PhaseConfig::sft_for_layers(&self.moe.layers, self.model.n_layers, self.seed),
            _ => PhaseConfig::default_for(phase, self.seed),
        };
        if phase == PhaseId::Moe && self.moe.router_mode == RouterMode::Learned {
            c.frozen.retain(|p| p != "router.*");
            c.trainable.push("router.*".into());
        }
        if let Some(o) = self.phases.get(&phase) {
            c.epochs = o.epochs.unwrap_or(c.epochs);
            c.lr = o.lr.unwrap_or(c.lr);
            c.batch_size = o.batch_size.unwrap_or(c.batch_size);
            c.max_steps = o.max_steps.or(c.max_steps);
            c.warmup_ratio = o.warmup_ratio.unwrap_or(c.warmup_ratio);
            c.weight_decay = o.weight_decay.unwrap_or(c.weight_decay);
            c.min_lr = o.min_lr.unwrap_or(c.min_lr);
        }
        c
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c: RunConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.moe.num_experts, 4);
        assert_eq!(c.model.d_model, 64);
    }

    #[test]
    fn unknown_fields_are_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"sed": 3}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"phases": {"warp": {}}}"#).is_err());
    }

    #[test]
    fn overrides_apply_per_phase() {
        let c: RunConfig = serde_json::from_str(r#"{"phases": {"moe": {"epochs": 2, "lr": 0.5}}}"#).unwrap();
        let m = c.phase_config(PhaseId::Moe);
        assert_eq!((m.epochs, m.lr), (2, 0.5));
        assert_eq!(c.phase_config(PhaseId::Align), PhaseConfig::default_for(PhaseId::Align, 0));
    }

    #[test]
    fn hash_ignores_paths() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.out = Some("elsewhere".into());
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn learned_router_is_trainable_in_phase3() {
        let mut c = RunConfig::default();
        c.moe.router_mode = RouterMode::Learned;
        let m = c.phase_config(PhaseId::Moe);
        assert!(m.trainable.contains(&"router.*".to_string()));
        assert!(!m.frozen.contains(&"router.*".to_string()));
    }
}
