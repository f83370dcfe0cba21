use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::backbone::Model;
use crate::moe::expert_prefix;

/// Stored versus per-token exercised parameters.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    pub total: usize,
    pub activated: usize,
    /// Totals per module: vision, projector, llm, dense_ffn, experts, meta,
    /// router, lora.
    pub breakdown: BTreeMap<String, usize>,
    pub per_expert: usize,
    pub num_experts: usize,
    pub top_k: usize,
    pub moe_layers: usize,
}

fn module_of(name: &str) -> &'static str {
    if name.starts_with("vision.") {
        "vision"
    } else if name.starts_with("projector.") {
        "projector"
    } else if name.starts_with("router.") {
        "router"
    } else if name.starts_with("lora.") {
        "lora"
    } else if name.contains(".moe.expert") {
        "experts"
    } else if name.contains(".moe.meta.") {
        "meta"
    } else if name.contains(".ffn.") {
        "dense_ffn"
    } else {
        "llm"
    }
}

/// Every parameter is stored; per token only K of the E experts in each MoE
/// layer run, while the meta expert and router always do.
pub fn count_parameters(model: &Model) -> ParamCount {
    let mut breakdown = BTreeMap::new();
    for (name, p) in model.params.iter() {
        *breakdown.entry(module_of(name).to_string()).or_insert(0) += p.tensor.len();
    }
    let total = breakdown.values().sum();
    let (per_expert, num_experts, top_k, moe_layers) = match &model.moe {
        Some(spec) => {
            let prefix = format!("{}.", expert_prefix(spec.layers[0], 0));
            let per: usize = model
                .params
                .iter()
                .filter(|(n, _)| n.starts_with(&prefix))
                .map(|(_, p)| p.tensor.len())
                .sum();
            (per, spec.num_experts, spec.top_k, spec.layers.len())
        }
        None => (0, 0, 0, 0),
    };
    ParamCount {
        total,
        activated: total - moe_layers * (num_experts - top_k) * per_expert,
        breakdown,
        per_expert,
        num_experts,
        top_k,
        moe_layers,
    }
}

/// One published backbone configuration next to the counts our convention
/// produces for it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureRow {
    pub name: String,
    pub dense_params: f64,
    pub width: usize,
    pub ffn: usize,
    pub moe_layers: usize,
    pub experts: usize,
    pub top_k: usize,
    pub listed_activated: f64,
    pub listed_total: f64,
    pub computed_activated: f64,
    pub computed_total: f64,
}

/// Published architecture figures versus the count obtained by replacing
/// each MoE-layer FFN (two biased linear maps) with E experts plus a meta
/// expert. The two do not agree; the rows make the gap explicit.
pub fn published_comparison() -> Vec<ArchitectureRow> {
    let row = |name: &str, dense: f64, listed_activated: f64, listed_total: f64| {
        let (width, ffn, layers, e, k) = (2560usize, 10240usize, 16usize, 4usize, 2usize);
        let per_expert = (2 * width * ffn + ffn + width) as f64;
        // The dense model already holds one FFN per layer; the meta expert
        // and the extra experts come on top of it.
        let computed_total = dense + (layers * e) as f64 * per_expert;
        let computed_activated = dense + (layers * k) as f64 * per_expert;
        ArchitectureRow {
            name: name.to_string(),
            dense_params: dense,
            width,
            ffn,
            moe_layers: layers,
            experts: e,
            top_k: k,
            listed_activated,
            listed_total,
            computed_activated,
            computed_total,
        }
    };
    vec![
        row("StableLM-1.6B 4x", 1.6e9, 2.0e9, 2.9e9),
        row("Phi2-2.7B 4x", 2.7e9, 3.6e9, 5.3e9),
    ]
}
