use serde::{Deserialize, Serialize};

use crate::backbone::{Model, Net, Stage};
use crate::numkernel::{KernelError, NodeId};

use super::{GateDecision, MoeError, Router, RouterConfig};

/// How gate logits are produced during MoE training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RouterMode {
    /// Pretrained modality classifier, weights fixed; gates are constants.
    Frozen,
    /// Same MLP trained jointly with the language-model loss plus a
    /// load-balancing term.
    Learned,
}

/// Shape of the expert banks of a MoE model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MoeSpec {
    pub num_experts: usize,
    pub top_k: usize,
    pub meta_expert: bool,
    pub router_mode: RouterMode,
    pub router: RouterConfig,
    pub layers: Vec<usize>,
    pub aux_loss_coef: f64,
}

impl MoeSpec {
    pub fn validate(&self) -> Result<(), MoeError> {
        if self.top_k == 0 || self.top_k > self.num_experts {
            return Err(MoeError::TopK {
                k: self.top_k,
                experts: self.num_experts,
            });
        }
        if self.router.n_out != self.num_experts {
            return Err(MoeError::RouterMismatch {
                router: self.router.n_out,
                experts: self.num_experts,
            });
        }
        if self.layers.is_empty() {
            return Err(MoeError::Config("no MoE layers".into()));
        }
        self.router.validate()
    }

    pub fn is_moe_layer(&self, layer: usize) -> bool {
        self.layers.contains(&layer)
    }
}

pub fn expert_prefix(layer: usize, expert: usize) -> String {
    format!("llm.layers.{layer}.moe.expert{expert}")
}

pub fn meta_prefix(layer: usize) -> String {
    format!("llm.layers.{layer}.moe.meta")
}

pub fn dense_ffn_prefix(layer: usize) -> String {
    format!("llm.layers.{layer}.ffn")
}

/// One invocation of an expert's forward function.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExpertCall {
    pub layer: usize,
    /// `None` for the meta expert.
    pub expert: Option<usize>,
    pub rows: Vec<usize>,
    /// Index into [`MoeProbe::routes`] of the routing in force, if recorded.
    pub route: Option<usize>,
}

/// Routing applied at one MoE layer of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct RoutingRecord {
    pub layer: usize,
    pub modality: Option<usize>,
    pub n_image: usize,
    pub decision: GateDecision,
}

/// Counting instrument filled in by forward passes.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MoeProbe {
    pub calls: Vec<ExpertCall>,
    pub routes: Vec<RoutingRecord>,
}

impl MoeProbe {
    /// Token evaluations of domain experts on tokens that did not select
    /// them, checked against the routing record active at call time.
    pub fn unselected_invocations(&self) -> usize {
        self.calls
            .iter()
            .filter_map(|c| Some((c.expert?, self.routes.get(c.route?)?, &c.rows)))
            .map(|(e, r, rows)| rows.iter().filter(|&&t| !r.decision.selected[t].contains(&e)).count())
            .sum()
    }

    /// Domain-expert calls per `(layer, expert)`.
    pub fn call_counts(&self) -> std::collections::BTreeMap<(usize, usize), usize> {
        let mut m = std::collections::BTreeMap::new();
        for c in &self.calls {
            if let Some(e) = c.expert {
                *m.entry((c.layer, e)).or_insert(0) += 1;
            }
        }
        m
    }
}

/// `residual + sum_i G_i E_i(normed) + E_meta(normed)`. Each expert runs only
/// on the tokens that selected it; experts selected by no token are skipped.
#[allow(clippy::too_many_arguments)]
pub fn moe_block(
    net: &mut Net<'_, '_>,
    spec: &MoeSpec,
    layer: usize,
    residual: NodeId,
    normed: NodeId,
    gates: NodeId,
    decision: &GateDecision,
    mut probe: Option<&mut MoeProbe>,
) -> Result<NodeId, KernelError> {
    if decision.num_experts() != spec.num_experts {
        return Err(KernelError::ShapeMismatch(format!(
            "decision over {} experts, layer has {}",
            decision.num_experts(),
            spec.num_experts
        )));
    }
    let mut out = residual;
    for e in 0..spec.num_experts {
        let rows = decision.rows_for(e);
        if rows.is_empty() {
            continue;
        }
        let xe = net.tape.gather(normed, &rows);
        let ye = net.ffn(xe, &expert_prefix(layer, e))?;
        let col = net.tape.slice_cols(gates, e, e + 1);
        let ge = net.tape.gather(col, &rows);
        let weighted = net.tape.mul_col(ye, ge);
        out = net.tape.index_add(out, weighted, &rows);
        if let Some(p) = probe.as_deref_mut() {
            p.calls.push(ExpertCall {
                layer,
                expert: Some(e),
                rows,
                route: p.routes.len().checked_sub(1),
            });
        }
    }
    if spec.meta_expert {
        let m = net.ffn(normed, &meta_prefix(layer))?;
        out = net.tape.add(out, m);
        if let Some(p) = probe {
            p.calls.push(ExpertCall {
                layer,
                expert: None,
                rows: (0..decision.num_tokens()).collect(),
                route: p.routes.len().checked_sub(1),
            });
        }
    }
    Ok(out)
}

/// The block applied directly to `x`: `x + sum_i G_i E_i(x) + E_meta(x)`.
pub fn moe_forward(
    net: &mut Net<'_, '_>,
    spec: &MoeSpec,
    layer: usize,
    x: NodeId,
    decision: &GateDecision,
    mut probe: Option<&mut MoeProbe>,
) -> Result<NodeId, KernelError> {
    if let Some(p) = probe.as_deref_mut() {
        p.routes.push(RoutingRecord {
            layer,
            modality: None,
            n_image: 0,
            decision: decision.clone(),
        });
    }
    let gates = net.tape.constant(decision.weights.clone());
    moe_block(net, spec, layer, x, x, gates, decision, probe)
}

/// Options for turning a dense model into a MoE model.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpandOptions {
    pub num_experts: usize,
    pub top_k: usize,
    pub layers: Vec<usize>,
    pub meta_expert: bool,
    pub router_mode: RouterMode,
    pub aux_loss_coef: f64,
}

/// Copies each MoE layer's dense FFN into all experts and the meta expert,
/// removes the dense FFN there, and attaches the router.
pub fn expand_from_dense(dense: &Model, router: &Router, opts: &ExpandOptions) -> Result<Model, MoeError> {
    if dense.moe.is_some() {
        return Err(MoeError::Config("model is already a MoE model".into()));
    }
    let spec = MoeSpec {
        num_experts: opts.num_experts,
        top_k: opts.top_k,
        meta_expert: opts.meta_expert,
        router_mode: opts.router_mode,
        router: router.config.clone(),
        layers: opts.layers.clone(),
        aux_loss_coef: opts.aux_loss_coef,
    };
    spec.validate()?;
    let d = dense.config.transformer.d_model;
    if router.config.d_in != d {
        return Err(MoeError::Dimension(format!("router input {} vs d_model {d}", router.config.d_in)));
    }
    if let Some(&bad) = spec.layers.iter().find(|&&l| l >= dense.config.transformer.n_layers) {
        return Err(MoeError::Config(format!("MoE layer {bad} out of range")));
    }
    let mut model = dense.clone();
    for &l in &spec.layers {
        let dense_prefix = dense_ffn_prefix(l);
        let names: Vec<String> = dense
            .params
            .names()
            .filter(|n| n.starts_with(&format!("{dense_prefix}.")))
            .map(str::to_string)
            .collect();
        for name in names {
            let suffix = &name[dense_prefix.len()..];
            let p = model.params.remove(&name).expect("listed above");
            for e in 0..spec.num_experts {
                model.params.insert(format!("{}{suffix}", expert_prefix(l, e)), p.tensor.clone())?;
            }
            if spec.meta_expert {
                model.params.insert(format!("{}{suffix}", meta_prefix(l)), p.tensor.clone())?;
            }
        }
    }
    let frozen = opts.router_mode == RouterMode::Frozen;
    for (name, p) in router.params.iter() {
        model.params.insert(name, p.tensor.clone())?;
        model.params.set_frozen(name, frozen)?;
    }
    model.config.transformer.moe_layer_indices = spec.layers.clone();
    model.moe = Some(spec);
    model.stage = Stage::Expanded;
    Ok(model)
}
