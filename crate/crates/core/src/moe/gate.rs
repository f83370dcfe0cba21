use crate::numkernel::{topk_softmax_row, Tensor};

use super::MoeError;

/// Per-token top-K expert selection with renormalized gate weights.
#[derive(Clone, Debug, PartialEq)]
pub struct GateDecision {
    pub k: usize,
    /// Selected experts per token, ordered by descending logit.
    pub selected: Vec<Vec<usize>>,
    /// `tokens x E`; zero outside the selected set.
    pub weights: Tensor,
    /// The raw `tokens x E` logits the decision was made from.
    pub logits: Tensor,
}

impl GateDecision {
    pub fn num_tokens(&self) -> usize {
        self.selected.len()
    }

    pub fn num_experts(&self) -> usize {
        self.logits.cols()
    }

    /// Tokens routed to `expert`, ascending.
    pub fn rows_for(&self, expert: usize) -> Vec<usize> {
        self.selected
            .iter()
            .enumerate()
            .filter(|(_, s)| s.contains(&expert))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn top1(&self, token: usize) -> usize {
        self.selected[token][0]
    }

    /// Sum of the selected weights of `token`.
    pub fn selected_weight_sum(&self, token: usize) -> f64 {
        self.selected[token].iter().map(|&e| self.weights.get(token, e)).sum()
    }
}

/// Picks the `k` largest logits per row (ties to the lower index) and
/// softmaxes over just those.
pub fn gate(logits: &Tensor, k: usize) -> Result<GateDecision, MoeError> {
    let e = logits.cols();
    if k == 0 || k > e {
        return Err(MoeError::TopK { k, experts: e });
    }
    let n = logits.rows();
    let mut selected = Vec::with_capacity(n);
    let mut w = vec![0.0; n * e];
    for i in 0..n {
        let (sel, ws) = topk_softmax_row(logits.row(i), k);
        for (&j, wj) in sel.iter().zip(ws) {
            w[i * e + j] = wj;
        }
        selected.push(sel);
    }
    Ok(GateDecision {
        k,
        selected,
        weights: Tensor::matrix(n, e, w).expect("gate shape"),
        logits: logits.clone(),
    })
}
