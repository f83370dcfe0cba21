use std::collections::BTreeMap;

use crate::moe::LoraAdapter;
use crate::numkernel::{Binding, KernelError, NodeId, Tape};

/// A tape plus the parameter binding and LoRA adapters of one forward pass.
pub struct Net<'t, 'a> {
    pub tape: &'t mut Tape<'a>,
    pub bind: &'t Binding,
    pub lora: &'t BTreeMap<String, LoraAdapter>,
}

impl<'t, 'a> Net<'t, 'a> {
    pub fn new(tape: &'t mut Tape<'a>, bind: &'t Binding, lora: &'t BTreeMap<String, LoraAdapter>) -> Self {
        Self { tape, bind, lora }
    }

    pub fn param(&self, name: &str) -> Result<NodeId, KernelError> {
        self.bind.get(name)
    }

    /// `x W + b` for `{prefix}.weight` / `{prefix}.bias`, plus the low-rank
    /// update `(alpha / r) x A^T B^T` when an adapter targets the weight.
    pub fn linear(&mut self, x: NodeId, prefix: &str) -> Result<NodeId, KernelError> {
        let wname = format!("{prefix}.weight");
        let w = self.bind.get(&wname)?;
        let mut y = self.tape.matmul(x, w);
        if let Some(ad) = self.lora.get(&wname) {
            let a = self.bind.get(&ad.a_name())?;
            let b = self.bind.get(&ad.b_name())?;
            let down = self.tape.matmul_nt(x, a);
            let up = self.tape.matmul_nt(down, b);
            let up = self.tape.scale(up, ad.scale());
            y = self.tape.add(y, up);
        }
        let b = self.bind.get(&format!("{prefix}.bias"))?;
        Ok(self.tape.add_row(y, b))
    }

    pub fn layer_norm(&mut self, x: NodeId, prefix: &str) -> Result<NodeId, KernelError> {
        let g = self.bind.get(&format!("{prefix}.gamma"))?;
        let b = self.bind.get(&format!("{prefix}.beta"))?;
        Ok(self.tape.layer_norm(x, g, b))
    }

    /// Two-layer GeLU feed-forward block under `prefix`.
    pub fn ffn(&mut self, x: NodeId, prefix: &str) -> Result<NodeId, KernelError> {
        let h = self.linear(x, &format!("{prefix}.fc1"))?;
        let h = self.tape.gelu(h);
        self.linear(h, &format!("{prefix}.fc2"))
    }

    /// Pre-normalized causal multi-head self-attention projections under
    /// `prefix` (`q`, `k`, `v`, `o`).
    pub fn causal_attention(&mut self, x: NodeId, prefix: &str, n_heads: usize) -> Result<NodeId, KernelError> {
        let q = self.linear(x, &format!("{prefix}.q"))?;
        let k = self.linear(x, &format!("{prefix}.k"))?;
        let v = self.linear(x, &format!("{prefix}.v"))?;
        let d = self.tape.value(q).cols();
        let hd = d / n_heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let mut heads = Vec::with_capacity(n_heads);
        for h in 0..n_heads {
            let (s, e) = (h * hd, (h + 1) * hd);
            let qh = self.tape.slice_cols(q, s, e);
            let kh = self.tape.slice_cols(k, s, e);
            let vh = self.tape.slice_cols(v, s, e);
            let scores = self.tape.matmul_nt(qh, kh);
            let scores = self.tape.scale(scores, scale);
            let probs = self.tape.softmax(scores, true);
            heads.push(self.tape.matmul(probs, vh));
        }
        let merged = self.tape.concat_cols(&heads);
        self.linear(merged, &format!("{prefix}.o"))
    }
}
