use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::moe::{gate, moe_block, router_forward, GateDecision, LoraAdapter, MoeProbe, MoeSpec, RouterMode, RoutingRecord};
use crate::numkernel::{randn, Binding, Checkpoint, NodeId, OptimState, ParamSet, SplitMix64, Tape, Tensor};

use super::generate::Decoder;
use super::layers::Net;
use super::vision::patchify;
use super::{BackboneError, Sequence, TransformerConfig, VisionConfig};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub transformer: TransformerConfig,
    pub vision: VisionConfig,
}

impl ModelConfig {
    pub fn toy(vocab_size: usize) -> Self {
        Self {
            transformer: TransformerConfig::toy(vocab_size),
            vision: VisionConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<(), BackboneError> {
        self.transformer.validate()?;
        let v = &self.vision;
        if v.patch_size == 0 || v.image_size % v.patch_size != 0 || v.d_vision == 0 {
            return Err(BackboneError::Config(format!("invalid vision config {v:?}")));
        }
        Ok(())
    }
}

/// How far a model has progressed through the curriculum.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Init,
    Pretrained,
    Aligned,
    Instructed,
    Expanded,
    Tuned,
}

/// Parameters plus the structural description needed to run them.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamSet,
    pub moe: Option<MoeSpec>,
    pub lora: BTreeMap<String, LoraAdapter>,
    pub stage: Stage,
}

/// Tape nodes produced by one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub logits: NodeId,
    /// Load-balancing term, present only with a learned router.
    pub aux_loss: Option<NodeId>,
    pub decision: Option<GateDecision>,
}

#[derive(Serialize, Deserialize)]
struct ModelMeta {
    config: ModelConfig,
    moe: Option<MoeSpec>,
    lora: BTreeMap<String, LoraAdapter>,
    stage: Stage,
}

fn linear_init(
    params: &mut ParamSet,
    rng: &mut SplitMix64,
    prefix: &str,
    d_in: usize,
    d_out: usize,
    std: f64,
) -> Result<(), BackboneError> {
    params.insert(format!("{prefix}.weight"), randn(rng, &[d_in, d_out], std))?;
    params.insert(format!("{prefix}.bias"), Tensor::zeros(&[1, d_out]))?;
    Ok(())
}

fn norm_init(params: &mut ParamSet, prefix: &str, d: usize) -> Result<(), BackboneError> {
    params.insert(format!("{prefix}.gamma"), Tensor::filled(&[1, d], 1.0))?;
    params.insert(format!("{prefix}.beta"), Tensor::zeros(&[1, d]))?;
    Ok(())
}

impl Model {
    /// Fresh dense model. Hidden linear maps draw from `N(0, 1/fan_in)`,
    /// residual output projections are further scaled by `1/sqrt(2L)`, and
    /// embeddings and the output head use a small std so initial predictions
    /// are close to uniform.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, BackboneError> {
        config.validate()?;
        if !config.transformer.moe_layer_indices.is_empty() {
            return Err(BackboneError::Config(
                "initialize dense and expand to obtain MoE layers".into(),
            ));
        }
        let t = &config.transformer;
        let v = &config.vision;
        let (d, h, vs) = (t.d_model, t.ffn_hidden, t.vocab_size);
        let out_scale = 1.0 / (2.0 * t.n_layers as f64).sqrt();
        let root = SplitMix64::new(seed);
        let mut params = ParamSet::new();

        let mut rng = root.fork_str("vision");
        let pd = v.patch_size * v.patch_size;
        params.insert("vision.patch.weight", randn(&mut rng, &[pd, v.d_vision], 1.0 / (pd as f64).sqrt()))?;
        params.insert("vision.patch.bias", randn(&mut rng, &[1, v.d_vision], 0.1))?;

        let mut rng = root.fork_str("projector");
        linear_init(&mut params, &mut rng, "projector.fc1", v.d_vision, d, 1.0 / (v.d_vision as f64).sqrt())?;
        linear_init(&mut params, &mut rng, "projector.fc2", d, d, 1.0 / (d as f64).sqrt())?;

        let mut rng = root.fork_str("embed");
        params.insert("llm.tok_embed", randn(&mut rng, &[vs, d], 0.02))?;
        params.insert("llm.pos_embed", randn(&mut rng, &[t.max_seq_len, d], 0.02))?;

        for l in 0..t.n_layers {
            let mut rng = root.fork_str(&format!("layer{l}"));
            let p = format!("llm.layers.{l}");
            let sd = 1.0 / (d as f64).sqrt();
            norm_init(&mut params, &format!("{p}.ln1"), d)?;
            for m in ["q", "k", "v"] {
                linear_init(&mut params, &mut rng, &format!("{p}.attn.{m}"), d, d, sd)?;
            }
            linear_init(&mut params, &mut rng, &format!("{p}.attn.o"), d, d, sd * out_scale)?;
            norm_init(&mut params, &format!("{p}.ln2"), d)?;
            linear_init(&mut params, &mut rng, &format!("{p}.ffn.fc1"), d, h, sd)?;
            linear_init(&mut params, &mut rng, &format!("{p}.ffn.fc2"), h, d, out_scale / (h as f64).sqrt())?;
        }
        let mut rng = root.fork_str("head");
        norm_init(&mut params, "llm.ln_f", d)?;
        linear_init(&mut params, &mut rng, "llm.head", d, vs, 0.02)?;
        Ok(Self {
            config,
            params,
            moe: None,
            lora: BTreeMap::new(),
            stage: Stage::Init,
        })
    }

    pub fn d_model(&self) -> usize {
        self.config.transformer.d_model
    }

    pub fn num_image_tokens(&self) -> usize {
        self.config.vision.num_patches()
    }

    /// Layer-0 input rows: projected image tokens (zeros when the sequence
    /// has image slots but no image) followed by text token embeddings.
    /// Positional embeddings are not included.
    pub fn input_embeddings(&self, net: &mut Net<'_, '_>, seq: &Sequence) -> Result<NodeId, BackboneError> {
        let d = self.d_model();
        let text_ids: Vec<usize> = seq.text_ids().iter().map(|&i| i as usize).collect();
        if let Some(&bad) = text_ids.iter().find(|&&i| i >= self.config.transformer.vocab_size) {
            return Err(BackboneError::Dimension(format!("token id {bad} outside vocabulary")));
        }
        let table = net.param("llm.tok_embed")?;
        let mut parts = Vec::with_capacity(2);
        if seq.n_image > 0 {
            let img = match &seq.image {
                Some(img) => {
                    if seq.n_image != self.num_image_tokens() || img.height() != self.config.vision.image_size {
                        return Err(BackboneError::Dimension(format!(
                            "{} image slots for a {}x{} image",
                            seq.n_image,
                            img.height(),
                            img.width()
                        )));
                    }
                    let patches = net.tape.constant(patchify(img, self.config.vision.patch_size)?);
                    let v = net.linear(patches, "vision.patch")?;
                    let h = net.linear(v, "projector.fc1")?;
                    let h = net.tape.gelu(h);
                    net.linear(h, "projector.fc2")?
                }
                None => net.tape.constant(Tensor::zeros(&[seq.n_image, d])),
            };
            parts.push(img);
        }
        if !text_ids.is_empty() {
            parts.push(net.tape.gather(table, &text_ids));
        }
        if parts.is_empty() {
            return Err(BackboneError::Dimension("empty sequence".into()));
        }
        Ok(if parts.len() == 1 { parts[0] } else { net.tape.concat_rows(&parts) })
    }

    /// Input embeddings as a plain matrix, for router training.
    pub fn embed(&self, seq: &Sequence) -> Result<Tensor, BackboneError> {
        let mut tape = Tape::new();
        let bind = Binding::bind(&mut tape, &self.params);
        let mut net = Net::new(&mut tape, &bind, &self.lora);
        let x = self.input_embeddings(&mut net, seq)?;
        tape.check_finite()?;
        Ok(tape.value(x).clone())
    }

    fn route(
        &self,
        net: &mut Net<'_, '_>,
        spec: &MoeSpec,
        x0: NodeId,
    ) -> Result<(NodeId, GateDecision, Option<NodeId>), BackboneError> {
        let routing = |e: crate::moe::MoeError| BackboneError::Routing(e.to_string());
        match spec.router_mode {
            RouterMode::Frozen => {
                let x = net.tape.constant(net.tape.value(x0).clone());
                let logits = router_forward(net.tape, net.bind, &spec.router, x)?;
                let decision = gate(net.tape.value(logits), spec.top_k).map_err(routing)?;
                let gates = net.tape.constant(decision.weights.clone());
                Ok((gates, decision, None))
            }
            RouterMode::Learned => {
                let logits = router_forward(net.tape, net.bind, &spec.router, x0)?;
                let decision = gate(net.tape.value(logits), spec.top_k).map_err(routing)?;
                let gates = net.tape.topk_softmax(logits, spec.top_k);
                let e = spec.num_experts;
                let n = decision.num_tokens() as f64;
                let mut frac = vec![0.0; e];
                for t in 0..decision.num_tokens() {
                    frac[decision.top1(t)] += 1.0 / n;
                }
                let probs = net.tape.softmax(logits, false);
                let mean_p = net.tape.mean_rows(probs);
                let f = net.tape.constant(Tensor::matrix(1, e, frac).expect("row"));
                let prod = net.tape.mul(mean_p, f);
                let s = net.tape.sum(prod);
                let aux = net.tape.scale(s, spec.aux_loss_coef * e as f64);
                Ok((gates, decision, Some(aux)))
            }
        }
    }

    /// Full forward pass producing `seq_len x vocab` logits.
    pub fn forward(
        &self,
        tape: &mut Tape<'_>,
        bind: &Binding,
        seq: &Sequence,
        mut probe: Option<&mut MoeProbe>,
    ) -> Result<ForwardOutput, BackboneError> {
        let t = &self.config.transformer;
        if seq.len() > t.max_seq_len {
            return Err(BackboneError::Overlong {
                len: seq.len(),
                max: t.max_seq_len,
            });
        }
        let mut net = Net::new(tape, bind, &self.lora);
        let x0 = self.input_embeddings(&mut net, seq)?;
        let routed = match &self.moe {
            Some(spec) => Some(self.route(&mut net, spec, x0)?),
            None => None,
        };
        let pos_table = net.param("llm.pos_embed")?;
        let positions: Vec<usize> = (0..seq.len()).collect();
        let pos = net.tape.gather(pos_table, &positions);
        let mut x = net.tape.add(x0, pos);
        for l in 0..t.n_layers {
            let p = format!("llm.layers.{l}");
            let h = net.layer_norm(x, &format!("{p}.ln1"))?;
            let a = net.causal_attention(h, &format!("{p}.attn"), t.n_heads)?;
            x = net.tape.add(x, a);
            let h = net.layer_norm(x, &format!("{p}.ln2"))?;
            match (&self.moe, &routed) {
                (Some(spec), Some((gates, decision, _))) if spec.is_moe_layer(l) => {
                    if let Some(pr) = probe.as_deref_mut() {
                        pr.routes.push(RoutingRecord {
                            layer: l,
                            modality: seq.modality,
                            n_image: seq.n_image,
                            decision: decision.clone(),
                        });
                    }
                    x = moe_block(&mut net, spec, l, x, h, *gates, decision, probe.as_deref_mut())?;
                }
                _ => {
                    let f = net.ffn(h, &format!("{p}.ffn"))?;
                    x = net.tape.add(x, f);
                }
            }
        }
        let x = net.layer_norm(x, "llm.ln_f")?;
        let logits = net.linear(x, "llm.head")?;
        let (aux_loss, decision) = match routed {
            Some((_, d, aux)) => (aux, Some(d)),
            None => (None, None),
        };
        Ok(ForwardOutput {
            logits,
            aux_loss,
            decision,
        })
    }

    /// Mean over sequences of the masked response NLL (plus any
    /// load-balancing term).
    pub fn batch_loss(
        &self,
        tape: &mut Tape<'_>,
        bind: &Binding,
        batch: &[Sequence],
        mut probe: Option<&mut MoeProbe>,
    ) -> Result<NodeId, BackboneError> {
        if batch.is_empty() {
            return Err(BackboneError::NoResponse);
        }
        let mut total: Option<NodeId> = None;
        for seq in batch {
            let out = self.forward(tape, bind, seq, probe.as_deref_mut())?;
            let mut term = nll_loss(tape, out.logits, seq)?;
            if let Some(aux) = out.aux_loss {
                term = tape.add(term, aux);
            }
            total = Some(match total {
                Some(acc) => tape.add(acc, term),
                None => term,
            });
        }
        Ok(tape.scale(total.expect("non-empty"), 1.0 / batch.len() as f64))
    }

    pub fn logits(&self, seq: &Sequence) -> Result<Tensor, BackboneError> {
        let mut tape = Tape::new();
        let bind = Binding::bind(&mut tape, &self.params);
        let out = self.forward(&mut tape, &bind, seq, None)?;
        tape.check_finite()?;
        Ok(tape.value(out.logits).clone())
    }

    /// Masked response NLL of one sequence.
    pub fn nll(&self, seq: &Sequence) -> Result<f64, BackboneError> {
        nll_value(&self.logits(seq)?, seq)
    }

    pub fn to_checkpoint(&self, optim: Option<OptimState>, step: u64, extra: serde_json::Value) -> Checkpoint {
        let meta = ModelMeta {
            config: self.config.clone(),
            moe: self.moe.clone(),
            lora: self.lora.clone(),
            stage: self.stage,
        };
        let meta = serde_json::json!({
            "model": serde_json::to_value(meta).expect("model metadata serializes"),
            "run": extra,
        });
        Checkpoint::new(self.params.clone(), optim, step, meta)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, BackboneError> {
        let meta: ModelMeta = serde_json::from_value(ck.meta["model"].clone())
            .map_err(|e| BackboneError::Config(format!("checkpoint model metadata: {e}")))?;
        Ok(Self {
            config: meta.config,
            params: ck.params.clone(),
            moe: meta.moe,
            lora: meta.lora,
            stage: meta.stage,
        })
    }
}

impl Decoder for Model {
    fn next_logits(&self, seq: &Sequence) -> Result<Vec<f64>, BackboneError> {
        let l = self.logits(seq)?;
        Ok(l.row(l.rows() - 1).to_vec())
    }

    fn context_limit(&self) -> usize {
        self.config.transformer.max_seq_len
    }
}

/// Cross-entropy averaged over the supervised positions of `seq`.
pub fn nll_loss(tape: &mut Tape<'_>, logits: NodeId, seq: &Sequence) -> Result<NodeId, BackboneError> {
    let targets = seq.loss_targets()?;
    Ok(tape.cross_entropy(logits, &targets))
}

pub fn nll_value(logits: &Tensor, seq: &Sequence) -> Result<f64, BackboneError> {
    let mut tape = Tape::new();
    let l = tape.leaf_ref(logits, false);
    let loss = nll_loss(&mut tape, l, seq)?;
    Ok(tape.value(loss).item())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{SyntheticImage, BOS, EOS};
    use crate::numkernel::finite_difference_check_sampled;

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            transformer: TransformerConfig {
                d_model: 8,
                n_layers: 2,
                n_heads: 2,
                ffn_hidden: 16,
                vocab_size: 12,
                max_seq_len: 14,
                moe_layer_indices: vec![],
            },
            vision: VisionConfig {
                image_size: 4,
                patch_size: 2,
                d_vision: 4,
            },
        }
    }

    fn image() -> SyntheticImage {
        SyntheticImage::new(4, 4, (0..16).map(|i| i as f64 / 15.0).collect()).unwrap()
    }

    fn seq() -> Sequence {
        Sequence::build(Some(image()), 4, &[5, 6, 7], &[8, 9], Some(0))
    }

    #[test]
    fn one_token_gives_one_row() {
        let m = Model::init(tiny_config(), 1).unwrap();
        let s = Sequence {
            ids: vec![BOS],
            image: None,
            n_image: 0,
            prefix_len: 0,
            modality: None,
        };
        assert_eq!(m.logits(&s).unwrap().shape(), &[1, 12]);
    }

    #[test]
    fn future_perturbation_leaves_past_logits_bitwise() {
        let m = Model::init(tiny_config(), 2).unwrap();
        let s = seq();
        let base = m.logits(&s).unwrap();
        for t in 4..s.len() {
            let mut p = s.clone();
            p.ids[t] = if p.ids[t] == 10 { 11 } else { 10 };
            let l = m.logits(&p).unwrap();
            for r in 0..t {
                assert_eq!(base.row(r), l.row(r), "row {r} changed after perturbing {t}");
            }
        }
    }

    #[test]
    fn overlong_sequence_is_rejected() {
        let m = Model::init(tiny_config(), 2).unwrap();
        let s = Sequence::build(None, 0, &[5; 12], &[6], None);
        assert!(matches!(m.logits(&s), Err(BackboneError::Overlong { .. })));
    }

    #[test]
    fn untrained_entropy_is_near_log_vocab() {
        let cfg = ModelConfig::toy(200);
        let m = Model::init(cfg, 3).unwrap();
        let s = Sequence::build(None, 16, &[20, 30, 40], &[50, 60], None);
        let l = m.logits(&s).unwrap();
        let logv = (200f64).ln();
        for r in 0..l.rows() {
            let row = l.row(r);
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
            let h: f64 = -row.iter().map(|v| (v - mx).exp() / z).map(|p| p * p.ln()).sum::<f64>();
            assert!((h - logv).abs() / logv < 0.05, "row {r}: {h} vs {logv}");
        }
    }

    #[test]
    fn nll_on_hand_set_logits() {
        // 3 supervised positions: rows 1..=3 predict ids 7, 8, EOS.
        let s = Sequence::build(None, 0, &[6], &[7, 8], None);
        assert_eq!(s.prefix_len, 2);
        let v = 12;
        let mut data = vec![0.0; s.len() * v];
        data[v + 7] = 2.0;
        data[2 * v + 8] = 1.0;
        data[3 * v + EOS as usize] = -1.0;
        let logits = Tensor::matrix(s.len(), v, data).unwrap();
        let nll = |x: f64| -(x.exp() / (x.exp() + (v - 1) as f64)).ln();
        let expected = (nll(2.0) + nll(1.0) + nll(-1.0)) / 3.0;
        assert!((nll_value(&logits, &s).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn uniform_logits_give_log_v() {
        let s = Sequence::build(None, 0, &[6], &[7, 8], None);
        let logits = Tensor::zeros(&[s.len(), 12]);
        assert!((nll_value(&logits, &s).unwrap() - 12f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn certain_predictions_give_zero_loss() {
        let s = Sequence::build(None, 0, &[6], &[7], None);
        let mut data = vec![-1e3; s.len() * 12];
        for (row, target) in s.loss_targets().unwrap() {
            data[row * 12 + target] = 1e3;
        }
        let logits = Tensor::matrix(s.len(), 12, data).unwrap();
        assert_eq!(nll_value(&logits, &s).unwrap(), 0.0);
    }

    #[test]
    fn checkpoint_roundtrip_preserves_forward() {
        let m = Model::init(tiny_config(), 4).unwrap();
        let ck = m.to_checkpoint(None, 0, serde_json::Value::Null);
        let back = Model::from_checkpoint(&Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap()).unwrap();
        assert_eq!(back, m);
        assert_eq!(m.logits(&seq()).unwrap(), back.logits(&seq()).unwrap());
    }

    #[test]
    fn full_model_gradients_match_finite_differences() {
        let m = Model::init(tiny_config(), 5).unwrap();
        let s = seq();
        let rep = finite_difference_check_sampled(
            |tape, bind| {
                let out = m.forward(tape, bind, &s, None).map_err(|e| match e {
                    BackboneError::Kernel(k) => k,
                    other => panic!("{other}"),
                })?;
                Ok(tape.cross_entropy(out.logits, &s.loss_targets().unwrap()))
            },
            &m.params,
            1e-5,
            6,
            11,
        )
        .unwrap();
        assert!(rep.max_rel_error < 1e-4, "{:?}", rep.per_param);
    }
}
