use std::collections::BTreeMap;

use crate::backbone::{Model, Sequence};
use crate::numkernel::{Binding, Tape};

use super::{MoeError, MoeProbe};

/// Top-1 expert counts per `(layer, modality, expert)`, split by whether the
/// token was an image slot or a text token.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ActivationTrace {
    pub modalities: Vec<String>,
    pub num_experts: usize,
    pub layers: Vec<usize>,
    /// `(layer, modality, expert) -> [image, text]` top-1 counts.
    pub counts: BTreeMap<(usize, usize, usize), [u64; 2]>,
    /// `(layer, modality) -> tokens routed`.
    pub routed: BTreeMap<(usize, usize), u64>,
}

impl ActivationTrace {
    pub fn new(modalities: Vec<String>, num_experts: usize, layers: Vec<usize>) -> Self {
        let mut t = Self {
            modalities,
            num_experts,
            layers,
            ..Default::default()
        };
        for &l in &t.layers {
            for m in 0..t.modalities.len() {
                t.routed.insert((l, m), 0);
                for e in 0..num_experts {
                    t.counts.insert((l, m, e), [0, 0]);
                }
            }
        }
        t
    }

    /// Folds the routing records of a probe in.
    pub fn absorb(&mut self, probe: &MoeProbe) -> Result<(), MoeError> {
        for r in &probe.routes {
            let m = r.modality.ok_or(MoeError::Unlabeled(0))?;
            if m >= self.modalities.len() {
                return Err(MoeError::BadLabel(m));
            }
            for t in 0..r.decision.num_tokens() {
                let kind = usize::from(t >= r.n_image);
                let e = r.decision.top1(t);
                self.counts.entry((r.layer, m, e)).or_insert([0, 0])[kind] += 1;
            }
            *self.routed.entry((r.layer, m)).or_insert(0) += r.decision.num_tokens() as u64;
        }
        Ok(())
    }

    /// Adds another trace's counts; both must share the same schema.
    pub fn merge(&mut self, other: &ActivationTrace) -> Result<(), MoeError> {
        if other.modalities != self.modalities || other.num_experts != self.num_experts {
            return Err(MoeError::Config("trace schemas differ".into()));
        }
        for (k, v) in &other.counts {
            let c = self.counts.entry(*k).or_insert([0, 0]);
            c[0] += v[0];
            c[1] += v[1];
        }
        for (k, v) in &other.routed {
            *self.routed.entry(*k).or_insert(0) += v;
        }
        Ok(())
    }

    pub fn top1(&self, layer: usize, modality: usize, expert: usize) -> u64 {
        self.counts.get(&(layer, modality, expert)).map_or(0, |c| c[0] + c[1])
    }

    /// Image and text top-1 counts of one expert summed over modalities.
    pub fn token_kind_split(&self, layer: usize, expert: usize) -> [u64; 2] {
        let mut out = [0, 0];
        for ((l, _, e), c) in &self.counts {
            if *l == layer && *e == expert {
                out[0] += c[0];
                out[1] += c[1];
            }
        }
        out
    }

    /// CSV with header `layer,modality,expert,top1_count,image_token_count,text_token_count`.
    pub fn to_csv(&self) -> Result<String, MoeError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["layer", "modality", "expert", "top1_count", "image_token_count", "text_token_count"])
            .map_err(|e| MoeError::Io(e.to_string()))?;
        for ((l, m, e), c) in &self.counts {
            w.write_record([
                l.to_string(),
                self.modalities[*m].clone(),
                e.to_string(),
                (c[0] + c[1]).to_string(),
                c[0].to_string(),
                c[1].to_string(),
            ])
            .map_err(|e| MoeError::Io(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| MoeError::Io(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv is utf-8"))
    }
}

/// Runs every sequence through the model and counts top-1 expert choices.
pub fn trace_activations(
    model: &Model,
    sequences: &[Sequence],
    modalities: &[String],
) -> Result<ActivationTrace, MoeError> {
    let spec = model.moe.as_ref().ok_or(MoeError::NotMoe)?;
    let mut trace = ActivationTrace::new(modalities.to_vec(), spec.num_experts, spec.layers.clone());
    for (i, seq) in sequences.iter().enumerate() {
        if seq.modality.is_none() {
            return Err(MoeError::Unlabeled(i));
        }
        let mut probe = MoeProbe::default();
        let mut tape = Tape::new();
        let bind = Binding::bind(&mut tape, &model.params);
        model.forward(&mut tape, &bind, seq, Some(&mut probe))?;
        trace.absorb(&probe)?;
    }
    Ok(trace)
}
