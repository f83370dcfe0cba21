use serde::{Deserialize, Serialize};

use crate::backbone::Model;
use crate::numkernel::{name_matches, randn, SplitMix64, Tensor};

use super::MoeError;

/// Low-rank update on one linear weight. The stored weight is `d_in x d_out`
/// (inputs multiply from the left), so the adapted map is
/// `x W + (alpha / r) x A^T B^T` with `A: r x d_in` and `B: d_out x r`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraAdapter {
    pub target: String,
    pub rank: usize,
    pub alpha: f64,
    pub d_in: usize,
    pub d_out: usize,
}

impl LoraAdapter {
    pub fn a_name(&self) -> String {
        format!("lora.{}.a", self.target)
    }

    pub fn b_name(&self) -> String {
        format!("lora.{}.b", self.target)
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn num_params(&self) -> usize {
        self.rank * (self.d_in + self.d_out)
    }
}

/// Attaches adapters to every linear weight matching a pattern, then freezes
/// everything except the adapter matrices. `A` gets small random values and
/// `B` starts at zero. Returns the adapted weight names.
pub fn apply_lora(
    model: &mut Model,
    targets: &[String],
    rank: usize,
    alpha: f64,
    seed: u64,
) -> Result<Vec<String>, MoeError> {
    let matched: Vec<(String, usize, usize)> = model
        .params
        .iter()
        .filter(|(n, p)| n.ends_with(".weight") && p.tensor.shape().len() == 2 && !model.lora.contains_key(*n))
        .filter(|(n, _)| targets.iter().any(|t| name_matches(t, n)))
        .map(|(n, p)| (n.to_string(), p.tensor.rows(), p.tensor.cols()))
        .collect();
    if matched.is_empty() {
        return Err(MoeError::NoTargets(targets.join(",")));
    }
    for (name, d_in, d_out) in &matched {
        if rank == 0 || rank > (*d_in).min(*d_out) {
            return Err(MoeError::Rank {
                rank,
                target: name.clone(),
                max: (*d_in).min(*d_out),
            });
        }
    }
    let root = SplitMix64::new(seed).fork_str("lora");
    for (name, d_in, d_out) in &matched {
        let ad = LoraAdapter {
            target: name.clone(),
            rank,
            alpha,
            d_in: *d_in,
            d_out: *d_out,
        };
        let mut rng = root.fork_str(name);
        model.params.insert(ad.a_name(), randn(&mut rng, &[rank, *d_in], 1.0 / (*d_in as f64).sqrt()))?;
        model.params.insert(ad.b_name(), Tensor::zeros(&[*d_out, rank]))?;
        model.lora.insert(name.clone(), ad);
    }
    model.params.train_only(&["lora.*".to_string()]);
    Ok(matched.into_iter().map(|(n, _, _)| n).collect())
}

/// Dense effective weight `W + (alpha / r) (B A)^T` of an adapted layer.
pub fn effective_weight(model: &Model, target: &str) -> Result<Tensor, MoeError> {
    let w = model.params.tensor(target)?;
    let Some(ad) = model.lora.get(target) else {
        return Ok(w.clone());
    };
    let a = model.params.tensor(&ad.a_name())?;
    let b = model.params.tensor(&ad.b_name())?;
    let mut out = w.clone();
    let s = ad.scale();
    let data = out.data_mut();
    for i in 0..ad.d_in {
        for j in 0..ad.d_out {
            let mut acc = 0.0;
            for r in 0..ad.rank {
                acc += b.get(j, r) * a.get(r, i);
            }
            data[i * ad.d_out + j] += s * acc;
        }
    }
    Ok(out)
}
