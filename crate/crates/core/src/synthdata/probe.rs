use crate::backbone::patchify;
use crate::numkernel::{optimizer_step, Binding, LrSchedule, OptimState, ParamSet, Tape, Tensor};

use super::attributes::IMAGE_SIZE;
use super::record::Record;

/// Multinomial logistic regression fitted by full-batch AdamW.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearProbe {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl LinearProbe {
    pub fn fit(features: &[Vec<f64>], labels: &[usize], n_classes: usize, steps: usize) -> Self {
        let d = features.first().map_or(0, Vec::len);
        let x = Tensor::from_rows(features).expect("rectangular features");
        let mut params = ParamSet::new();
        params.insert("w", Tensor::zeros(&[d, n_classes])).expect("fresh");
        params.insert("b", Tensor::zeros(&[1, n_classes])).expect("fresh");
        let mut state = OptimState::new(
            LrSchedule {
                base_lr: 0.1,
                warmup_steps: 0,
                total_steps: steps as u64,
                min_lr: 0.0,
            },
            0.0,
        );
        let targets: Vec<(usize, usize)> = labels.iter().copied().enumerate().collect();
        for _ in 0..steps {
            let grads = {
                let mut tape = Tape::new();
                let bind = Binding::bind(&mut tape, &params);
                let xs = tape.leaf_ref(&x, false);
                let z = tape.matmul(xs, bind.get("w").expect("bound"));
                let z = tape.add_row(z, bind.get("b").expect("bound"));
                let loss = tape.cross_entropy(z, &targets);
                let g = tape.backward(loss).expect("finite probe loss");
                bind.collect(&g, &params)
            };
            optimizer_step(&mut params, &grads, &mut state).expect("all gradients present");
        }
        Self {
            weight: params.get("w").expect("w").clone(),
            bias: params.get("b").expect("b").clone(),
        }
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        let k = self.weight.cols();
        let scores: Vec<f64> = (0..k)
            .map(|c| self.bias.data()[c] + x.iter().enumerate().map(|(i, v)| v * self.weight.get(i, c)).sum::<f64>())
            .collect();
        crate::moe::argmax(&scores)
    }

    pub fn accuracy(&self, features: &[Vec<f64>], labels: &[usize]) -> f64 {
        if features.is_empty() {
            return 0.0;
        }
        let hits = features.iter().zip(labels).filter(|(x, &y)| self.predict(x) == y).count();
        hits as f64 / features.len() as f64
    }
}

/// Average of the 4x4 patch vectors of an image.
pub fn mean_patch_vector(r: &Record) -> Vec<f64> {
    let p = patchify(&r.image, 4).expect("16x16 images");
    let n = p.rows() as f64;
    (0..p.cols()).map(|c| (0..p.rows()).map(|i| p.get(i, c)).sum::<f64>() / n).collect()
}

/// Training accuracy of a linear modality classifier on mean patch vectors.
pub fn separability_certificate(records: &[Record]) -> f64 {
    debug_assert!(records.iter().all(|r| r.image.height() == IMAGE_SIZE));
    let feats: Vec<Vec<f64>> = records.iter().map(mean_patch_vector).collect();
    let labels: Vec<usize> = records.iter().map(|r| r.modality.index()).collect();
    LinearProbe::fit(&feats, &labels, 4, 300).accuracy(&feats, &labels)
}
