use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneError, Model, Sequence};
use crate::moe::MoeProbe;
use crate::numkernel::{optimizer_step, Binding, KernelError, OptimState, SplitMix64, Tape};

use super::{PhaseConfig, PipelineError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub losses: Vec<LossRow>,
    pub total_steps: u64,
    pub completed: bool,
}

impl TrainReport {
    pub fn first_loss(&self) -> Option<f64> {
        self.losses.first().map(|r| r.loss)
    }

    pub fn last_loss(&self) -> Option<f64> {
        self.losses.last().map(|r| r.loss)
    }

    /// `step,loss,lr` rows.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.losses {
            w.serialize(r).expect("in-memory csv");
        }
        String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8")
    }
}

/// Sample order of one epoch; a pure function of seed and epoch so a resumed
/// run replays the same batches.
pub fn epoch_order(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    SplitMix64::new(seed).fork_str("batches").fork(epoch).shuffle(&mut idx);
    idx
}

/// Indices of the batch consumed by optimizer step `step`.
pub fn batch_indices(cfg: &PhaseConfig, n: usize, step: u64) -> Vec<usize> {
    let spe = cfg.steps_per_epoch(n);
    let order = epoch_order(cfg.seed, step / spe, n);
    let b = (step % spe) as usize * cfg.batch_size;
    order[b..(b + cfg.batch_size).min(n)].to_vec()
}

fn numerical(step: u64) -> impl Fn(BackboneError) -> PipelineError {
    move |e| match e {
        BackboneError::Kernel(KernelError::NonFinite { op, node }) => PipelineError::NonFinite {
            step,
            detail: format!("`{op}` at node {node}"),
        },
        other => other.into(),
    }
}

/// Runs optimizer steps until the phase's step budget is reached, or until
/// `stop_after` steps were taken in this call. Freezing follows `cfg`; an
/// existing optimizer state continues where it stopped.
pub fn train_phase(
    model: &mut Model,
    data: &[Sequence],
    cfg: &PhaseConfig,
    resume: Option<OptimState>,
    stop_after: Option<u64>,
    mut probe: Option<&mut MoeProbe>,
) -> Result<(OptimState, TrainReport), PipelineError> {
    if data.is_empty() {
        return Err(PipelineError::Config(format!("phase {} has no training data", cfg.phase)));
    }
    cfg.apply(&mut model.params)?;
    let total = cfg.total_steps(data.len());
    let mut state = resume.unwrap_or_else(|| OptimState::new(cfg.schedule(total), cfg.weight_decay));
    let mut report = TrainReport {
        total_steps: total,
        ..Default::default()
    };
    let mut taken = 0;
    while state.step < total && stop_after.map_or(true, |s| taken < s) {
        let step = state.step;
        let batch: Vec<Sequence> = batch_indices(cfg, data.len(), step)
            .into_iter()
            .map(|i| data[i].clone())
            .collect();
        let (loss, grads) = {
            let mut tape = Tape::new();
            let bind = Binding::bind(&mut tape, &model.params);
            let loss = model
                .batch_loss(&mut tape, &bind, &batch, probe.as_deref_mut())
                .map_err(numerical(step))?;
            let value = tape.value(loss).item();
            let g = tape.backward(loss).map_err(|e| numerical(step)(e.into()))?;
            if !value.is_finite() {
                return Err(PipelineError::NonFinite {
                    step,
                    detail: "loss".into(),
                });
            }
            (value, bind.collect(&g, &model.params))
        };
        let lr = optimizer_step(&mut model.params, &grads, &mut state)?;
        log::debug!("{} step {step}: loss {loss:.5} lr {lr:.2e}", cfg.phase);
        report.losses.push(LossRow { step, loss, lr });
        taken += 1;
    }
    report.completed = state.step >= total;
    Ok((state, report))
}
