use serde::{Deserialize, Serialize};

use crate::backbone::{Model, Sequence, Stage, Vocabulary};
use crate::eval::silhouette;
use crate::moe::{router_logits, train_router, MoeProbe, Router, RouterConfig, RouterExample, RouterMode, RouterTrainConfig};
use crate::numkernel::OptimState;
use crate::synthdata::{Modality, Record};

use super::{train_phase, PhaseConfig, PhaseId, PipelineError, TrainReport};

type PhaseResult = Result<(OptimState, TrainReport), PipelineError>;

fn expect_phase(cfg: &PhaseConfig, phase: PhaseId) -> Result<(), PipelineError> {
    if cfg.phase != phase {
        return Err(PipelineError::Config(format!("expected a {phase} config, got {}", cfg.phase)));
    }
    Ok(())
}

/// Trainable names `cfg` would produce on `model`, without touching it.
fn planned_trainable(model: &Model, cfg: &PhaseConfig) -> Result<Vec<String>, PipelineError> {
    let mut params = model.params.clone();
    cfg.apply(&mut params)?;
    Ok(params.trainable_names())
}

fn finish(model: &mut Model, stage: Stage, out: (OptimState, TrainReport)) -> PhaseResult {
    if out.1.completed {
        model.stage = stage;
    }
    Ok(out)
}

/// Language-model pretraining on the corpus text with the image slots left
/// empty; stands in for starting from a pretrained language model.
pub fn run_pretrain(
    model: &mut Model,
    records: &[Record],
    vocab: &Vocabulary,
    cfg: &PhaseConfig,
    resume: Option<OptimState>,
    stop_after: Option<u64>,
) -> PhaseResult {
    expect_phase(cfg, PhaseId::Pretrain)?;
    let n = model.num_image_tokens();
    let data: Vec<Sequence> = records
        .iter()
        .flat_map(|r| [r.caption_sequence(vocab, n), r.instruct_sequence(vocab, n)])
        .map(|mut s| {
            s.image = None;
            s
        })
        .collect();
    let out = train_phase(model, &data, cfg, resume, stop_after, None)?;
    finish(model, Stage::Pretrained, out)
}

/// Alignment: caption likelihood with only the projector trainable.
pub fn run_phase1(
    model: &mut Model,
    records: &[Record],
    vocab: &Vocabulary,
    cfg: &PhaseConfig,
    resume: Option<OptimState>,
    stop_after: Option<u64>,
) -> PhaseResult {
    expect_phase(cfg, PhaseId::Align)?;
    if let Some(bad) = planned_trainable(model, cfg)?
        .into_iter()
        .find(|n| !n.starts_with("projector."))
    {
        return Err(PipelineError::TrainableOutsideProjector(bad));
    }
    let n = model.num_image_tokens();
    let data: Vec<Sequence> = records.iter().map(|r| r.caption_sequence(vocab, n)).collect();
    let out = train_phase(model, &data, cfg, resume, stop_after, None)?;
    finish(model, Stage::Aligned, out)
}

/// Instruction tuning of projector and language model; vision stays frozen.
pub fn run_phase2(
    model: &mut Model,
    records: &[Record],
    vocab: &Vocabulary,
    cfg: &PhaseConfig,
    resume: Option<OptimState>,
    stop_after: Option<u64>,
) -> PhaseResult {
    expect_phase(cfg, PhaseId::Instruct)?;
    if let Some(bad) = planned_trainable(model, cfg)?
        .into_iter()
        .find(|n| n.starts_with("vision."))
    {
        return Err(PipelineError::VisionNotFrozen(bad));
    }
    let n = model.num_image_tokens();
    let data: Vec<Sequence> = records.iter().map(|r| r.instruct_sequence(vocab, n)).collect();
    let out = train_phase(model, &data, cfg, resume, stop_after, None)?;
    finish(model, Stage::Instructed, out)
}

/// MoE tuning. The model must come from expansion; with a frozen-mode
/// router no router weight may be trainable.
pub fn run_phase3(
    model: &mut Model,
    records: &[Record],
    vocab: &Vocabulary,
    cfg: &PhaseConfig,
    resume: Option<OptimState>,
    stop_after: Option<u64>,
    probe: Option<&mut MoeProbe>,
) -> PhaseResult {
    expect_phase(cfg, PhaseId::Moe)?;
    let Some(spec) = &model.moe else {
        return Err(PipelineError::Prerequisite(
            "MoE tuning needs a model produced by expansion from a dense checkpoint".into(),
        ));
    };
    if model.stage < Stage::Expanded {
        return Err(PipelineError::Prerequisite(format!("model stage is {:?}", model.stage)));
    }
    if spec.router_mode == RouterMode::Frozen {
        if let Some(bad) = planned_trainable(model, cfg)?
            .into_iter()
            .find(|n| n.starts_with("router."))
        {
            return Err(PipelineError::RouterNotFrozen(bad));
        }
    }
    let n = model.num_image_tokens();
    let data: Vec<Sequence> = records.iter().map(|r| r.instruct_sequence(vocab, n)).collect();
    let out = train_phase(model, &data, cfg, resume, stop_after, probe)?;
    finish(model, Stage::Tuned, out)
}

/// Dense-FFN tuning on the same data as MoE tuning, for comparison.
pub fn run_sft(
    model: &mut Model,
    records: &[Record],
    vocab: &Vocabulary,
    cfg: &PhaseConfig,
    resume: Option<OptimState>,
    stop_after: Option<u64>,
) -> PhaseResult {
    expect_phase(cfg, PhaseId::Sft)?;
    if model.moe.is_some() {
        return Err(PipelineError::Config("dense tuning expects a dense model".into()));
    }
    let n = model.num_image_tokens();
    let data: Vec<Sequence> = records.iter().map(|r| r.instruct_sequence(vocab, n)).collect();
    let out = train_phase(model, &data, cfg, resume, stop_after, None)?;
    finish(model, Stage::Tuned, out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RouterPhaseConfig {
    pub depth: usize,
    /// Router classes, one per expert. Modality `m` is labeled `m % classes`.
    pub classes: usize,
    pub labels_per_modality: usize,
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
}

impl RouterPhaseConfig {
    pub fn default_with_seed(seed: u64) -> Self {
        Self {
            depth: 2,
            classes: Modality::ALL.len(),
            labels_per_modality: 25,
            steps: 200,
            lr: 1e-2,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RouterPhaseReport {
    pub labels_per_modality: usize,
    pub train_examples: usize,
    pub train_accuracy: f64,
    pub heldout_accuracy: f64,
    /// Silhouette of the pooled router outputs of the held-out records,
    /// grouped by true modality.
    pub silhouette: f64,
    pub losses: Vec<f64>,
}

/// Layer-0 input embeddings of each record's instruction sequence, labeled
/// by modality index modulo `classes`. Takes at most `per_modality` records
/// of each modality, in corpus order.
pub fn router_dataset(
    model: &Model,
    records: &[Record],
    vocab: &Vocabulary,
    per_modality: Option<usize>,
    classes: usize,
) -> Result<Vec<RouterExample>, PipelineError> {
    let mut taken = [0usize; 4];
    let n = model.num_image_tokens();
    let mut out = Vec::new();
    for r in records {
        let m = r.modality.index();
        if per_modality.is_some_and(|cap| taken[m] >= cap) {
            continue;
        }
        taken[m] += 1;
        out.push(RouterExample {
            embeddings: model.embed(&r.instruct_sequence(vocab, n))?,
            label: m % classes,
        });
    }
    Ok(out)
}

/// Fits the modality router on a small labeled subset of `train` and scores
/// it on `heldout`. Returns the router frozen.
pub fn run_router_phase(
    model: &Model,
    train: &[Record],
    heldout: &[Record],
    vocab: &Vocabulary,
    cfg: &RouterPhaseConfig,
) -> Result<(Router, RouterPhaseReport), PipelineError> {
    if model.stage < Stage::Aligned {
        log::warn!("router trained on embeddings of a model that was never aligned (stage {:?})", model.stage);
    }
    if cfg.labels_per_modality == 0 {
        return Err(PipelineError::Config("labels per modality must be positive".into()));
    }
    if cfg.classes < 2 {
        return Err(PipelineError::Config("the router needs at least two classes".into()));
    }
    let examples = router_dataset(model, train, vocab, Some(cfg.labels_per_modality), cfg.classes)?;
    let rcfg = RouterConfig::new(cfg.depth, model.d_model(), cfg.classes);
    let router = Router::new(rcfg, cfg.seed)?;
    let tcfg = RouterTrainConfig {
        steps: cfg.steps,
        lr: cfg.lr,
        weight_decay: 0.0,
    };
    let (router, rep) = train_router(router, &examples, &tcfg)?;
    let test = router_dataset(model, heldout, vocab, None, cfg.classes)?;
    let mut points = Vec::with_capacity(test.len());
    let mut labels = Vec::with_capacity(test.len());
    let mut correct = 0;
    for ex in &test {
        let out = router_logits(&ex.embeddings, &router)?;
        correct += (out.prediction == ex.label) as usize;
        points.push(out.sequence);
        labels.push(ex.label);
    }
    let heldout_accuracy = if test.is_empty() { 0.0 } else { correct as f64 / test.len() as f64 };
    let sil = silhouette(&points, &labels)?;
    Ok((
        router,
        RouterPhaseReport {
            labels_per_modality: cfg.labels_per_modality,
            train_examples: examples.len(),
            train_accuracy: rep.train_accuracy,
            heldout_accuracy,
            silhouette: sil,
            losses: rep.losses,
        },
    ))
}
