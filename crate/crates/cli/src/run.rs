//! Phase execution against a run directory. Each phase reads its
//! predecessor's `checkpoint.json` and writes `config.json`,
//! `manifest.json`, `checkpoint.json` and `losses.csv` into
//! `<out>/<phase>/`.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::Serialize;

use medmoe::backbone::Model;
use medmoe::moe::{expand_from_dense, Router, RouterConfig, RouterMode};
use medmoe::numkernel::{Checkpoint, OptimState};
use medmoe::pipeline::{
    run_phase1, run_phase2, run_phase3, run_pretrain, run_router_phase, run_sft, LossRow, PhaseId, PipelineError,
    RouterPhaseReport, RunManifest, TrainReport,
};
use medmoe::synthdata::{load_corpus, Corpus, Split};

use crate::config::RunConfig;

pub const CHECKPOINT_FILE: &str = "checkpoint.json";

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn phase_dir(out: &Path, phase: PhaseId) -> PathBuf {
    out.join(phase.as_str())
}

/// Loads a checkpoint that a later step depends on; absence is a missing
/// prerequisite rather than an I/O failure.
pub fn load_prerequisite(path: &Path, what: &str) -> anyhow::Result<Checkpoint> {
    if !path.exists() {
        return Err(PipelineError::Prerequisite(format!("{what} checkpoint not found at {}", path.display())).into());
    }
    Ok(Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?)
}

pub fn load_model(path: &Path) -> anyhow::Result<Model> {
    let ck = load_prerequisite(path, "model")?;
    if ck.meta.get("model").is_none() {
        return Err(PipelineError::Config(format!("{} is not a model checkpoint", path.display())).into());
    }
    Ok(Model::from_checkpoint(&ck)?)
}

pub fn load_router(path: &Path) -> anyhow::Result<Router> {
    let ck = load_prerequisite(path, "router")?;
    let config: RouterConfig = serde_json::from_value(ck.meta["router"].clone())
        .map_err(|_| PipelineError::Config(format!("{} is not a router checkpoint", path.display())))?;
    let mut router = Router::from_params(config, &ck.params)?;
    router.freeze();
    Ok(router)
}

fn previous(phase: PhaseId) -> Option<PhaseId> {
    match phase {
        PhaseId::Pretrain => None,
        PhaseId::Align => Some(PhaseId::Pretrain),
        PhaseId::Instruct => Some(PhaseId::Align),
        PhaseId::Router | PhaseId::Moe | PhaseId::Sft => Some(PhaseId::Instruct),
    }
}

/// Outcome of one `train` invocation.
#[derive(Clone, Debug)]
pub struct PhaseOutcome {
    pub dir: PathBuf,
    pub completed: bool,
    pub steps: u64,
    pub last_loss: Option<f64>,
}

fn read_losses(path: &Path, before: u64) -> anyhow::Result<Vec<LossRow>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let mut rows = Vec::new();
    for row in csv::Reader::from_path(path)?.deserialize() {
        let row: LossRow = row?;
        if row.step < before {
            rows.push(row);
        }
    }
    Ok(rows)
}

fn run_meta(cfg: &RunConfig, phase: PhaseId, corpus: &Corpus, completed: bool) -> serde_json::Value {
    serde_json::json!({
        "phase": phase.as_str(),
        "config_hash": cfg.hash(),
        "corpus_seed": corpus.manifest.seed,
        "completed": completed,
    })
}

/// Hashed part of the configuration plus the resolved phase settings.
fn manifest_config(cfg: &RunConfig, phase: PhaseId) -> serde_json::Value {
    let mut hashed = cfg.clone();
    hashed.data = None;
    hashed.out = None;
    serde_json::json!({ "run": hashed, "phase": cfg.phase_config(phase) })
}

pub fn cmd_train(cfg: &RunConfig, phase: PhaseId, resume: bool, stop_after: Option<u64>) -> anyhow::Result<PhaseOutcome> {
    let out = cfg.out_dir()?;
    let corpus = load_corpus(cfg.data_dir()?).context("loading corpus")?;
    let dir = phase_dir(out, phase);
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    write_json(&dir.join("config.json"), cfg)?;
    if phase == PhaseId::Router {
        return train_router_phase(cfg, &corpus, out, &dir);
    }

    let ck_path = dir.join(CHECKPOINT_FILE);
    let (mut model, state) = if resume {
        let ck = load_prerequisite(&ck_path, &format!("partial {phase}"))?;
        if ck.meta["run"]["config_hash"] != serde_json::json!(cfg.hash()) {
            return Err(PipelineError::Config("resumed checkpoint was written with a different config".into()).into());
        }
        (Model::from_checkpoint(&ck)?, ck.optim)
    } else {
        (initial_model(cfg, phase, &corpus, out)?, None)
    };
    let resumed_at = state.as_ref().map_or(0, |s: &OptimState| s.step);
    let pc = cfg.phase_config(phase);
    let vocab = &corpus.vocab;
    let (state, report) = match phase {
        PhaseId::Pretrain => {
            let mut text = corpus.split(Split::Align);
            text.extend(corpus.split(Split::Instruct));
            run_pretrain(&mut model, &text, vocab, &pc, state, stop_after)?
        }
        PhaseId::Align => run_phase1(&mut model, &corpus.split(Split::Align), vocab, &pc, state, stop_after)?,
        PhaseId::Instruct => run_phase2(&mut model, &corpus.split(Split::Instruct), vocab, &pc, state, stop_after)?,
        PhaseId::Moe => run_phase3(&mut model, &corpus.split(Split::Tune), vocab, &pc, state, stop_after, None)?,
        PhaseId::Sft => run_sft(&mut model, &corpus.split(Split::Tune), vocab, &pc, state, stop_after)?,
        PhaseId::Router => unreachable!("handled above"),
    };

    let mut losses = if resume {
        read_losses(&dir.join("losses.csv"), resumed_at)?
    } else {
        Vec::new()
    };
    losses.extend(report.losses.iter().cloned());
    let full = TrainReport {
        losses,
        total_steps: report.total_steps,
        completed: report.completed,
    };
    fs::write(dir.join("losses.csv"), full.to_csv())?;

    let step = state.step;
    let ck = model.to_checkpoint(Some(state), step, run_meta(cfg, phase, &corpus, full.completed));
    ck.save(&ck_path).with_context(|| format!("writing {}", ck_path.display()))?;
    let metrics = serde_json::json!({
        "steps": step,
        "total_steps": full.total_steps,
        "completed": full.completed,
        "first_loss": full.first_loss(),
        "last_loss": full.last_loss(),
    });
    write_json(
        &dir.join("manifest.json"),
        &RunManifest::new(phase.as_str(), manifest_config(cfg, phase), corpus.manifest.seed, metrics),
    )?;
    log::info!("{phase}: {step}/{} steps, last loss {:?}", full.total_steps, full.last_loss());
    Ok(PhaseOutcome {
        dir,
        completed: full.completed,
        steps: step,
        last_loss: full.last_loss(),
    })
}

fn initial_model(cfg: &RunConfig, phase: PhaseId, corpus: &Corpus, out: &Path) -> anyhow::Result<Model> {
    let Some(prev) = previous(phase) else {
        return Ok(Model::init(cfg.model.model_config(corpus.vocab.size()), cfg.seed)?);
    };
    let prev_path = phase_dir(out, prev).join(CHECKPOINT_FILE);
    let ck = load_prerequisite(&prev_path, &format!("{prev} (run `train --phase {prev}` first)"))?;
    if ck.meta["run"]["completed"] != serde_json::json!(true) {
        return Err(PipelineError::Prerequisite(format!("{prev} phase did not finish; resume it first")).into());
    }
    let model = Model::from_checkpoint(&ck)?;
    if model.config.transformer.vocab_size != corpus.vocab.size() {
        return Err(PipelineError::Config("checkpoint vocabulary does not match the corpus".into()).into());
    }
    if phase != PhaseId::Moe {
        return Ok(model);
    }
    let router = match cfg.moe.router_mode {
        RouterMode::Frozen => load_router(&phase_dir(out, PhaseId::Router).join(CHECKPOINT_FILE))?,
        RouterMode::Learned => {
            let rc = RouterConfig::new(cfg.router.depth, model.d_model(), cfg.moe.num_experts);
            Router::new(rc, cfg.seed)?
        }
    };
    Ok(expand_from_dense(&model, &router, &cfg.moe.expand_options())?)
}

/// Router fitting on the instruction split's labeled subset, scored on the
/// test split. Writes the router checkpoint and its report.
fn train_router_phase(cfg: &RunConfig, corpus: &Corpus, out: &Path, dir: &Path) -> anyhow::Result<PhaseOutcome> {
    let model = load_model(&phase_dir(out, PhaseId::Instruct).join(CHECKPOINT_FILE))?;
    let rcfg = cfg.router_phase();
    let (router, report) = run_router_phase(
        &model,
        &corpus.split(Split::Instruct),
        &corpus.split(Split::Test),
        &corpus.vocab,
        &rcfg,
    )?;
    save_router(&router, &report, cfg, corpus, &dir.join(CHECKPOINT_FILE))?;
    let mut summary = serde_json::to_value(&report)?;
    summary.as_object_mut().expect("object").remove("losses");
    write_json(&dir.join("report.json"), &summary)?;
    let mut rows = csv::Writer::from_writer(Vec::new());
    for (step, loss) in report.losses.iter().enumerate() {
        rows.serialize(LossRow {
            step: step as u64,
            loss: *loss,
            lr: rcfg.lr,
        })?;
    }
    fs::write(dir.join("losses.csv"), rows.into_inner()?)?;
    write_json(
        &dir.join("manifest.json"),
        &RunManifest::new("router", manifest_config(cfg, PhaseId::Router), corpus.manifest.seed, summary),
    )?;
    log::info!(
        "router: held-out accuracy {:.3}, silhouette {:.3}",
        report.heldout_accuracy,
        report.silhouette
    );
    Ok(PhaseOutcome {
        dir: dir.to_path_buf(),
        completed: true,
        steps: report.losses.len() as u64,
        last_loss: report.losses.last().copied(),
    })
}

pub fn save_router(
    router: &Router,
    report: &RouterPhaseReport,
    cfg: &RunConfig,
    corpus: &Corpus,
    path: &Path,
) -> anyhow::Result<()> {
    let mut meta = run_meta(cfg, PhaseId::Router, corpus, true);
    meta["heldout_accuracy"] = serde_json::json!(report.heldout_accuracy);
    let meta = serde_json::json!({ "router": router.config, "run": meta });
    Checkpoint::new(router.params.clone(), None, 0, meta)
        .save(path)
        .with_context(|| format!("writing {}", path.display()))
}
