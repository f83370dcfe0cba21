//! Command-line front end: corpus generation, phase-by-phase training into
//! a run directory, evaluation, expert tracing, parameter accounting and the
//! ablation matrix.
//!
//! Exit codes: 0 success, 2 configuration error, 3 missing prerequisite,
//! 4 numerical failure, 1 anything else.

pub mod ablate;
pub mod commands;
pub mod config;
pub mod run;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use medmoe::backbone::BackboneError;
use medmoe::moe::MoeError;
use medmoe::numkernel::KernelError;
use medmoe::pipeline::{PhaseId, PipelineError};
use medmoe::synthdata::SynthError;

use ablate::{cmd_ablate, AblationMatrix};
use commands::{cmd_count_params, cmd_eval, cmd_gen_data, cmd_trace, parse_split, render_count};
use config::RunConfig;
use run::{cmd_train, write_json};

#[derive(Debug, Parser)]
#[command(name = "medmoe", version, about = "Desk-scale sparse MoE vision-language training")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic corpus.
    GenData {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Per-split sizes, e.g. `align=64,instruct=64,tune=64,test=32`.
        #[arg(long, default_value = "")]
        sizes: String,
    },
    /// Run one training phase inside a run directory.
    Train {
        /// pretrain, align, instruct, router, moe or sft.
        #[arg(long)]
        phase: String,
        /// JSON run configuration; flags override its values.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Continue the phase from its partial checkpoint.
        #[arg(long)]
        resume: bool,
        /// Stop after this many optimizer steps in this invocation.
        #[arg(long)]
        stop_after: Option<u64>,
    },
    /// Score a checkpoint on one corpus split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, default_value_t = 12)]
        max_new_tokens: usize,
    },
    /// Count top-1 expert activations per layer and modality.
    Trace {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        samples: usize,
    },
    /// Print total and activated parameter counts.
    CountParams {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Also write the counts as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the ablation matrix.
    Ablate {
        #[arg(long)]
        matrix: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Existing run directory whose instruction-tuned checkpoint is reused.
        #[arg(long)]
        base: Option<PathBuf>,
    },
}

fn resolve_config(
    file: Option<&PathBuf>,
    data: Option<PathBuf>,
    out: Option<PathBuf>,
    seed: Option<u64>,
) -> anyhow::Result<RunConfig> {
    let mut cfg = match file {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if data.is_some() {
        cfg.data = data;
    }
    if out.is_some() {
        cfg.out = out;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenData { seed, out, sizes } => {
            let m = cmd_gen_data(seed, &out, &sizes)?;
            println!("wrote {} records to {}", m.sizes.align + m.sizes.instruct + m.sizes.tune + m.sizes.test, out.display());
        }
        Command::Train {
            phase,
            config,
            data,
            out,
            seed,
            resume,
            stop_after,
        } => {
            let phase: PhaseId = phase.parse()?;
            let cfg = resolve_config(config.as_ref(), data, out, seed)?;
            let o = cmd_train(&cfg, phase, resume, stop_after)?;
            println!(
                "{phase}: {} steps{}, last loss {}",
                o.steps,
                if o.completed { "" } else { " (partial)" },
                o.last_loss.map_or("-".into(), |l| format!("{l:.5}"))
            );
        }
        Command::Eval {
            checkpoint,
            data,
            out,
            split,
            max_new_tokens,
        } => {
            let r = cmd_eval(&checkpoint, &data, &out, parse_split(&split)?, max_new_tokens)?;
            print!("{}", r.to_json());
        }
        Command::Trace {
            checkpoint,
            data,
            out,
            samples,
        } => {
            let t = cmd_trace(&checkpoint, &data, &out, samples)?;
            println!("traced {} routed tokens into {}", t.routed.values().sum::<u64>(), out.join("trace.csv").display());
        }
        Command::CountParams { checkpoint, out } => {
            let r = cmd_count_params(&checkpoint, out.as_deref())?;
            print!("{}", render_count(&r));
        }
        Command::Ablate {
            matrix,
            out,
            data,
            config,
            base,
        } => {
            let cfg = resolve_config(config.as_ref(), data, Some(out.clone()), None)?;
            let m = AblationMatrix::load(&matrix)?;
            std::fs::create_dir_all(&out)?;
            write_json(&out.join("config.json"), &cfg)?;
            let rows = cmd_ablate(&m, &cfg, base.as_deref())?;
            println!("{} cells, {} rows in {}", m.cells.len(), rows.len(), out.join("ablation.csv").display());
        }
    }
    Ok(())
}

fn code_for_kernel(e: &KernelError) -> Option<i32> {
    matches!(e, KernelError::NonFinite { .. }).then_some(4)
}

fn code_for_backbone(e: &BackboneError) -> Option<i32> {
    match e {
        BackboneError::Config(_) | BackboneError::Vocabulary(_) => Some(2),
        BackboneError::Kernel(k) => code_for_kernel(k),
        _ => None,
    }
}

fn code_for_moe(e: &MoeError) -> Option<i32> {
    match e {
        MoeError::Config(_)
        | MoeError::TopK { .. }
        | MoeError::RouterMismatch { .. }
        | MoeError::Rank { .. }
        | MoeError::NoTargets(_)
        | MoeError::Dimension(_)
        | MoeError::NotMoe => Some(2),
        MoeError::Backbone(b) => code_for_backbone(b),
        MoeError::Kernel(k) => code_for_kernel(k),
        _ => None,
    }
}

fn code_for_synth(e: &SynthError) -> Option<i32> {
    match e {
        SynthError::Config(_) | SynthError::UnsatisfiableBalance { .. } | SynthError::VocabularyOverflow { .. } => Some(2),
        _ => None,
    }
}

fn code_for_pipeline(e: &PipelineError) -> Option<i32> {
    match e {
        PipelineError::Config(_)
        | PipelineError::TrainableOutsideProjector(_)
        | PipelineError::VisionNotFrozen(_)
        | PipelineError::RouterNotFrozen(_) => Some(2),
        PipelineError::Prerequisite(_) => Some(3),
        PipelineError::NonFinite { .. } => Some(4),
        PipelineError::Backbone(b) => code_for_backbone(b),
        PipelineError::Moe(m) => code_for_moe(m),
        PipelineError::Kernel(k) => code_for_kernel(k),
        PipelineError::Synth(s) => code_for_synth(s),
        _ => None,
    }
}

/// Process exit code for a failed command.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        let code = if let Some(e) = cause.downcast_ref::<PipelineError>() {
            code_for_pipeline(e)
        } else if let Some(e) = cause.downcast_ref::<MoeError>() {
            code_for_moe(e)
        } else if let Some(e) = cause.downcast_ref::<BackboneError>() {
            code_for_backbone(e)
        } else if let Some(e) = cause.downcast_ref::<SynthError>() {
            code_for_synth(e)
        } else if let Some(e) = cause.downcast_ref::<KernelError>() {
            code_for_kernel(e)
        } else {
            None
        };
        if let Some(c) = code {
            return c;
        }
    }
    1
}
