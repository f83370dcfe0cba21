//! Data generation, evaluation, tracing and parameter accounting.

use std::fs;
use std::path::Path;

use anyhow::Context;
use serde::Serialize;

use medmoe::backbone::Sequence;
use medmoe::eval::{evaluate, MetricReport};
use medmoe::moe::{trace_activations, ActivationTrace};
use medmoe::pipeline::{count_parameters, published_comparison, ArchitectureRow, ParamCount, PipelineError};
use medmoe::synthdata::{generate_corpus, load_corpus, write_corpus, CorpusSizes, DatasetManifest, Modality, Split};

use crate::run::{load_model, write_json};

pub fn cmd_gen_data(seed: u64, out: &Path, sizes: &str) -> anyhow::Result<DatasetManifest> {
    let sizes: CorpusSizes = sizes.parse()?;
    let corpus = generate_corpus(seed, sizes)?;
    write_corpus(&corpus, out).with_context(|| format!("writing corpus to {}", out.display()))?;
    Ok(corpus.manifest)
}

pub fn parse_split(s: &str) -> Result<Split, PipelineError> {
    Split::parse(s).ok_or_else(|| PipelineError::Config(format!("unknown split `{s}`")))
}

/// Greedy-decodes every record of `split` and writes `report.json` and
/// `report.csv` into `out`.
pub fn cmd_eval(checkpoint: &Path, data: &Path, out: &Path, split: Split, max_new: usize) -> anyhow::Result<MetricReport> {
    let model = load_model(checkpoint)?;
    let corpus = load_corpus(data).context("loading corpus")?;
    let report = evaluate(&model, &corpus.split(split), &corpus.vocab, model.num_image_tokens(), max_new)?;
    fs::create_dir_all(out)?;
    fs::write(out.join("report.json"), report.to_json())?;
    fs::write(out.join("report.csv"), report.to_csv()?)?;
    Ok(report)
}

/// Top-1 expert counts over the first `samples` records of the corpus,
/// taken from the test, tune, instruction and alignment splits in turn.
pub fn cmd_trace(checkpoint: &Path, data: &Path, out: &Path, samples: usize) -> anyhow::Result<ActivationTrace> {
    let model = load_model(checkpoint)?;
    if model.moe.is_none() {
        return Err(PipelineError::Config(format!("{} is not a MoE checkpoint", checkpoint.display())).into());
    }
    let corpus = load_corpus(data).context("loading corpus")?;
    let n = model.num_image_tokens();
    let seqs: Vec<Sequence> = [Split::Test, Split::Tune, Split::Instruct, Split::Align]
        .into_iter()
        .flat_map(|s| corpus.split(s))
        .take(samples)
        .map(|r| r.instruct_sequence(&corpus.vocab, n))
        .collect();
    let names: Vec<String> = Modality::ALL.iter().map(|m| m.label().to_string()).collect();
    let trace = trace_activations(&model, &seqs, &names)?;
    fs::create_dir_all(out)?;
    fs::write(out.join("trace.csv"), trace.to_csv()?)?;
    Ok(trace)
}

#[derive(Clone, Debug, Serialize)]
pub struct CountReport {
    pub count: ParamCount,
    /// Published architecture figures and what our counting convention
    /// yields for the same shapes. They disagree; both are reported.
    pub published_comparison: Vec<ArchitectureRow>,
}

pub fn cmd_count_params(checkpoint: &Path, out: Option<&Path>) -> anyhow::Result<CountReport> {
    let model = load_model(checkpoint)?;
    let report = CountReport {
        count: count_parameters(&model),
        published_comparison: published_comparison(),
    };
    if let Some(path) = out {
        write_json(path, &report)?;
    }
    Ok(report)
}

pub fn render_count(r: &CountReport) -> String {
    let c = &r.count;
    let mut s = format!("total parameters:     {}\nactivated parameters: {}\n", c.total, c.activated);
    for (module, n) in &c.breakdown {
        s += &format!("  {module:<10} {n}\n");
    }
    if c.moe_layers > 0 {
        s += &format!(
            "{} MoE layers, {} experts of {} parameters, top-{}\n",
            c.moe_layers, c.num_experts, c.per_expert, c.top_k
        );
    }
    s += "published architecture figures vs this counting convention:\n";
    for a in &r.published_comparison {
        s += &format!(
            "  {:<18} listed {:.1}B activated / {:.1}B total; computed {:.2}B / {:.2}B\n",
            a.name,
            a.listed_activated / 1e9,
            a.listed_total / 1e9,
            a.computed_activated / 1e9,
            a.computed_total / 1e9
        );
    }
    s
}
