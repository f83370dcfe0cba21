//! One-factor ablation harness over meta expert, router mode, top-k,
//! expert count and MoE-vs-dense tuning.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};

use medmoe::eval::MetricReport;
use medmoe::moe::RouterMode;
use medmoe::pipeline::{PhaseId, PipelineError, RunManifest};

use crate::commands::{cmd_eval, parse_split};
use crate::config::{PhaseOverride, RunConfig};
use crate::run::{cmd_train, phase_dir, write_json, CHECKPOINT_FILE};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tuning {
    Moe,
    Sft,
}

fn yes() -> bool {
    true
}
fn two() -> usize {
    2
}
fn four() -> usize {
    4
}
fn frozen() -> RouterMode {
    RouterMode::Frozen
}
fn moe() -> Tuning {
    Tuning::Moe
}
fn test_split() -> String {
    "test".into()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellSpec {
    #[serde(default)]
    pub name: Option<String>,
    #[serde(default = "yes")]
    pub meta: bool,
    #[serde(default = "frozen")]
    pub router: RouterMode,
    #[serde(default = "two")]
    pub k: usize,
    #[serde(default = "four")]
    pub e: usize,
    #[serde(default = "moe")]
    pub tuning: Tuning,
}

impl CellSpec {
    pub fn label(&self) -> String {
        self.name.clone().unwrap_or_else(|| self.to_string())
    }

    fn validate(&self) -> Result<(), PipelineError> {
        let name = self.label();
        if name.is_empty() || name.contains(['/', '\\']) || name.starts_with('.') {
            return Err(PipelineError::Config(format!("invalid cell name `{name}`")));
        }
        if self.e < 2 {
            return Err(PipelineError::Config(format!("cell `{name}`: need at least 2 experts")));
        }
        if self.k == 0 || self.k > self.e {
            return Err(PipelineError::Config(format!("cell `{name}`: top-k {} outside 1..={}", self.k, self.e)));
        }
        Ok(())
    }

    /// Dimensions in which `self` differs from `base`.
    fn differs_from(&self, base: &CellSpec) -> Vec<&'static str> {
        let mut d = Vec::new();
        if self.meta != base.meta {
            d.push("meta");
        }
        if self.router != base.router {
            d.push("router");
        }
        if self.k != base.k {
            d.push("top_k");
        }
        if self.e != base.e {
            d.push("experts");
        }
        if self.tuning != base.tuning {
            d.push("tuning");
        }
        d
    }
}

impl fmt::Display for CellSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let router = match self.router {
            RouterMode::Frozen => "frozen",
            RouterMode::Learned => "learned",
        };
        let tuning = match self.tuning {
            Tuning::Moe => "moe",
            Tuning::Sft => "sft",
        };
        write!(
            f,
            "meta-{}_router-{router}_k{}_e{}_{tuning}",
            if self.meta { "on" } else { "off" },
            self.k,
            self.e
        )
    }
}

/// Matrix file: the cells to run (the first is the baseline), overrides for
/// the tuning phase, and the split to evaluate on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationMatrix {
    pub cells: Vec<CellSpec>,
    #[serde(default)]
    pub tuning: PhaseOverride,
    #[serde(default = "test_split")]
    pub eval_split: String,
}

impl AblationMatrix {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let m: Self =
            serde_json::from_str(&text).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.cells.is_empty() {
            return Err(PipelineError::Config("ablation matrix has no cells".into()));
        }
        let mut names = BTreeSet::new();
        for c in &self.cells {
            c.validate()?;
            if !names.insert(c.label()) {
                return Err(PipelineError::Config(format!("duplicate cell `{}`", c.label())));
            }
        }
        parse_split(&self.eval_split)?;
        Ok(())
    }
}

/// One row of the consolidated table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    /// Factor varied relative to the baseline cell.
    pub table: String,
    pub method: String,
    pub setting: String,
    pub metric: String,
    pub value: f64,
    pub delta: f64,
}

fn cell_config(base: &RunConfig, cell: &CellSpec, tuning: &PhaseOverride, dir: PathBuf) -> RunConfig {
    let mut c = base.clone();
    c.out = Some(dir);
    c.moe.meta_expert = cell.meta;
    c.moe.router_mode = cell.router;
    c.moe.top_k = cell.k;
    c.moe.num_experts = cell.e;
    let phase = match cell.tuning {
        Tuning::Moe => PhaseId::Moe,
        Tuning::Sft => PhaseId::Sft,
    };
    c.phases.insert(phase, tuning.clone());
    c
}

/// Runs every cell from a shared instruction-tuned checkpoint (trained
/// first into `<out>/base` unless `base_run` points at an existing run) and
/// writes per-cell manifests and reports plus `ablation.csv`.
pub fn cmd_ablate(
    matrix: &AblationMatrix,
    cfg: &RunConfig,
    base_run: Option<&Path>,
) -> anyhow::Result<Vec<AblationRow>> {
    matrix.validate()?;
    let out = cfg.out_dir()?.to_path_buf();
    let data = cfg.data_dir()?.to_path_buf();
    let split = parse_split(&matrix.eval_split)?;
    let base_dir = match base_run {
        Some(p) => p.to_path_buf(),
        None => {
            let mut bc = cfg.clone();
            bc.out = Some(out.join("base"));
            for phase in [PhaseId::Pretrain, PhaseId::Align, PhaseId::Instruct] {
                cmd_train(&bc, phase, false, None)?;
            }
            out.join("base")
        }
    };
    let instructed = phase_dir(&base_dir, PhaseId::Instruct).join(CHECKPOINT_FILE);
    if !instructed.exists() {
        return Err(PipelineError::Prerequisite(format!("no instruction-tuned checkpoint at {}", instructed.display())).into());
    }

    let mut reports: Vec<(CellSpec, MetricReport)> = Vec::new();
    for cell in &matrix.cells {
        let name = cell.label();
        let dir = out.join("cells").join(&name);
        let cc = cell_config(cfg, cell, &matrix.tuning, dir.clone());
        let local = phase_dir(&dir, PhaseId::Instruct);
        fs::create_dir_all(&local)?;
        fs::copy(&instructed, local.join(CHECKPOINT_FILE)).context("copying base checkpoint")?;
        let tuned = match cell.tuning {
            Tuning::Moe => {
                if cell.router == RouterMode::Frozen {
                    cmd_train(&cc, PhaseId::Router, false, None)?;
                }
                cmd_train(&cc, PhaseId::Moe, false, None)?
            }
            Tuning::Sft => cmd_train(&cc, PhaseId::Sft, false, None)?,
        };
        let report = cmd_eval(
            &tuned.dir.join(CHECKPOINT_FILE),
            &data,
            &dir,
            split,
            cfg.eval.max_new_tokens,
        )?;
        let mut hashed = cc.clone();
        hashed.data = None;
        hashed.out = None;
        let manifest = RunManifest::new(
            "ablation",
            serde_json::json!({ "cell": cell, "run": hashed }),
            cfg.seed,
            serde_json::to_value(&report.aggregates)?,
        );
        write_json(&dir.join("manifest.json"), &manifest)?;
        log::info!("ablation cell {name} done");
        reports.push((cell.clone(), report));
    }

    let (base_cell, base_report) = &reports[0];
    let mut rows = Vec::new();
    for (cell, report) in &reports {
        let diff = cell.differs_from(base_cell);
        let table = match diff.len() {
            0 => "baseline".to_string(),
            _ => diff.join("+"),
        };
        for (task, metrics) in &report.aggregates {
            for (metric, &value) in metrics {
                let base = base_report
                    .aggregates
                    .get(task)
                    .and_then(|m| m.get(metric))
                    .copied()
                    .unwrap_or(f64::NAN);
                rows.push(AblationRow {
                    table: table.clone(),
                    method: cell.label(),
                    setting: task.clone(),
                    metric: metric.clone(),
                    value,
                    delta: value - base,
                });
            }
        }
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in &rows {
        w.serialize(r)?;
    }
    fs::write(out.join("ablation.csv"), w.into_inner()?)?;
    Ok(rows)
}
