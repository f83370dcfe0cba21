use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::backbone::{greedy_generate, BackboneError, Decoder, Vocabulary};
use crate::synthdata::{Modality, Record, TaskKind};

use super::metrics::{bleu, classification_correct, closed_correct, exact_match, recall};
use super::EvalError;

/// One metric value for one record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRow {
    pub id: String,
    pub task: String,
    pub modality: String,
    pub prediction: String,
    pub reference: String,
    pub metric: String,
    pub value: f64,
}

/// Per-sample metric rows and their means per task kind.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// `task -> metric -> mean`.
    pub aggregates: BTreeMap<String, BTreeMap<String, f64>>,
    /// `task -> records scored`.
    pub counts: BTreeMap<String, usize>,
    pub skipped: usize,
    pub rows: Vec<SampleRow>,
}

impl MetricReport {
    pub fn from_rows(rows: Vec<SampleRow>, skipped: usize) -> Self {
        let mut sums: BTreeMap<String, BTreeMap<String, (f64, usize)>> = BTreeMap::new();
        let mut ids: BTreeMap<String, std::collections::BTreeSet<String>> = BTreeMap::new();
        for r in &rows {
            let e = sums.entry(r.task.clone()).or_default().entry(r.metric.clone()).or_insert((0.0, 0));
            e.0 += r.value;
            e.1 += 1;
            ids.entry(r.task.clone()).or_default().insert(r.id.clone());
        }
        let aggregates = sums
            .into_iter()
            .map(|(t, m)| (t, m.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()))
            .collect();
        let counts = ids.into_iter().map(|(t, s)| (t, s.len())).collect();
        Self {
            aggregates,
            counts,
            skipped,
            rows,
        }
    }

    pub fn get(&self, task: TaskKind, metric: &str) -> Option<f64> {
        self.aggregates.get(task.as_str())?.get(metric).copied()
    }

    /// Mean of `metric` over rows of `task` whose modality is listed.
    pub fn mean_where(&self, task: TaskKind, metric: &str, modalities: &[Modality]) -> Option<f64> {
        let vals: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.task == task.as_str() && r.metric == metric)
            .filter(|r| modalities.iter().any(|m| m.label() == r.modality))
            .map(|r| r.value)
            .collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    pub fn to_json(&self) -> String {
        let summary = serde_json::json!({
            "aggregates": self.aggregates,
            "counts": self.counts,
            "skipped": self.skipped,
        });
        serde_json::to_string_pretty(&summary).expect("report serializes") + "\n"
    }

    /// Columns `id,task,modality,prediction,reference,metric,value`.
    pub fn to_csv(&self) -> Result<String, EvalError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r).map_err(|e| EvalError::Io(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| EvalError::Io(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("utf-8"))
    }
}

/// Metric rows for one prediction.
pub fn score(record: &Record, prediction: &str) -> Result<Vec<(&'static str, f64)>, EvalError> {
    let reference = record.response.as_str();
    Ok(match record.task {
        TaskKind::Open => vec![
            ("recall", recall(prediction, reference)?),
            ("ems", exact_match(prediction, reference)),
            ("bleu", bleu(prediction, reference, 4)),
        ],
        TaskKind::Closed => vec![("accuracy", f64::from(u8::from(closed_correct(prediction, reference)?)))],
        TaskKind::Classification => vec![(
            "accuracy",
            f64::from(u8::from(classification_correct(prediction, reference))),
        )],
    })
}

/// Greedy-decodes an answer for every record and scores it. Records whose
/// prompt does not fit the context are skipped and counted.
pub fn evaluate<D: Decoder + ?Sized>(
    decoder: &D,
    records: &[Record],
    vocab: &Vocabulary,
    n_image: usize,
    max_new: usize,
) -> Result<MetricReport, EvalError> {
    let mut rows = Vec::new();
    let mut skipped = 0;
    for r in records {
        let prompt = r.instruct_sequence(vocab, n_image).prompt();
        let ids = match greedy_generate(decoder, &prompt, max_new) {
            Ok(ids) => ids,
            Err(BackboneError::ContextOverflow { .. }) => {
                skipped += 1;
                continue;
            }
            Err(e) => return Err(e.into()),
        };
        let prediction = vocab.detokenize(&ids);
        for (metric, value) in score(r, &prediction)? {
            rows.push(SampleRow {
                id: r.id.clone(),
                task: r.task.as_str().into(),
                modality: r.modality.label().into(),
                prediction: prediction.clone(),
                reference: r.response.clone(),
                metric: metric.into(),
                value,
            });
        }
    }
    Ok(MetricReport::from_rows(rows, skipped))
}
