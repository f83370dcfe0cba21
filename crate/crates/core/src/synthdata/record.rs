use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::{Sequence, SyntheticImage, Vocabulary};

use super::{Modality, SynthError, TaskKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Align,
    Instruct,
    Tune,
    Test,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Align, Split::Instruct, Split::Tune, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Align => "align",
            Split::Instruct => "instruct",
            Split::Tune => "tune",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|x| x.as_str() == s)
    }

    pub fn file_name(self) -> String {
        format!("{}.jsonl", self.as_str())
    }
}

/// One image with its caption and one question/answer pair.
#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub id: String,
    pub image: SyntheticImage,
    pub caption: String,
    pub instruction: String,
    pub response: String,
    pub task: TaskKind,
    pub modality: Modality,
    pub split: Split,
}

#[derive(Serialize, Deserialize)]
struct RawRecord {
    #[serde(default)]
    id: String,
    image: SyntheticImage,
    caption: String,
    instruction: String,
    response: String,
    task: String,
    modality: String,
    split: String,
}

impl Record {
    fn to_raw(&self) -> RawRecord {
        RawRecord {
            id: self.id.clone(),
            image: self.image.clone(),
            caption: self.caption.clone(),
            instruction: self.instruction.clone(),
            response: self.response.clone(),
            task: self.task.as_str().into(),
            modality: self.modality.label().into(),
            split: self.split.as_str().into(),
        }
    }

    fn from_raw(raw: RawRecord, line: usize) -> Result<Self, SynthError> {
        let task = TaskKind::parse(&raw.task).ok_or_else(|| SynthError::UnknownTask {
            line,
            value: raw.task.clone(),
        })?;
        let modality = Modality::from_label(&raw.modality).ok_or_else(|| SynthError::Malformed {
            line,
            message: format!("unknown modality `{}`", raw.modality),
        })?;
        let split = Split::parse(&raw.split).ok_or_else(|| SynthError::Malformed {
            line,
            message: format!("unknown split `{}`", raw.split),
        })?;
        Ok(Record {
            id: raw.id,
            image: raw.image,
            caption: raw.caption,
            instruction: raw.instruction,
            response: raw.response,
            task,
            modality,
            split,
        })
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(&self.to_raw()).expect("record serializes")
    }

    /// Image slots, then the caption as the supervised continuation.
    pub fn caption_sequence(&self, vocab: &Vocabulary, n_image: usize) -> Sequence {
        Sequence::build(
            Some(self.image.clone()),
            n_image,
            &[],
            &vocab.tokenize(&self.caption),
            Some(self.modality.index()),
        )
    }

    /// Image slots and the instruction as prefix, the response supervised.
    pub fn instruct_sequence(&self, vocab: &Vocabulary, n_image: usize) -> Sequence {
        Sequence::build(
            Some(self.image.clone()),
            n_image,
            &vocab.tokenize(&self.instruction),
            &vocab.tokenize(&self.response),
            Some(self.modality.index()),
        )
    }
}

pub fn write_records(records: &[Record], path: &Path) -> Result<(), SynthError> {
    let mut f = fs::File::create(path).map_err(|e| SynthError::Io(format!("{}: {e}", path.display())))?;
    for r in records {
        writeln!(f, "{}", r.to_json_line()).map_err(|e| SynthError::Io(e.to_string()))?;
    }
    Ok(())
}

/// Parses JSONL; blank lines are skipped and errors name the 1-based line.
pub fn parse_records(text: &str) -> Result<Vec<Record>, SynthError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRecord = serde_json::from_str(line).map_err(|e| SynthError::Malformed {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(Record::from_raw(raw, i + 1)?);
    }
    Ok(out)
}

pub fn load_records(path: &Path) -> Result<Vec<Record>, SynthError> {
    let text = fs::read_to_string(path).map_err(|e| SynthError::Io(format!("{}: {e}", path.display())))?;
    parse_records(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Record {
        Record {
            id: "tune-0".into(),
            image: SyntheticImage::new(2, 2, vec![0.0, 0.25, 0.5, 1.0]).unwrap(),
            caption: "ct image of the brain".into(),
            instruction: "are there two lesions ?".into(),
            response: "no".into(),
            task: TaskKind::Closed,
            modality: Modality::Ct,
            split: Split::Tune,
        }
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.jsonl");
        let recs = vec![sample(), Record { id: "x".into(), ..sample() }];
        write_records(&recs, &p).unwrap();
        assert_eq!(load_records(&p).unwrap(), recs);
    }

    #[test]
    fn corrupt_line_is_named() {
        let good = sample().to_json_line();
        let text = format!("{good}\n{{not json\n{good}\n");
        match parse_records(&text) {
            Err(SynthError::Malformed { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_task_is_reported() {
        let line = sample().to_json_line().replace("\"closed\"", "\"essay\"");
        assert!(matches!(parse_records(&line), Err(SynthError::UnknownTask { line: 1, .. })));
    }

    #[test]
    fn empty_file_is_empty_list() {
        assert!(parse_records("").unwrap().is_empty());
    }

    #[test]
    fn schema_field_names() {
        let v: serde_json::Value = serde_json::from_str(&sample().to_json_line()).unwrap();
        for k in ["image", "caption", "instruction", "response", "task", "modality", "split"] {
            assert!(v.get(k).is_some(), "{k}");
        }
        assert_eq!(v["image"][1][1], 1.0);
    }
}
