use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{Vocabulary, NUM_RESERVED};
use crate::numkernel::SplitMix64;

use super::attributes::{derive_attributes, render, Attributes};
use super::record::{load_records, write_records, Record, Split};
use super::templates::{caption, vocabulary_words, Question, TaskKind, ALIGN_INSTRUCTION};
use super::{Modality, SynthError};

pub const FORMAT_VERSION: &str = "medmoe-synth/1";
pub const MAX_VOCAB: usize = 512;

/// Records per split.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusSizes {
    pub align: usize,
    pub instruct: usize,
    pub tune: usize,
    pub test: usize,
}

impl Default for CorpusSizes {
    fn default() -> Self {
        Self {
            align: 64,
            instruct: 64,
            tune: 64,
            test: 32,
        }
    }
}

impl CorpusSizes {
    pub fn get(&self, s: Split) -> usize {
        match s {
            Split::Align => self.align,
            Split::Instruct => self.instruct,
            Split::Tune => self.tune,
            Split::Test => self.test,
        }
    }

    fn set(&mut self, s: Split, n: usize) {
        match s {
            Split::Align => self.align = n,
            Split::Instruct => self.instruct = n,
            Split::Tune => self.tune = n,
            Split::Test => self.test = n,
        }
    }
}

/// `align=64,test=32`; unnamed splits keep their defaults.
impl FromStr for CorpusSizes {
    type Err = SynthError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut out = Self::default();
        for part in s.split(',').filter(|p| !p.trim().is_empty()) {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| SynthError::Config(format!("expected split=count, got `{part}`")))?;
            let split = Split::parse(k.trim()).ok_or_else(|| SynthError::Config(format!("unknown split `{k}`")))?;
            let n = v
                .trim()
                .parse()
                .map_err(|_| SynthError::Config(format!("bad count `{v}`")))?;
            out.set(split, n);
        }
        Ok(out)
    }
}

/// Counts `split -> modality -> task -> n`.
pub type CountTable = BTreeMap<String, BTreeMap<String, BTreeMap<String, usize>>>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: String,
    pub seed: u64,
    pub sizes: CorpusSizes,
    pub counts: CountTable,
    pub vocabulary_size: usize,
    pub vocabulary_sha256: String,
}

impl DatasetManifest {
    pub fn count(&self, split: Split, modality: Modality) -> usize {
        self.counts
            .get(split.as_str())
            .and_then(|m| m.get(modality.label()))
            .map_or(0, |t| t.values().sum())
    }

    pub fn split_total(&self, split: Split) -> usize {
        Modality::ALL.iter().map(|&m| self.count(split, m)).sum()
    }
}

/// A generated corpus held in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub records: Vec<Record>,
    pub vocab: Vocabulary,
    pub manifest: DatasetManifest,
}

impl Corpus {
    pub fn split(&self, s: Split) -> Vec<Record> {
        self.records.iter().filter(|r| r.split == s).cloned().collect()
    }
}

pub fn build_vocabulary() -> Result<Vocabulary, SynthError> {
    let words = vocabulary_words();
    if words.len() + NUM_RESERVED as usize > MAX_VOCAB {
        return Err(SynthError::VocabularyOverflow {
            size: words.len() + NUM_RESERVED as usize,
            max: MAX_VOCAB,
        });
    }
    Ok(Vocabulary::new(words)?)
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Attribute tuples per modality, split into disjoint tune (3/4) and test
/// (1/4) pools. Alignment and instruction records draw from every tuple.
fn tuple_pools(root: &SplitMix64) -> BTreeMap<(Modality, Split), Vec<Attributes>> {
    let mut pools = BTreeMap::new();
    let all = Attributes::all();
    for m in Modality::ALL {
        let mut mine: Vec<Attributes> = all.iter().copied().filter(|a| a.modality == m).collect();
        pools.insert((m, Split::Align), mine.clone());
        pools.insert((m, Split::Instruct), mine.clone());
        root.fork_str("pools").fork(m.index() as u64).shuffle(&mut mine);
        let cut = mine.len() * 3 / 4;
        let mut tune = mine[..cut].to_vec();
        let mut test = mine[cut..].to_vec();
        tune.sort();
        test.sort();
        pools.insert((m, Split::Tune), tune);
        pools.insert((m, Split::Test), test);
    }
    pools
}

fn make_record(split: Split, i: usize, pools: &BTreeMap<(Modality, Split), Vec<Attributes>>, root: &SplitMix64) -> Result<Record, SynthError> {
    let mut rng = root.fork_str(split.as_str()).fork(i as u64);
    let modality = Modality::ALL[i % 4];
    let pool = &pools[&(modality, split)];
    let attrs = pool[rng.below(pool.len())];
    let image = render(&attrs, &mut rng);
    let (instruction, response, task) = if split == Split::Align {
        (ALIGN_INSTRUCTION.to_string(), caption(&attrs), TaskKind::Open)
    } else {
        let kind = TaskKind::ALL[(i / 4) % 3];
        let q = Question::sample(kind, &attrs, &mut rng);
        (q.render(), q.answer(&attrs), kind)
    };
    let rec = Record {
        id: format!("{}-{i}", split.as_str()),
        image,
        caption: caption(&attrs),
        instruction,
        response,
        task,
        modality,
        split,
    };
    verify_record(&rec)?;
    Ok(rec)
}

/// Re-derives the caption and answer from the pixels and compares them to
/// the stored text.
pub fn verify_record(r: &Record) -> Result<(), SynthError> {
    let a = derive_attributes(&r.image)?;
    let mismatch = |what: &str| SynthError::Oracle(format!("{}: stored {what} disagrees with the image", r.id));
    if a.modality != r.modality {
        return Err(mismatch("modality"));
    }
    if caption(&a) != r.caption {
        return Err(mismatch("caption"));
    }
    let expected = if r.instruction == ALIGN_INSTRUCTION {
        caption(&a)
    } else {
        let q = Question::parse(&r.instruction)?;
        if q.kind() != r.task {
            return Err(mismatch("task kind"));
        }
        q.answer(&a)
    };
    if expected != r.response {
        return Err(mismatch("response"));
    }
    Ok(())
}

pub fn generate_corpus(seed: u64, sizes: CorpusSizes) -> Result<Corpus, SynthError> {
    for s in Split::ALL {
        let n = sizes.get(s);
        if n > 0 && n < Modality::ALL.len() {
            return Err(SynthError::UnsatisfiableBalance {
                split: s.as_str().into(),
                size: n,
            });
        }
    }
    let vocab = build_vocabulary()?;
    let root = SplitMix64::new(seed);
    let pools = tuple_pools(&root);
    let mut records = Vec::new();
    let mut counts: CountTable = BTreeMap::new();
    for s in Split::ALL {
        for i in 0..sizes.get(s) {
            let r = make_record(s, i, &pools, &root)?;
            *counts
                .entry(s.as_str().into())
                .or_default()
                .entry(r.modality.label().into())
                .or_default()
                .entry(r.task.as_str().into())
                .or_default() += 1;
            records.push(r);
        }
    }
    let manifest = DatasetManifest {
        format_version: FORMAT_VERSION.into(),
        seed,
        sizes,
        counts,
        vocabulary_size: vocab.size(),
        vocabulary_sha256: sha256_hex(vocab.to_file_string().as_bytes()),
    };
    Ok(Corpus {
        records,
        vocab,
        manifest,
    })
}

pub fn write_corpus(corpus: &Corpus, dir: &Path) -> Result<(), SynthError> {
    fs::create_dir_all(dir).map_err(|e| SynthError::Io(format!("{}: {e}", dir.display())))?;
    for s in Split::ALL {
        write_records(&corpus.split(s), &dir.join(s.file_name()))?;
    }
    corpus.vocab.save(&dir.join("vocab.txt"))?;
    let m = serde_json::to_string_pretty(&corpus.manifest).expect("manifest serializes");
    fs::write(dir.join("manifest.json"), m + "\n").map_err(|e| SynthError::Io(e.to_string()))?;
    Ok(())
}

pub fn load_corpus(dir: &Path) -> Result<Corpus, SynthError> {
    let text = fs::read_to_string(dir.join("manifest.json"))
        .map_err(|e| SynthError::Io(format!("{}: {e}", dir.join("manifest.json").display())))?;
    let manifest: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| SynthError::Config(format!("manifest: {e}")))?;
    let vocab = Vocabulary::load(&dir.join("vocab.txt"))?;
    let mut records = Vec::new();
    for s in Split::ALL {
        let p = dir.join(s.file_name());
        if p.exists() {
            records.extend(load_records(&p)?);
        }
    }
    Ok(Corpus {
        records,
        vocab,
        manifest,
    })
}
