use std::collections::HashMap;
use std::fs;
use std::path::Path;

use super::BackboneError;

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const BOS: u32 = 2;
pub const EOS: u32 = 3;
pub const IMAGE: u32 = 4;
pub const NUM_RESERVED: u32 = 5;

const RESERVED_NAMES: [&str; 5] = ["<pad>", "<unk>", "<bos>", "<eos>", "<image>"];

/// Word-level vocabulary over a closed word list. Ids `0..5` are reserved;
/// word `i` of the list gets id `5 + i`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    /// Builds a vocabulary from words in the given order. Duplicates and
    /// blank entries are rejected.
    pub fn new(words: Vec<String>) -> Result<Self, BackboneError> {
        let mut index = HashMap::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            if w.is_empty() || w.chars().any(char::is_whitespace) || RESERVED_NAMES.contains(&w.as_str()) {
                return Err(BackboneError::Vocabulary(format!("invalid word {w:?}")));
            }
            if index.insert(w.clone(), NUM_RESERVED + i as u32).is_some() {
                return Err(BackboneError::Vocabulary(format!("duplicate word {w:?}")));
            }
        }
        Ok(Self { words, index })
    }

    /// Sorted, de-duplicated vocabulary over whitespace-separated words.
    pub fn from_texts<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut words: Vec<String> = texts
            .into_iter()
            .flat_map(str::split_whitespace)
            .map(str::to_string)
            .collect();
        words.sort();
        words.dedup();
        Self::new(words).expect("deduplicated")
    }

    pub fn size(&self) -> usize {
        NUM_RESERVED as usize + self.words.len()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn id(&self, word: &str) -> u32 {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn word(&self, id: u32) -> &str {
        if id < NUM_RESERVED {
            RESERVED_NAMES[id as usize]
        } else {
            self.words.get((id - NUM_RESERVED) as usize).map_or("<unk>", String::as_str)
        }
    }

    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        text.split_whitespace().map(|w| self.id(w)).collect()
    }

    /// Joins words with single spaces; reserved ids other than UNK are dropped.
    pub fn detokenize(&self, ids: &[u32]) -> String {
        ids.iter()
            .filter(|&&id| id >= NUM_RESERVED || id == UNK)
            .map(|&id| self.word(id))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// One word per line.
    pub fn to_file_string(&self) -> String {
        let mut s = self.words.join("\n");
        s.push('\n');
        s
    }

    pub fn save(&self, path: &Path) -> Result<(), BackboneError> {
        fs::write(path, self.to_file_string()).map_err(|e| BackboneError::Io(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self, BackboneError> {
        let s = fs::read_to_string(path).map_err(|e| BackboneError::Io(format!("{}: {e}", path.display())))?;
        Self::new(s.lines().filter(|l| !l.is_empty()).map(str::to_string).collect())
    }
}
