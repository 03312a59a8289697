//! Character and word output alphabets.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const BLANK: &str = "<blank>";
pub const UNK: &str = "<unk>";
const SPACE: &str = "<space>";

/// Symbols of the character alphabet besides the letters and blank. `*` marks
/// noise or an otherwise unknown character.
const CHAR_EXTRAS: [char; 5] = [' ', '\'', '-', '.', '*'];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlphabetKind {
    Char,
    Word,
}

fn normalize_token(token: &str) -> String {
    if token == UNK || token == BLANK {
        token.to_string()
    } else {
        token.to_uppercase()
    }
}

/// Uppercases and collapses whitespace runs to single spaces. The reserved
/// `<unk>` and `<blank>` markers pass through unchanged.
pub fn normalize_transcript(text: &str) -> String {
    tokenize_words(text).join(" ")
}

pub fn tokenize_words(text: &str) -> Vec<String> {
    text.split_whitespace().map(normalize_token).collect()
}

/// Encoded transcript. Never contains the blank index.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct LabelSequence(pub Vec<usize>);

impl std::ops::Deref for LabelSequence {
    type Target = [usize];
    fn deref(&self) -> &[usize] {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Alphabet {
    units: Vec<String>,
    index: HashMap<String, usize>,
    blank: usize,
    unk: Option<usize>,
}

impl Alphabet {
    fn from_units(units: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(units.len());
        for (i, u) in units.iter().enumerate() {
            if index.insert(u.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate alphabet unit {u:?}")));
            }
        }
        let blank = *index
            .get(BLANK)
            .ok_or_else(|| Error::Config("alphabet has no blank".into()))?;
        let unk = index.get(UNK).copied();
        Ok(Self {
            units,
            index,
            blank,
            unk,
        })
    }

    pub fn kind(&self) -> AlphabetKind {
        if self.unk.is_some() {
            AlphabetKind::Word
        } else {
            AlphabetKind::Char
        }
    }

    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    pub fn blank_index(&self) -> usize {
        self.blank
    }

    pub fn unk_index(&self) -> Option<usize> {
        self.unk
    }

    pub fn units(&self) -> &[String] {
        &self.units
    }

    pub fn unit(&self, idx: usize) -> &str {
        &self.units[idx]
    }

    pub fn index_of(&self, unit: &str) -> Option<usize> {
        self.index.get(unit).copied()
    }

    pub fn space_index(&self) -> Option<usize> {
        self.index_of(" ")
    }

    pub fn encode(&self, text: &str) -> Result<LabelSequence> {
        match self.kind() {
            AlphabetKind::Char => {
                let norm = normalize_transcript(text);
                norm.chars()
                    .map(|c| {
                        let mut buf = [0u8; 4];
                        self.index_of(c.encode_utf8(&mut buf)).ok_or(Error::UnknownSymbol {
                            symbol: c.to_string(),
                        })
                    })
                    .collect::<Result<Vec<_>>>()
                    .map(LabelSequence)
            }
            AlphabetKind::Word => {
                let unk = self.unk.expect("word alphabet has unk");
                Ok(LabelSequence(
                    tokenize_words(text)
                        .iter()
                        .map(|w| match self.index.get(w.as_str()) {
                            Some(&i) if i != self.blank => i,
                            _ => unk,
                        })
                        .collect(),
                ))
            }
        }
    }

    /// Text for a blank-free index sequence. Blanks decode to nothing.
    pub fn decode(&self, indices: &[usize]) -> String {
        let parts = indices
            .iter()
            .filter(|&&i| i != self.blank)
            .map(|&i| self.units[i].as_str());
        match self.kind() {
            AlphabetKind::Char => parts.collect(),
            AlphabetKind::Word => parts.collect::<Vec<_>>().join(" "),
        }
    }

    /// Canonical vocabulary file contents.
    pub fn to_file_string(&self) -> String {
        let mut out = String::from("# mtl-ctc vocabulary\n");
        for u in &self.units {
            let line = if u == " " { SPACE } else { u };
            let _ = writeln!(out, "{line}");
        }
        out
    }

    /// Hex SHA-256 of the canonical file contents.
    pub fn content_hash(&self) -> String {
        let digest = Sha256::digest(self.to_file_string().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn parse(contents: &str) -> Result<Self> {
        let units = contents
            .lines()
            .filter(|l| !l.trim_start().starts_with('#') && !l.trim().is_empty())
            .map(|l| {
                let l = l.trim();
                if l == SPACE {
                    " ".to_string()
                } else {
                    l.to_string()
                }
            })
            .collect();
        Self::from_units(units)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let contents = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&contents)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_file_string()).map_err(|e| Error::io(path, e))
    }
}

/// The fixed 32-unit character alphabet: A-Z, space, apostrophe, hyphen,
/// period, noise marker and blank (last).
pub fn build_char_alphabet() -> Alphabet {
    let units = ('A'..='Z')
        .chain(CHAR_EXTRAS)
        .map(String::from)
        .chain(std::iter::once(BLANK.to_string()))
        .collect();
    Alphabet::from_units(units).expect("static alphabet is valid")
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct WordCounts(pub BTreeMap<String, u64>);

impl WordCounts {
    pub fn from_transcripts<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut counts = BTreeMap::new();
        for text in texts {
            for w in tokenize_words(text) {
                *counts.entry(w).or_insert(0) += 1;
            }
        }
        Self(counts)
    }

    pub fn total(&self) -> u64 {
        self.0.values().sum()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Fraction of tokens the vocabulary maps to unk.
    pub fn oov_rate(&self, vocab: &Alphabet) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        let oov: u64 = self
            .0
            .iter()
            .filter(|(w, _)| vocab.index_of(w).is_none_or(|i| i == vocab.blank_index()))
            .map(|(_, c)| c)
            .sum();
        oov as f64 / total as f64
    }
}

#[derive(Debug, Clone)]
pub struct WordVocab {
    pub alphabet: Alphabet,
    pub train_oov_rate: f64,
}

/// Words seen at least `min_count` times, sorted, then unk and blank.
pub fn build_word_vocab(counts: &WordCounts, min_count: u64) -> Result<WordVocab> {
    if min_count == 0 {
        return Err(Error::Config("min_count must be at least 1".into()));
    }
    let mut units: Vec<String> = counts
        .0
        .iter()
        .filter(|&(_, &c)| c >= min_count)
        .map(|(w, _)| w.clone())
        .collect();
    if units.is_empty() {
        return Err(Error::EmptyVocabulary { min_count });
    }
    units.push(UNK.to_string());
    units.push(BLANK.to_string());
    let alphabet = Alphabet::from_units(units)?;
    let train_oov_rate = counts.oov_rate(&alphabet);
    Ok(WordVocab {
        alphabet,
        train_oov_rate,
    })
}
