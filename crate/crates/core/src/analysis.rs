//! Which words a model recognizes as training progresses, summarized as CDFs
//! over training-set frequency rank and word-length rank.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Utterance;
use crate::error::{Error, Result};
use crate::net::{transcribe, Model, Real};
use crate::vocab::{tokenize_words, Alphabet, WordCounts, UNK};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    Frequency,
    Length,
}

impl Axis {
    pub const ALL: [Axis; 2] = [Axis::Frequency, Axis::Length];
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Axis::Frequency => "frequency",
            Axis::Length => "length",
        })
    }
}

/// Whether each recognized word counts once or once per utterance it was
/// recognized in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Weighting {
    Types,
    Tokens,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RankTable {
    by_frequency: Vec<String>,
    by_length: Vec<String>,
    ranks: BTreeMap<String, (usize, usize)>,
}

/// Frequency rank: descending count. Length rank: ascending character
/// length. Both break ties lexicographically and start at 1.
pub fn build_rank_table(counts: &WordCounts) -> Result<RankTable> {
    if counts.is_empty() {
        return Err(Error::Config("cannot rank an empty word count table".into()));
    }
    let mut by_frequency: Vec<String> = counts.0.keys().cloned().collect();
    by_frequency.sort_by(|a, b| counts.0[b].cmp(&counts.0[a]).then_with(|| a.cmp(b)));
    let mut by_length: Vec<String> = counts.0.keys().cloned().collect();
    by_length.sort_by(|a, b| a.chars().count().cmp(&b.chars().count()).then_with(|| a.cmp(b)));
    let mut ranks: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for (i, w) in by_frequency.iter().enumerate() {
        ranks.entry(w.clone()).or_default().0 = i + 1;
    }
    for (i, w) in by_length.iter().enumerate() {
        ranks.entry(w.clone()).or_default().1 = i + 1;
    }
    Ok(RankTable {
        by_frequency,
        by_length,
        ranks,
    })
}

impl RankTable {
    pub fn len(&self) -> usize {
        self.ranks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ranks.is_empty()
    }

    pub fn rank(&self, word: &str, axis: Axis) -> Option<usize> {
        self.ranks.get(word).map(|&(f, l)| match axis {
            Axis::Frequency => f,
            Axis::Length => l,
        })
    }

    /// Word at 1-based `rank`.
    pub fn word_at(&self, rank: usize, axis: Axis) -> Option<&str> {
        let list = match axis {
            Axis::Frequency => &self.by_frequency,
            Axis::Length => &self.by_length,
        };
        rank.checked_sub(1).and_then(|i| list.get(i)).map(String::as_str)
    }
}

/// Union over utterances of the word types present in both the prediction
/// and its reference. The unknown token is never recognized.
pub fn recognized_words(predictions: &[String], references: &[String]) -> Result<BTreeSet<String>> {
    Ok(recognized_counts(predictions, references)?.into_keys().collect())
}

fn recognized_counts(predictions: &[String], references: &[String]) -> Result<BTreeMap<String, u64>> {
    if predictions.len() != references.len() {
        return Err(Error::Unpaired {
            refs: references.len(),
            hyps: predictions.len(),
        });
    }
    let mut counts = BTreeMap::new();
    for (p, r) in predictions.iter().zip(references) {
        let pred: BTreeSet<String> = tokenize_words(p).into_iter().collect();
        let refs: BTreeSet<String> = tokenize_words(r).into_iter().collect();
        for w in pred.intersection(&refs).filter(|w| *w != UNK) {
            *counts.entry(w.clone()).or_insert(0) += 1;
        }
    }
    Ok(counts)
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct RecognizedWordRecord {
    pub epoch: usize,
    /// Recognized word type -> number of utterances it was recognized in.
    pub counts: BTreeMap<String, u64>,
}

impl RecognizedWordRecord {
    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.counts.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }
}

pub fn recognized_record(epoch: usize, predictions: &[String], references: &[String]) -> Result<RecognizedWordRecord> {
    Ok(RecognizedWordRecord {
        epoch,
        counts: recognized_counts(predictions, references)?,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CdfPoint {
    pub rank: usize,
    pub word: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CdfCurve {
    /// One point per rank `1..=V`; empty when nothing was recognized.
    pub points: Vec<CdfPoint>,
    /// Recognized words missing from the rank table.
    pub excluded: Vec<String>,
}

impl CdfCurve {
    /// Mean CDF value over all ranks.
    pub fn auc(&self) -> f64 {
        if self.points.is_empty() {
            return 0.0;
        }
        self.points.iter().map(|p| p.value).sum::<f64>() / self.points.len() as f64
    }
}

/// Fraction of recognized words with rank at most `r`, for every rank.
/// Unranked recognized words count toward the total but never toward a
/// rank, so the curve ends below 1 when any are present.
pub fn cdf_curve(record: &RecognizedWordRecord, table: &RankTable, axis: Axis, weighting: Weighting) -> CdfCurve {
    let weight = |c: u64| match weighting {
        Weighting::Types => 1.0,
        Weighting::Tokens => c as f64,
    };
    let total: f64 = record.counts.values().map(|&c| weight(c)).sum();
    if record.is_empty() || total == 0.0 {
        log::warn!("epoch {}: no recognized words, empty {axis} curve", record.epoch);
        return CdfCurve::default();
    }
    let mut mass = vec![0.0; table.len() + 1];
    let mut excluded = Vec::new();
    for (w, &c) in &record.counts {
        match table.rank(w, axis) {
            Some(r) => mass[r] += weight(c),
            None => excluded.push(w.clone()),
        }
    }
    if !excluded.is_empty() {
        log::info!("epoch {}: {} recognized words are not ranked", record.epoch, excluded.len());
    }
    let mut acc = 0.0;
    let points = (1..=table.len())
        .map(|r| {
            acc += mass[r];
            CdfPoint {
                rank: r,
                word: table.word_at(r, axis).expect("rank in range").to_string(),
                value: acc / total,
            }
        })
        .collect();
    CdfCurve { points, excluded }
}

/// Greedy-decodes `utts` with one head (`"word"` or `"char"`) and collects
/// the recognized words.
pub fn snapshot<F: Real>(
    epoch: usize,
    model: &Model<F>,
    utts: &[Utterance],
    head: &str,
    chars: &Alphabet,
    words: &Alphabet,
) -> Result<RecognizedWordRecord> {
    let t = transcribe(model, utts, chars, words)?;
    let hyps = match head {
        "word" => t.word,
        "char" => t.char,
        other => return Err(Error::Config(format!("unknown head {other:?}"))),
    }
    .ok_or_else(|| Error::Config(format!("model has no {head} head")))?;
    let refs: Vec<String> = utts.iter().map(|u| u.transcript.clone()).collect();
    recognized_record(epoch, &hyps, &refs)
}

pub const CDF_HEADER: &str = "epoch,rank,word,cdf_value";
pub const SUMMARY_HEADER: &str = "epoch,model,axis,auc";

pub fn cdf_csv<'a>(curves: impl IntoIterator<Item = (usize, &'a CdfCurve)>) -> String {
    let mut out = format!("{CDF_HEADER}\n");
    for (epoch, curve) in curves {
        for p in &curve.points {
            writeln!(out, "{epoch},{},{},{:.6}", p.rank, p.word, p.value).unwrap();
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub epoch: usize,
    pub model: String,
    pub axis: Axis,
    pub auc: f64,
}

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut out = format!("{SUMMARY_HEADER}\n");
    for r in rows {
        writeln!(out, "{},{},{},{:.6}", r.epoch, r.model, r.axis, r.auc).unwrap();
    }
    out
}

pub fn write_text(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}
