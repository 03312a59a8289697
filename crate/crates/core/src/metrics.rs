//! Levenshtein alignment, WER and CER.

use std::io::Write;
use std::ops::Add;
use std::path::Path;

use crate::error::{Error, Result};
use crate::vocab::{normalize_transcript, tokenize_words};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EditOps {
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
}

impl EditOps {
    pub fn total(&self) -> usize {
        self.substitutions + self.insertions + self.deletions
    }
}

impl Add for EditOps {
    type Output = EditOps;
    fn add(self, o: EditOps) -> EditOps {
        EditOps {
            substitutions: self.substitutions + o.substitutions,
            insertions: self.insertions + o.insertions,
            deletions: self.deletions + o.deletions,
        }
    }
}

/// Unit-cost alignment of `hyp` against `reference`. When several minimal
/// alignments exist the backtrace prefers substitution, then insertion,
/// then deletion.
pub fn edit_distance<T: PartialEq>(reference: &[T], hyp: &[T]) -> EditOps {
    let (n, m) = (reference.len(), hyp.len());
    let width = m + 1;
    let mut cost = vec![0usize; (n + 1) * width];
    for (j, c) in cost[..width].iter_mut().enumerate() {
        *c = j;
    }
    for i in 1..=n {
        cost[i * width] = i;
        for j in 1..=m {
            let diag = cost[(i - 1) * width + j - 1] + usize::from(reference[i - 1] != hyp[j - 1]);
            let ins = cost[i * width + j - 1] + 1;
            let del = cost[(i - 1) * width + j] + 1;
            cost[i * width + j] = diag.min(ins).min(del);
        }
    }

    let mut ops = EditOps::default();
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = cost[i * width + j];
        if i > 0 && j > 0 {
            let same = reference[i - 1] == hyp[j - 1];
            if cost[(i - 1) * width + j - 1] + usize::from(!same) == here {
                if !same {
                    ops.substitutions += 1;
                }
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if j > 0 && cost[i * width + j - 1] + 1 == here {
            ops.insertions += 1;
            j -= 1;
        } else {
            ops.deletions += 1;
            i -= 1;
        }
    }
    ops
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorRate {
    pub ops: EditOps,
    pub reference_tokens: usize,
}

impl ErrorRate {
    pub fn rate(&self) -> f64 {
        self.ops.total() as f64 / self.reference_tokens as f64
    }
}

fn pooled<F>(refs: &[String], hyps: &[String], tokens: F) -> Result<(ErrorRate, Vec<(usize, EditOps)>)>
where
    F: Fn(&str) -> Vec<String>,
{
    if refs.len() != hyps.len() {
        return Err(Error::Unpaired {
            refs: refs.len(),
            hyps: hyps.len(),
        });
    }
    let per_utt: Vec<(usize, EditOps)> = refs
        .iter()
        .zip(hyps)
        .map(|(r, h)| {
            let (rt, ht) = (tokens(r), tokens(h));
            (rt.len(), edit_distance(&rt, &ht))
        })
        .collect();
    let reference_tokens: usize = per_utt.iter().map(|(n, _)| n).sum();
    if reference_tokens == 0 {
        return Err(Error::EmptyReference);
    }
    let ops = per_utt.iter().fold(EditOps::default(), |acc, (_, o)| acc + *o);
    Ok((ErrorRate { ops, reference_tokens }, per_utt))
}

fn char_tokens(text: &str) -> Vec<String> {
    normalize_transcript(text).chars().map(String::from).collect()
}

/// Corpus-pooled word error rate.
pub fn wer(refs: &[String], hyps: &[String]) -> Result<f64> {
    Ok(word_errors(refs, hyps)?.0.rate())
}

pub fn word_errors(refs: &[String], hyps: &[String]) -> Result<(ErrorRate, Vec<(usize, EditOps)>)> {
    pooled(refs, hyps, tokenize_words)
}

/// Corpus-pooled character error rate over normalized text, spaces included.
pub fn cer(refs: &[String], hyps: &[String]) -> Result<f64> {
    Ok(pooled(refs, hyps, char_tokens)?.0.rate())
}

/// `id,ref_len,S,I,D` per utterance.
pub fn write_error_csv(path: &Path, ids: &[String], per_utt: &[(usize, EditOps)]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    let io = |e| Error::io(path, e);
    writeln!(f, "id,ref_len,S,I,D").map_err(io)?;
    for (id, (n, ops)) in ids.iter().zip(per_utt) {
        writeln!(f, "{id},{n},{},{},{}", ops.substitutions, ops.insertions, ops.deletions).map_err(io)?;
    }
    f.flush().map_err(io)
}
