//! From frame posteriors to transcripts.

mod beam;
mod lexicon;

pub use beam::{beam_decode_lexicon, DEFAULT_BEAM_WIDTH};
pub use lexicon::Lexicon;

use crate::ctc::FramePosteriors;
use crate::vocab::{Alphabet, LabelSequence};

/// Merge adjacent repeats, then drop blanks.
pub fn squash(path: &[usize], blank: usize) -> LabelSequence {
    let mut out = Vec::new();
    let mut prev = None;
    for &k in path {
        if prev != Some(k) && k != blank {
            out.push(k);
        }
        prev = Some(k);
    }
    LabelSequence(out)
}

/// A decoded unit and the half-open frame span `[start, end)` of the argmax
/// run that emitted it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TimedToken {
    pub unit: usize,
    pub start: usize,
    pub end: usize,
}

impl TimedToken {
    pub fn overlap(&self, start: usize, end: usize) -> usize {
        self.end.min(end).saturating_sub(self.start.max(start))
    }
}

/// Per-frame argmax, ties toward the lowest index.
pub fn best_path(p: &FramePosteriors) -> Vec<usize> {
    p.log_probs()
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

pub fn greedy_decode(p: &FramePosteriors) -> Vec<TimedToken> {
    let path = best_path(p);
    let mut tokens = Vec::new();
    let mut start = 0;
    for t in 1..=path.len() {
        if t == path.len() || path[t] != path[start] {
            if path[start] != p.blank() {
                tokens.push(TimedToken {
                    unit: path[start],
                    start,
                    end: t,
                });
            }
            start = t;
        }
    }
    tokens
}

pub fn token_labels(tokens: &[TimedToken]) -> LabelSequence {
    LabelSequence(tokens.iter().map(|t| t.unit).collect())
}

/// A space-delimited word recovered from character tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CharWord {
    pub text: String,
    pub start: usize,
    pub end: usize,
}

pub fn char_words(tokens: &[TimedToken], chars: &Alphabet) -> Vec<CharWord> {
    let space = chars.space_index();
    tokens
        .split(|t| Some(t.unit) == space)
        .filter(|group| !group.is_empty())
        .map(|group| CharWord {
            text: group.iter().map(|t| chars.unit(t.unit)).collect(),
            start: group[0].start,
            end: group[group.len() - 1].end,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Substitution {
    pub transcript: String,
    pub substituted: usize,
    /// Unknown tokens with no overlapping character-level word.
    pub dropped: usize,
}

/// Replaces every word-level unknown token with the character-level word
/// whose frame span overlaps it most (earlier word on ties). Unknowns with no
/// overlap are dropped and counted.
pub fn substitute_unknowns(
    word_tokens: &[TimedToken],
    char_tokens: &[TimedToken],
    words: &Alphabet,
    chars: &Alphabet,
) -> Substitution {
    let candidates = char_words(char_tokens, chars);
    let unk = words.unk_index();
    let mut out = Vec::with_capacity(word_tokens.len());
    let (mut substituted, mut dropped) = (0, 0);
    for tok in word_tokens {
        if Some(tok.unit) != unk {
            out.push(words.unit(tok.unit).to_string());
            continue;
        }
        let mut best: Option<(&CharWord, usize)> = None;
        for cw in &candidates {
            let ov = tok.overlap(cw.start, cw.end);
            if ov > 0 && best.is_none_or(|(_, b)| ov > b) {
                best = Some((cw, ov));
            }
        }
        match best {
            Some((cw, _)) => {
                out.push(cw.text.clone());
                substituted += 1;
            }
            None => {
                log::debug!("dropping unknown token at frames {}..{}", tok.start, tok.end);
                dropped += 1;
            }
        }
    }
    Substitution {
        transcript: out.join(" "),
        substituted,
        dropped,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::{build_char_alphabet, build_word_vocab, WordCounts, BLANK};
    use ndarray::Array2;
    use proptest::prelude::*;

    const B: usize = 9;

    #[test]
    fn squash_examples() {
        assert_eq!(squash(&[0, 0, B, 1], B).0, vec![0, 1]);
        assert_eq!(squash(&[0, B, 0], B).0, vec![0, 0]);
        assert!(squash(&[B, B, B], B).is_empty());
    }

    fn one_hot_posteriors(path: &[usize], n: usize, blank: usize) -> FramePosteriors {
        let mut lp = Array2::from_elem((path.len(), n), (0.01f64 / (n - 1) as f64).ln());
        for (t, &k) in path.iter().enumerate() {
            lp[[t, k]] = 0.99f64.ln();
        }
        FramePosteriors::new(lp, blank).unwrap()
    }

    #[test]
    fn greedy_spans() {
        let p = one_hot_posteriors(&[0, 0, 2, 1], 3, 2);
        let toks = greedy_decode(&p);
        assert_eq!(
            toks,
            vec![
                TimedToken { unit: 0, start: 0, end: 2 },
                TimedToken { unit: 1, start: 3, end: 4 },
            ]
        );
    }

    #[test]
    fn greedy_tie_goes_to_lowest_index() {
        let p = FramePosteriors::new(Array2::from_elem((2, 3), -(3f64).ln()), 2).unwrap();
        assert_eq!(best_path(&p), vec![0, 0]);
        assert_eq!(greedy_decode(&p).len(), 1);
    }

    fn vocabs() -> (Alphabet, Alphabet) {
        let counts = WordCounts::from_transcripts(["THE THE THE"]);
        (build_word_vocab(&counts, 1).unwrap().alphabet, build_char_alphabet())
    }

    fn char_tokens(chars: &Alphabet, spec: &[(&str, usize, usize)]) -> Vec<TimedToken> {
        spec.iter()
            .map(|&(c, start, end)| TimedToken {
                unit: chars.index_of(c).unwrap(),
                start,
                end,
            })
            .collect()
    }

    #[test]
    fn unknown_replaced_by_overlapping_char_word() {
        let (words, chars) = vocabs();
        let the = words.index_of("THE").unwrap();
        let unk = words.unk_index().unwrap();
        let wt = [
            TimedToken { unit: the, start: 0, end: 10 },
            TimedToken { unit: unk, start: 10, end: 20 },
        ];
        let ct = char_tokens(
            &chars,
            &[
                ("T", 1, 2), ("H", 3, 4), ("E", 5, 7), (" ", 9, 10),
                ("Z", 11, 12), ("E", 13, 14), ("B", 15, 16), ("R", 16, 17), ("A", 18, 19),
            ],
        );
        let s = substitute_unknowns(&wt, &ct, &words, &chars);
        assert_eq!(s.transcript, "THE ZEBRA");
        assert_eq!((s.substituted, s.dropped), (1, 0));

        let only_known = substitute_unknowns(&wt[..1], &ct, &words, &chars);
        assert_eq!(only_known.transcript, "THE");
    }

    #[test]
    fn unknown_tie_picks_earlier_word_and_no_overlap_drops() {
        let (words, chars) = vocabs();
        let unk = words.unk_index().unwrap();
        let ct = char_tokens(&chars, &[("A", 0, 3), (" ", 3, 4), ("B", 4, 7)]);
        let tie = [TimedToken { unit: unk, start: 2, end: 5 }];
        // overlaps A by [2,3) and B by [4,5)
        assert_eq!(substitute_unknowns(&tie, &ct, &words, &chars).transcript, "A");
        let far = [TimedToken { unit: unk, start: 20, end: 22 }];
        let s = substitute_unknowns(&far, &ct, &words, &chars);
        assert_eq!(s.transcript, "");
        assert_eq!(s.dropped, 1);
        assert!(!s.transcript.contains("<unk>"));
    }

    #[test]
    fn char_words_split_on_spaces() {
        let chars = build_char_alphabet();
        let ct = char_tokens(&chars, &[(" ", 0, 1), ("A", 1, 2), (" ", 2, 3), (" ", 4, 5), ("B", 6, 7)]);
        let w = char_words(&ct, &chars);
        assert_eq!(w.iter().map(|c| c.text.as_str()).collect::<Vec<_>>(), vec!["A", "B"]);
        assert_eq!(chars.unit(chars.blank_index()), BLANK);
    }

    proptest! {
        #[test]
        fn greedy_matches_squashed_best_path(
            v in proptest::collection::vec(-3.0f64..3.0, 4..60)
        ) {
            let n = 4;
            let t = v.len() / n;
            prop_assume!(t > 0);
            let logits = Array2::from_shape_vec((t, n), v[..t * n].to_vec()).unwrap();
            let p = FramePosteriors::from_logits(logits.view(), 3);
            let toks = greedy_decode(&p);
            prop_assert_eq!(token_labels(&toks), squash(&best_path(&p), 3));
            prop_assert!(toks.iter().all(|t| t.unit != 3));
            for w in toks.windows(2) {
                prop_assert!(w[0].end <= w[1].start);
            }
        }

        #[test]
        fn squash_fixes_blank_free_outputs(v in proptest::collection::vec(0usize..3, 0..20)) {
            let out = squash(&v, 3);
            let no_adjacent = out.windows(2).all(|w| w[0] != w[1]);
            if no_adjacent {
                prop_assert_eq!(squash(&out, 3), out);
            }
        }
    }
}
