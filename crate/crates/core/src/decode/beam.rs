//! Prefix beam search over collapsed character hypotheses, restricted to
//! word sequences from a lexicon.

use std::cmp::Ordering;
use std::collections::HashMap;

use super::Lexicon;
use crate::ctc::{log_add, FramePosteriors};
use crate::error::{Error, Result};
use crate::vocab::LabelSequence;

pub const DEFAULT_BEAM_WIDTH: usize = 64;

#[derive(Debug, Clone)]
struct Hypothesis {
    /// Trie node of the word being spelled; root right after a space.
    node: usize,
    blank: f64,
    non_blank: f64,
}

impl Hypothesis {
    fn score(&self) -> f64 {
        log_add(self.blank, self.non_blank)
    }
}

fn entry(
    map: &mut HashMap<Vec<usize>, Hypothesis>,
    prefix: Vec<usize>,
    node: usize,
) -> &mut Hypothesis {
    map.entry(prefix).or_insert(Hypothesis {
        node,
        blank: f64::NEG_INFINITY,
        non_blank: f64::NEG_INFINITY,
    })
}

fn rank(a: &(Vec<usize>, Hypothesis), b: &(Vec<usize>, Hypothesis)) -> Ordering {
    b.1.score()
        .total_cmp(&a.1.score())
        .then_with(|| a.0.cmp(&b.0))
}

/// Highest-scoring complete lexicon hypothesis. A hypothesis scores the
/// total probability of all paths collapsing to it; without pruning this is
/// exact. Spaces are only allowed after a complete word, and a complete
/// hypothesis ends on a complete word.
pub fn beam_decode_lexicon(
    p: &FramePosteriors,
    lex: &Lexicon,
    space: usize,
    beam_width: usize,
) -> Result<LabelSequence> {
    if beam_width == 0 {
        return Err(Error::Config("beam width must be at least 1".into()));
    }
    let lp = p.log_probs();
    let blank = p.blank();

    let mut beam: Vec<(Vec<usize>, Hypothesis)> = vec![(
        Vec::new(),
        Hypothesis {
            node: Lexicon::ROOT,
            blank: 0.0,
            non_blank: f64::NEG_INFINITY,
        },
    )];

    for t in 0..p.frames() {
        let y = lp.row(t);
        let mut next: HashMap<Vec<usize>, Hypothesis> = HashMap::with_capacity(beam.len() * 4);
        for (prefix, hyp) in &beam {
            let total = hyp.score();
            let last = prefix.last().copied();

            let stay = entry(&mut next, prefix.clone(), hyp.node);
            stay.blank = log_add(stay.blank, total + y[blank]);
            if let Some(k) = last {
                stay.non_blank = log_add(stay.non_blank, hyp.non_blank + y[k]);
            }

            let mut extend = |k: usize, node: usize| {
                let from = if last == Some(k) { hyp.blank } else { total };
                let mut longer = prefix.clone();
                longer.push(k);
                let h = entry(&mut next, longer, node);
                h.non_blank = log_add(h.non_blank, from + y[k]);
            };
            for (k, child) in lex.children(hyp.node) {
                extend(k, child);
            }
            if hyp.node != Lexicon::ROOT && lex.is_word(hyp.node) {
                extend(space, Lexicon::ROOT);
            }
        }
        beam = next.into_iter().collect();
        beam.sort_by(rank);
        beam.truncate(beam_width);
    }

    beam.into_iter()
        .find(|(prefix, hyp)| !prefix.is_empty() && lex.is_word(hyp.node))
        .map(|(prefix, _)| LabelSequence(prefix))
        .ok_or(Error::NoCompleteHypothesis)
}
