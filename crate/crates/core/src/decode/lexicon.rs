use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::vocab::{normalize_transcript, Alphabet};

#[derive(Debug, Clone, Default)]
struct Node {
    children: BTreeMap<usize, usize>,
    terminal: bool,
}

/// Character trie of allowed words over a character alphabet.
#[derive(Debug, Clone)]
pub struct Lexicon {
    nodes: Vec<Node>,
    words: usize,
}

impl Lexicon {
    pub const ROOT: usize = 0;

    pub fn from_words<'a>(
        words: impl IntoIterator<Item = &'a str>,
        chars: &Alphabet,
    ) -> Result<Self> {
        let mut lex = Self {
            nodes: vec![Node::default()],
            words: 0,
        };
        let space = chars.space_index();
        for raw in words {
            let word = normalize_transcript(raw);
            if word.is_empty() {
                continue;
            }
            let labels = chars.encode(&word)?;
            if labels.iter().any(|&k| Some(k) == space) {
                return Err(Error::Config(format!("lexicon entry {raw:?} contains a space")));
            }
            let mut node = Self::ROOT;
            for &k in labels.iter() {
                node = match lex.nodes[node].children.get(&k) {
                    Some(&next) => next,
                    None => {
                        lex.nodes.push(Node::default());
                        let next = lex.nodes.len() - 1;
                        lex.nodes[node].children.insert(k, next);
                        next
                    }
                };
            }
            if !lex.nodes[node].terminal {
                lex.nodes[node].terminal = true;
                lex.words += 1;
            }
        }
        Ok(lex)
    }

    /// One word per line; blank lines and `#` comments ignored.
    pub fn load(path: &Path, chars: &Alphabet) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_words(
            text.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with('#')),
            chars,
        )
    }

    pub fn len(&self) -> usize {
        self.words
    }

    pub fn is_empty(&self) -> bool {
        self.words == 0
    }

    pub fn child(&self, node: usize, label: usize) -> Option<usize> {
        self.nodes[node].children.get(&label).copied()
    }

    pub fn children(&self, node: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.nodes[node].children.iter().map(|(&k, &n)| (k, n))
    }

    pub fn is_word(&self, node: usize) -> bool {
        self.nodes[node].terminal
    }

    /// True for a nonempty sequence of lexicon words separated by single spaces.
    pub fn accepts(&self, labels: &[usize], space: usize) -> bool {
        if labels.is_empty() {
            return false;
        }
        labels.split(|&k| k == space).all(|word| {
            let mut node = Self::ROOT;
            for &k in word {
                match self.child(node, k) {
                    Some(n) => node = n,
                    None => return false,
                }
            }
            !word.is_empty() && self.is_word(node)
        })
    }
}
