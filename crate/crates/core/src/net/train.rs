use std::fmt::Write as _;

use ndarray::ArrayView2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::adam::{AdamConfig, AdamState};
use super::config::{Heads, NetworkConfig, Preset};
use super::layer::Mode;
use super::model::{BatchLoss, Model, MtlWeight, Targets};
use super::params::Real;
use crate::analysis::{recognized_record, RecognizedWordRecord};
use crate::data::{Corpus, Utterance};
use crate::decode::{greedy_decode, substitute_unknowns, token_labels};
use crate::error::{Error, Result};
use crate::metrics::{cer, wer};
use crate::rng::{substream, Rng};
use crate::vocab::{normalize_transcript, Alphabet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lambda: f64,
    pub seed: u64,
    pub preset: Preset,
    pub heads: Heads,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 4,
            batch_size: 16,
            lambda: 1.0,
            seed: 0,
            preset: Preset::Desk,
            heads: Heads::Both,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config("batch size must be at least 2".into()));
        }
        if !self.adam.learning_rate.is_finite() || self.adam.learning_rate <= 0.0 {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        MtlWeight::new(self.lambda).map(|_| ())
    }

    /// Network for this run over the given vocabularies.
    pub fn network(&self, chars: &Alphabet, words: &Alphabet) -> NetworkConfig {
        let mut net = NetworkConfig::for_preset(self.preset, chars.len(), words.len());
        net.char_blank = chars.blank_index();
        net.word_blank = words.blank_index();
        net.heads = self.heads;
        net
    }
}

/// Greedy transcripts of a set of utterances, one list per available head.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Transcripts {
    pub word: Option<Vec<String>>,
    pub char: Option<Vec<String>>,
    /// Word head with unknowns replaced by character-head words.
    pub combined: Option<Vec<String>>,
    pub unk_substituted: usize,
    pub unk_dropped: usize,
}

pub fn transcribe<F: Real>(model: &Model<F>, utts: &[Utterance], chars: &Alphabet, words: &Alphabet) -> Result<Transcripts> {
    let heads = model.heads();
    let mut out = Transcripts {
        word: heads.has_word().then(Vec::new),
        char: heads.has_char().then(Vec::new),
        combined: (heads == Heads::Both).then(Vec::new),
        ..Transcripts::default()
    };
    for u in utts {
        let x = u.features.mapv(|v| F::of(f64::from(v)));
        let post = model.posteriors(x.view())?;
        let word_tokens = post.word.as_ref().map(greedy_decode);
        let char_tokens = post.char.as_ref().map(greedy_decode);
        if let (Some(list), Some(tok)) = (out.word.as_mut(), &word_tokens) {
            list.push(words.decode(&token_labels(tok)));
        }
        if let (Some(list), Some(tok)) = (out.char.as_mut(), &char_tokens) {
            list.push(normalize_transcript(&chars.decode(&token_labels(tok))));
        }
        if let (Some(list), Some(wt), Some(ct)) = (out.combined.as_mut(), &word_tokens, &char_tokens) {
            let s = substitute_unknowns(wt, ct, words, chars);
            out.unk_substituted += s.substituted;
            out.unk_dropped += s.dropped;
            list.push(s.transcript);
        }
    }
    Ok(out)
}

/// Per-head recognized-word records, keyed by head name.
pub type Recognized = Vec<(String, RecognizedWordRecord)>;

#[derive(Debug, Clone, PartialEq)]
pub struct Validation {
    pub wer_word: Option<f64>,
    pub wer_char: Option<f64>,
    pub cer_char: Option<f64>,
    pub wer_combined: Option<f64>,
    pub unk_dropped: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochReport {
    pub epoch: usize,
    /// Utterance-weighted means over the epoch.
    pub train_loss: f64,
    pub train_word_loss: Option<f64>,
    pub train_char_loss: Option<f64>,
    /// One entry per update.
    pub step_losses: Vec<BatchLoss>,
    pub valid: Option<Validation>,
    /// Recognized validation words per head name.
    pub recognized: Vec<(String, RecognizedWordRecord)>,
}

pub const METRICS_HEADER: &str =
    "epoch,train_loss,train_loss_word,train_loss_char,valid_wer_word,valid_wer_char,valid_cer_char,valid_wer_combined,unk_dropped";

fn opt(x: Option<f64>) -> String {
    x.map(|v| format!("{v:.6}")).unwrap_or_default()
}

impl EpochReport {
    pub fn csv_row(&self) -> String {
        let v = self.valid.as_ref();
        format!(
            "{},{:.6},{},{},{},{},{},{},{}",
            self.epoch,
            self.train_loss,
            opt(self.train_word_loss),
            opt(self.train_char_loss),
            opt(v.and_then(|v| v.wer_word)),
            opt(v.and_then(|v| v.wer_char)),
            opt(v.and_then(|v| v.cer_char)),
            opt(v.and_then(|v| v.wer_combined)),
            v.map(|v| v.unk_dropped.to_string()).unwrap_or_default(),
        )
    }
}

pub fn metrics_csv(reports: &[EpochReport]) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for r in reports {
        writeln!(out, "{}", r.csv_row()).unwrap();
    }
    out
}

/// Shuffled mini-batch Adam on the MTL loss. Shuffling and dropout each
/// consume one continuous substream of the run seed.
#[derive(Debug)]
pub struct Trainer<F> {
    pub model: Model<F>,
    pub adam: AdamState<F>,
    pub config: TrainConfig,
    pub epoch: usize,
    weight: MtlWeight,
    shuffle: Rng,
    dropout: Rng,
}

impl<F: Real> Trainer<F> {
    pub fn new(network: NetworkConfig, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = Model::new(network, config.seed)?;
        let adam = AdamState::new(config.adam, model.params());
        Ok(Self {
            weight: MtlWeight::new(config.lambda)?,
            shuffle: substream(config.seed, "shuffle"),
            dropout: substream(config.seed, "dropout"),
            model,
            adam,
            config,
            epoch: 0,
        })
    }

    /// Shuffled batches of indices into `0..n`. A trailing batch of one is
    /// merged into the previous batch.
    pub fn batches(&mut self, n: usize) -> Result<Vec<Vec<usize>>> {
        if n < 2 {
            return Err(Error::BatchTooSmall(n));
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut self.shuffle);
        let mut batches: Vec<Vec<usize>> = order.chunks(self.config.batch_size).map(<[usize]>::to_vec).collect();
        if let Some(last) = batches.pop_if(|b| b.len() == 1) {
            batches.last_mut().expect("n >= 2").extend(last);
        }
        Ok(batches)
    }

    /// One Adam update on `batch`.
    pub fn step(&mut self, batch: &[&Utterance]) -> Result<BatchLoss> {
        let inputs: Vec<_> = batch
            .iter()
            .map(|u| u.features.mapv(|v| F::of(f64::from(v))))
            .collect();
        let views: Vec<ArrayView2<F>> = inputs.iter().map(|x| x.view()).collect();
        let targets: Vec<Targets> = batch
            .iter()
            .map(|u| Targets {
                chars: &u.chars,
                words: &u.words,
            })
            .collect();
        let fwd = self.model.forward(&views, Mode::Train, Some(&mut self.dropout))?;
        let (loss, grads) = self.model.backward(&fwd, &targets, self.weight)?;
        self.adam.step(self.model.params_mut(), &grads)?;
        self.model.update_running_stats(&fwd);
        Ok(loss)
    }

    /// One pass over `train`; returns batch size and loss per update.
    pub fn train_epoch(&mut self, train: &[Utterance]) -> Result<Vec<(usize, BatchLoss)>> {
        let batches = self.batches(train.len())?;
        let mut losses = Vec::with_capacity(batches.len());
        for idx in batches {
            let batch: Vec<&Utterance> = idx.iter().map(|&i| &train[i]).collect();
            losses.push((batch.len(), self.step(&batch)?));
        }
        self.epoch += 1;
        Ok(losses)
    }

    pub fn validate(&self, corpus: &Corpus) -> Result<(Option<Validation>, Recognized)> {
        if corpus.valid.is_empty() {
            return Ok((None, Vec::new()));
        }
        let t = transcribe(&self.model, &corpus.valid, &corpus.chars, &corpus.words)?;
        let refs: Vec<String> = corpus.valid.iter().map(|u| u.transcript.clone()).collect();
        let score = |h: &Option<Vec<String>>| h.as_ref().map(|h| wer(&refs, h)).transpose();
        let mut recognized = Vec::new();
        for (name, hyps) in [("word", &t.word), ("char", &t.char)] {
            if let Some(h) = hyps {
                recognized.push((name.to_string(), recognized_record(self.epoch, h, &refs)?));
            }
        }
        let valid = Validation {
            wer_word: score(&t.word)?,
            wer_char: score(&t.char)?,
            cer_char: t.char.as_ref().map(|h| cer(&refs, h)).transpose()?,
            wer_combined: score(&t.combined)?,
            unk_dropped: t.unk_dropped,
        };
        Ok((Some(valid), recognized))
    }

    /// Trains for the configured number of epochs, calling `on_epoch` after
    /// each one.
    pub fn run(
        &mut self,
        corpus: &Corpus,
        mut on_epoch: impl FnMut(&Self, &EpochReport) -> Result<()>,
    ) -> Result<Vec<EpochReport>> {
        corpus.check_feasible(self.model.config())?;
        let mut reports = Vec::with_capacity(self.config.epochs);
        for _ in 0..self.config.epochs {
            let steps = self.train_epoch(&corpus.train)?;
            let n = corpus.train.len() as f64;
            let mean = |f: &dyn Fn(&BatchLoss) -> Option<f64>| -> Option<f64> {
                let mut acc = 0.0;
                for (b, l) in &steps {
                    acc += f(l)? * *b as f64;
                }
                Some(acc / n)
            };
            let (valid, recognized) = self.validate(corpus)?;
            let report = EpochReport {
                epoch: self.epoch,
                train_loss: mean(&|l| Some(l.total)).expect("total"),
                train_word_loss: mean(&|l| l.word),
                train_char_loss: mean(&|l| l.char),
                step_losses: steps.into_iter().map(|(_, l)| l).collect(),
                valid,
                recognized,
            };
            log::info!("{}", report.csv_row());
            on_epoch(self, &report)?;
            reports.push(report);
        }
        Ok(reports)
    }
}
