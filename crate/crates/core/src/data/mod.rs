//! Manifests, synthetic corpora, prepared feature directories and checkpoints.

mod checkpoint;
mod manifest;
mod synth;

use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

pub use checkpoint::Checkpoint;
pub use manifest::{load_manifest, Manifest, ManifestEntry};
pub use synth::{generate_synthetic, signature, tone, write_wav, Signature, SynthSpec, DEFAULT_WORDS, VOICED};

use crate::ctc::required_frames;
use crate::error::{Error, Result};
use crate::features::{extract, read_feature_file, write_feature_file, AudioSignal, FeatureConfig};
use crate::net::NetworkConfig;
use crate::vocab::{build_char_alphabet, build_word_vocab, Alphabet, LabelSequence, WordCounts};

pub const CHAR_VOCAB_FILE: &str = "vocab_char.txt";
pub const WORD_VOCAB_FILE: &str = "vocab_word.txt";
pub const TRAIN_MANIFEST: &str = "train.tsv";
pub const VALID_MANIFEST: &str = "valid.tsv";
pub const PREPARE_INFO: &str = "prepare.json";
const FEATURE_DIR: &str = "features";

/// Mono samples scaled to [-1, 1]; multichannel audio is averaged.
pub fn read_wav(path: &Path) -> Result<AudioSignal> {
    let mut reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    let channels = spec.channels.max(1) as usize;
    let interleaved: Vec<f64> = match spec.sample_format {
        hound::SampleFormat::Int => {
            let scale = (1i64 << (spec.bits_per_sample - 1)) as f64;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f64 / scale))
                .collect::<std::result::Result<_, _>>()?
        }
        hound::SampleFormat::Float => reader
            .samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<std::result::Result<_, _>>()?,
    };
    let samples = interleaved
        .chunks(channels)
        .map(|c| c.iter().sum::<f64>() / channels as f64)
        .collect();
    AudioSignal::new(samples, spec.sample_rate)
}

#[derive(Debug, Clone)]
pub struct Utterance {
    pub id: String,
    pub transcript: String,
    /// T x F standardized log-mel features.
    pub features: Array2<f32>,
    pub chars: LabelSequence,
    pub words: LabelSequence,
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub chars: Alphabet,
    pub words: Alphabet,
    pub train: Vec<Utterance>,
    pub valid: Vec<Utterance>,
    pub train_counts: WordCounts,
}

impl Corpus {
    /// Fails on the first utterance whose targets need more output frames
    /// than the network produces.
    pub fn check_feasible(&self, net: &NetworkConfig) -> Result<()> {
        for u in self.train.iter().chain(&self.valid) {
            let frames = net.output_frames(u.features.nrows());
            let required = required_frames(&u.chars).max(required_frames(&u.words));
            if frames < required {
                log::error!("utterance {} is too short for its transcript", u.id);
                return Err(Error::Infeasible { frames, required });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrepareInfo {
    pub features: FeatureConfig,
    pub min_count: u64,
    pub train_utterances: usize,
    pub valid_utterances: usize,
    pub train_oov_rate: f64,
    pub valid_oov_rate: f64,
}

/// Splits off the last `holdout` manifest entries for validation, builds
/// both vocabularies from the training part and caches features.
pub fn prepare(manifest_path: &Path, out: &Path, holdout: usize, min_count: u64, features: &FeatureConfig) -> Result<PrepareInfo> {
    let manifest = load_manifest(manifest_path)?;
    if holdout >= manifest.len() {
        return Err(Error::Config(format!(
            "holdout {holdout} leaves no training data out of {} entries",
            manifest.len()
        )));
    }
    let split = manifest.len() - holdout;
    let (train, valid) = manifest.entries.split_at(split);
    let train_counts = WordCounts::from_transcripts(train.iter().map(|e| e.transcript.as_str()));
    let valid_counts = WordCounts::from_transcripts(valid.iter().map(|e| e.transcript.as_str()));
    let vocab = build_word_vocab(&train_counts, min_count)?;
    let chars = build_char_alphabet();

    let feat_dir = out.join(FEATURE_DIR);
    std::fs::create_dir_all(&feat_dir).map_err(|e| Error::io(&feat_dir, e))?;
    for entry in &manifest.entries {
        chars.encode(&entry.transcript)?;
        let audio = read_wav(&manifest.audio_path(entry))?;
        let spec = extract(&audio, features)?;
        write_feature_file(&feat_dir.join(format!("{}.feat", entry.id)), &spec.frames)?;
    }

    let absolute = |entries: &[ManifestEntry]| {
        Manifest::new(
            entries
                .iter()
                .map(|e| ManifestEntry {
                    audio: std::path::absolute(manifest.audio_path(e)).unwrap_or_else(|_| manifest.audio_path(e)),
                    ..e.clone()
                })
                .collect(),
            PathBuf::new(),
        )
    };
    absolute(train).save(&out.join(TRAIN_MANIFEST))?;
    absolute(valid).save(&out.join(VALID_MANIFEST))?;
    chars.save(&out.join(CHAR_VOCAB_FILE))?;
    vocab.alphabet.save(&out.join(WORD_VOCAB_FILE))?;
    let info = PrepareInfo {
        features: features.clone(),
        min_count,
        train_utterances: train.len(),
        valid_utterances: valid.len(),
        train_oov_rate: vocab.train_oov_rate,
        valid_oov_rate: valid_counts.oov_rate(&vocab.alphabet),
    };
    let info_path = out.join(PREPARE_INFO);
    std::fs::write(&info_path, serde_json::to_string_pretty(&info)?).map_err(|e| Error::io(&info_path, e))?;
    Ok(info)
}

fn read_split(dir: &Path, name: &str, chars: &Alphabet, words: &Alphabet) -> Result<Vec<Utterance>> {
    let path = dir.join(name);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let mut fields = line.splitn(3, '\t');
        let (Some(id), Some(_), Some(transcript)) = (fields.next(), fields.next(), fields.next()) else {
            return Err(Error::Manifest {
                path: path.clone(),
                line: i + 1,
                msg: "expected id, audio path and transcript separated by tabs".into(),
            });
        };
        let features = read_feature_file(&dir.join(FEATURE_DIR).join(format!("{id}.feat")))?;
        out.push(Utterance {
            id: id.to_string(),
            transcript: transcript.to_string(),
            features,
            chars: chars.encode(transcript)?,
            words: words.encode(transcript)?,
        });
    }
    Ok(out)
}

/// Loads a directory written by [`prepare`].
pub fn load_prepared(dir: &Path) -> Result<Corpus> {
    let chars = Alphabet::load(&dir.join(CHAR_VOCAB_FILE))?;
    let words = Alphabet::load(&dir.join(WORD_VOCAB_FILE))?;
    let train = read_split(dir, TRAIN_MANIFEST, &chars, &words)?;
    let valid = read_split(dir, VALID_MANIFEST, &chars, &words)?;
    if train.is_empty() {
        return Err(Error::Config(format!("{}: no training utterances", dir.display())));
    }
    let train_counts = WordCounts::from_transcripts(train.iter().map(|u| u.transcript.as_str()));
    Ok(Corpus {
        chars,
        words,
        train,
        valid,
        train_counts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prepare_then_load() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec {
            seed: 5,
            ..SynthSpec::default()
        };
        generate_synthetic(&spec, 6, &dir.path().join("raw")).unwrap();
        let out = dir.path().join("prep");
        let info = prepare(&dir.path().join("raw/manifest.tsv"), &out, 2, 1, &FeatureConfig::default()).unwrap();
        assert_eq!((info.train_utterances, info.valid_utterances), (4, 2));
        assert_eq!(info.train_oov_rate, 0.0);

        let corpus = load_prepared(&out).unwrap();
        assert_eq!(corpus.train.len(), 4);
        assert_eq!(corpus.valid[1].id, "utt00005");
        assert_eq!(corpus.chars.len(), 32);
        let u = &corpus.train[0];
        assert_eq!(u.features.ncols(), 40);
        assert_eq!(corpus.chars.decode(&u.chars), u.transcript);
        assert_eq!(corpus.words.decode(&u.words), u.transcript);
        corpus.check_feasible(&NetworkConfig::desk(32, corpus.words.len())).unwrap();
    }

    #[test]
    fn wav_round_trip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.wav");
        let x: Vec<f64> = (0..400).map(|i| (i as f64 * 0.05).sin() * 0.7).collect();
        write_wav(&path, &x).unwrap();
        let back = read_wav(&path).unwrap();
        assert_eq!(back.sample_rate, 16_000);
        for (a, b) in x.iter().zip(&back.samples) {
            assert!((a - b).abs() <= 0.5 / 32768.0);
        }
    }

    #[test]
    fn holdout_must_leave_training_data() {
        let dir = tempfile::tempdir().unwrap();
        generate_synthetic(&SynthSpec::default(), 2, dir.path()).unwrap();
        let err = prepare(&dir.path().join("manifest.tsv"), &dir.path().join("p"), 2, 1, &FeatureConfig::default());
        assert!(matches!(err, Err(Error::Config(_))));
    }
}
