//! Seeded "toy speech": every character is a fixed sine burst, words are
//! separated by silence, and word frequencies follow a Zipf law.

use std::f64::consts::PI;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng as _;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use super::manifest::{Manifest, ManifestEntry};
use crate::error::{Error, Result};
use crate::features::{hz_to_mel, mel_to_hz, SAMPLE_RATE};
use crate::rng::substream;
use crate::vocab::normalize_transcript;

/// Characters with an acoustic signature. Space is rendered as silence.
pub const VOICED: &str = "ABCDEFGHIJKLMNOPQRSTUVWXYZ'-.*";

const LOWEST_HZ: f64 = 200.0;
const HIGHEST_HZ: f64 = 7000.0;
const AMPLITUDE: f64 = 0.5;
const FADE_MS: f64 = 5.0;

pub const DEFAULT_WORDS: [&str; 20] = [
    "THE", "WATER", "A", "GARDEN", "CAT", "MOUNTAIN", "IS", "YELLOW", "DOG", "BUTTERFLY", "RED", "HOUSE", "ON",
    "ELEPHANT", "SUN", "GREEN", "BIRD", "ORANGE", "TREE", "FISH",
];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Signature {
    pub freq_hz: f64,
    pub duration_ms: f64,
}

/// Tone for `c`: frequencies are mel-spaced over the voiced set, durations
/// cycle through 60..=90 ms.
pub fn signature(c: char) -> Option<Signature> {
    let i = VOICED.find(c)?;
    let n = VOICED.len();
    let (lo, hi) = (hz_to_mel(LOWEST_HZ), hz_to_mel(HIGHEST_HZ));
    Some(Signature {
        freq_hz: mel_to_hz(lo + (hi - lo) * i as f64 / (n - 1) as f64),
        duration_ms: 60.0 + ((i * 7) % 31) as f64,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    /// Listed in Zipf rank order: the first word is the most frequent.
    pub vocabulary: Vec<String>,
    pub min_words: usize,
    pub max_words: usize,
    pub zipf_exponent: f64,
    /// Standard deviation of additive Gaussian noise, in full-scale units.
    pub noise_level: f64,
    pub gap_ms: f64,
    pub space_ms: f64,
    pub edge_ms: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            vocabulary: DEFAULT_WORDS.iter().map(|w| w.to_string()).collect(),
            min_words: 2,
            max_words: 5,
            zipf_exponent: 1.0,
            noise_level: 0.01,
            gap_ms: 20.0,
            space_ms: 100.0,
            edge_ms: 50.0,
            seed: 0,
        }
    }
}

fn ms_to_samples(ms: f64) -> usize {
    (ms * SAMPLE_RATE as f64 / 1000.0).round() as usize
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.vocabulary.is_empty() {
            return Err(Error::Config("synthetic vocabulary is empty".into()));
        }
        for w in &self.vocabulary {
            let norm = normalize_transcript(w);
            if norm.is_empty() || norm.contains(' ') || norm != *w {
                return Err(Error::Config(format!("vocabulary entry {w:?} is not a normalized single word")));
            }
            if let Some(c) = w.chars().find(|&c| signature(c).is_none()) {
                return Err(Error::UnknownSymbol { symbol: c.to_string() });
            }
        }
        if self.min_words == 0 || self.min_words > self.max_words {
            return Err(Error::Config(format!(
                "utterance length range {}..={} is empty",
                self.min_words, self.max_words
            )));
        }
        let nonneg = |x: f64| x.is_finite() && x >= 0.0;
        if !nonneg(self.zipf_exponent) || !nonneg(self.noise_level) {
            return Err(Error::Config("zipf exponent and noise level must be >= 0".into()));
        }
        Ok(())
    }

    /// Probability of each vocabulary word, `p(r) ∝ r^-s`.
    pub fn word_probabilities(&self) -> Vec<f64> {
        let w: Vec<f64> = (1..=self.vocabulary.len())
            .map(|r| (r as f64).powf(-self.zipf_exponent))
            .collect();
        let z: f64 = w.iter().sum();
        w.into_iter().map(|x| x / z).collect()
    }

    fn transcript(&self, index: usize) -> String {
        let mut rng = substream(self.seed, &format!("synth/text/{index}"));
        let dist = WeightedIndex::new(self.word_probabilities()).expect("nonempty positive weights");
        let n = rng.random_range(self.min_words..=self.max_words);
        (0..n)
            .map(|_| self.vocabulary[dist.sample(&mut rng)].as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Transcripts of utterances `0..n`.
    pub fn transcripts(&self, n: usize) -> Result<Vec<String>> {
        self.validate()?;
        Ok((0..n).map(|i| self.transcript(i)).collect())
    }

    /// Noise-free waveform for a normalized transcript.
    pub fn render_clean(&self, transcript: &str) -> Result<Vec<f64>> {
        let mut out = vec![0.0; ms_to_samples(self.edge_ms)];
        for (wi, word) in transcript.split(' ').enumerate() {
            if wi > 0 {
                out.resize(out.len() + ms_to_samples(self.space_ms), 0.0);
            }
            for (ci, c) in word.chars().enumerate() {
                if ci > 0 {
                    out.resize(out.len() + ms_to_samples(self.gap_ms), 0.0);
                }
                let sig = signature(c).ok_or_else(|| Error::UnknownSymbol { symbol: c.to_string() })?;
                out.extend(tone(sig));
            }
        }
        out.resize(out.len() + ms_to_samples(self.edge_ms), 0.0);
        Ok(out)
    }

    /// Waveform of utterance `index`: clean rendering plus seeded noise.
    pub fn render(&self, index: usize, transcript: &str) -> Result<Vec<f64>> {
        let mut samples = self.render_clean(transcript)?;
        if self.noise_level > 0.0 {
            let mut rng = substream(self.seed, &format!("synth/noise/{index}"));
            let normal = Normal::new(0.0, self.noise_level).expect("finite std");
            for s in &mut samples {
                *s += normal.sample(&mut rng);
            }
        }
        Ok(samples)
    }
}

/// One sine burst with raised-cosine fades.
pub fn tone(sig: Signature) -> Vec<f64> {
    let n = ms_to_samples(sig.duration_ms);
    let fade = ms_to_samples(FADE_MS).min(n / 2);
    let w = 2.0 * PI * sig.freq_hz / SAMPLE_RATE as f64;
    (0..n)
        .map(|i| {
            let edge = i.min(n - 1 - i);
            let gain = if edge < fade {
                0.5 - 0.5 * (PI * edge as f64 / fade as f64).cos()
            } else {
                1.0
            };
            AMPLITUDE * gain * (w * i as f64).sin()
        })
        .collect()
}

pub fn write_wav(path: &Path, samples: &[f64]) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: SAMPLE_RATE,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec)?;
    for &s in samples {
        w.write_sample((s * 32768.0).round().clamp(-32768.0, 32767.0) as i16)?;
    }
    w.finalize()?;
    Ok(())
}

/// Writes `n` WAV files under `out/audio/` and `out/manifest.tsv`.
pub fn generate_synthetic(spec: &SynthSpec, n: usize, out: &Path) -> Result<Manifest> {
    let transcripts = spec.transcripts(n)?;
    let audio_dir = out.join("audio");
    std::fs::create_dir_all(&audio_dir).map_err(|e| Error::io(&audio_dir, e))?;
    let mut entries = Vec::with_capacity(n);
    for (i, text) in transcripts.into_iter().enumerate() {
        let id = format!("utt{i:05}");
        let rel = Path::new("audio").join(format!("{id}.wav"));
        write_wav(&out.join(&rel), &spec.render(i, &text)?)?;
        entries.push(ManifestEntry {
            id,
            audio: rel,
            transcript: text,
        });
    }
    let manifest = Manifest::new(entries, out);
    manifest.save(&out.join("manifest.tsv"))?;
    let echo = out.join("synth_spec.json");
    std::fs::write(&echo, serde_json::to_string_pretty(spec)?).map_err(|e| Error::io(&echo, e))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn signatures_are_distinct_and_in_range() {
        let sigs: Vec<Signature> = VOICED.chars().map(|c| signature(c).unwrap()).collect();
        let freqs: HashSet<u64> = sigs.iter().map(|s| s.freq_hz.to_bits()).collect();
        assert_eq!(freqs.len(), VOICED.len());
        for s in &sigs {
            assert!((LOWEST_HZ - 1e-9..=HIGHEST_HZ + 1e-9).contains(&s.freq_hz));
            assert!((60.0..=90.0).contains(&s.duration_ms));
        }
        assert!(signature(' ').is_none());
    }

    #[test]
    fn silent_single_word_is_the_pure_tone() {
        let spec = SynthSpec {
            noise_level: 0.0,
            ..SynthSpec::default()
        };
        let audio = spec.render(0, "A").unwrap();
        let edge = ms_to_samples(spec.edge_ms);
        let t = tone(signature('A').unwrap());
        assert_eq!(audio.len(), 2 * edge + t.len());
        assert!(audio[..edge].iter().chain(&audio[edge + t.len()..]).all(|&x| x == 0.0));
        assert_eq!(&audio[edge..edge + t.len()], &t[..]);
        let mid = t.len() / 2;
        let w = 2.0 * PI * signature('A').unwrap().freq_hz / SAMPLE_RATE as f64;
        assert!((t[mid] - AMPLITUDE * (w * mid as f64).sin()).abs() < 1e-15);
    }

    #[test]
    fn generation_is_bit_exact_per_seed() {
        let spec = SynthSpec {
            seed: 7,
            ..SynthSpec::default()
        };
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let ma = generate_synthetic(&spec, 50, a.path()).unwrap();
        generate_synthetic(&spec, 50, b.path()).unwrap();
        assert_eq!(ma.len(), 50);
        for e in &ma.entries {
            let x = std::fs::read(a.path().join(&e.audio)).unwrap();
            let y = std::fs::read(b.path().join(&e.audio)).unwrap();
            assert_eq!(x, y, "{}", e.id);
        }
        let ta = std::fs::read(a.path().join("manifest.tsv")).unwrap();
        assert_eq!(ta, std::fs::read(b.path().join("manifest.tsv")).unwrap());
        let other = SynthSpec { seed: 8, ..spec };
        assert_ne!(other.transcripts(50).unwrap(), ma.entries.iter().map(|e| e.transcript.clone()).collect::<Vec<_>>());
    }

    #[test]
    fn word_counts_follow_the_power_law() {
        let spec = SynthSpec {
            seed: 3,
            ..SynthSpec::default()
        };
        let texts = spec.transcripts(3000).unwrap();
        let mut counts = vec![0f64; spec.vocabulary.len()];
        for t in &texts {
            for w in t.split(' ') {
                counts[spec.vocabulary.iter().position(|v| v == w).unwrap()] += 1.0;
            }
        }
        let total: f64 = counts.iter().sum();
        let chi2: f64 = spec
            .word_probabilities()
            .iter()
            .zip(&counts)
            .map(|(p, o)| (o - p * total).powi(2) / (p * total))
            .sum();
        // 19 degrees of freedom; 43.82 is the 0.999 quantile
        assert!(chi2 < 43.82, "chi-square {chi2}");
        assert!(counts[0] > counts[4] && counts[4] > counts[19]);
    }

    #[test]
    fn rejects_unvoiced_vocabulary() {
        let spec = SynthSpec {
            vocabulary: vec!["CAT".into(), "D0G".into()],
            ..SynthSpec::default()
        };
        assert!(spec.validate().is_err());
        let empty = SynthSpec {
            vocabulary: vec![],
            ..SynthSpec::default()
        };
        assert!(empty.validate().is_err());
    }
}
