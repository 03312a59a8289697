//! Log-mel spectrogram extraction and per-utterance standardization.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::Array2;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SAMPLE_RATE: u32 = 16_000;
pub const LOG_FLOOR: f64 = 1e-10;
const STD_EPSILON: f64 = 1e-8;

const CACHE_MAGIC: &[u8; 4] = b"CMTL";
const CACHE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct AudioSignal {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl AudioSignal {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::Config("sample rate must be positive".into()));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureConfig {
    pub sample_rate: u32,
    pub window_ms: f64,
    pub hop_ms: f64,
    pub n_mels: usize,
    /// Defaults to the next power of two above the window length.
    pub fft_size: Option<usize>,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            sample_rate: SAMPLE_RATE,
            window_ms: 20.0,
            hop_ms: 10.0,
            n_mels: 40,
            fft_size: None,
        }
    }
}

impl FeatureConfig {
    pub fn window_samples(&self) -> usize {
        (self.window_ms * self.sample_rate as f64 / 1000.0).round() as usize
    }

    pub fn hop_samples(&self) -> usize {
        (self.hop_ms * self.sample_rate as f64 / 1000.0).round() as usize
    }

    pub fn fft_len(&self) -> usize {
        self.fft_size
            .unwrap_or_else(|| self.window_samples().next_power_of_two())
    }

    pub fn validate(&self) -> Result<()> {
        let win = self.window_samples();
        let hop = self.hop_samples();
        if win == 0 || hop == 0 {
            return Err(Error::Config("window and hop must span at least one sample".into()));
        }
        if hop > win {
            return Err(Error::Config(format!(
                "hop ({} ms) exceeds window ({} ms)",
                self.hop_ms, self.window_ms
            )));
        }
        if self.n_mels == 0 {
            return Err(Error::Config("n_mels must be at least 1".into()));
        }
        let fft = self.fft_len();
        if !fft.is_power_of_two() || fft < win {
            return Err(Error::Config(format!(
                "fft size {fft} must be a power of two >= window length {win}"
            )));
        }
        Ok(())
    }

    /// Number of frames for `len` samples, or `None` if shorter than a window.
    pub fn frame_count(&self, len: usize) -> Option<usize> {
        let win = self.window_samples();
        let hop = self.hop_samples();
        (len >= win).then(|| 1 + (len - win) / hop)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    /// T x F, one row per frame.
    pub frames: Array2<f64>,
    /// Start time of each frame in seconds.
    pub frame_times: Vec<f64>,
}

impl Spectrogram {
    pub fn num_frames(&self) -> usize {
        self.frames.nrows()
    }

    pub fn num_features(&self) -> usize {
        self.frames.ncols()
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular mel filters with unit peaks, centers equally spaced on the mel
/// scale between 0 Hz and Nyquist. Shape `n_mels x (fft_size / 2 + 1)`.
pub fn mel_filterbank(n_mels: usize, fft_size: usize, sample_rate: u32) -> Array2<f64> {
    let n_bins = fft_size / 2 + 1;
    let nyquist = sample_rate as f64 / 2.0;
    let mel_max = hz_to_mel(nyquist);
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(mel_max * i as f64 / (n_mels + 1) as f64))
        .collect();
    let bin_hz = sample_rate as f64 / fft_size as f64;

    let mut bank = Array2::zeros((n_mels, n_bins));
    for m in 0..n_mels {
        let (lo, center, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        for k in 0..n_bins {
            let f = k as f64 * bin_hz;
            let w = if f > lo && f <= center {
                (f - lo) / (center - lo)
            } else if f > center && f < hi {
                (hi - f) / (hi - center)
            } else {
                0.0
            };
            bank[[m, k]] = w;
        }
    }
    bank
}

fn hann(len: usize) -> Vec<f64> {
    // periodic Hann
    (0..len)
        .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / len as f64).cos())
        .collect()
}

/// Log mel-filterbank energies of `audio`, not yet standardized.
pub fn log_mel_spectrogram(audio: &AudioSignal, cfg: &FeatureConfig) -> Result<Spectrogram> {
    cfg.validate()?;
    if audio.sample_rate != cfg.sample_rate {
        return Err(Error::SampleRateMismatch {
            expected: cfg.sample_rate,
            found: audio.sample_rate,
        });
    }
    let win = cfg.window_samples();
    let hop = cfg.hop_samples();
    let n_fft = cfg.fft_len();
    let n_frames = cfg
        .frame_count(audio.samples.len())
        .ok_or(Error::UtteranceTooShort {
            samples: audio.samples.len(),
            window: win,
        })?;

    let window = hann(win);
    let bank = mel_filterbank(cfg.n_mels, n_fft, cfg.sample_rate);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n_fft);
    let n_bins = n_fft / 2 + 1;

    let mut frames = Array2::zeros((n_frames, cfg.n_mels));
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    let mut power = vec![0.0; n_bins];
    for t in 0..n_frames {
        let start = t * hop;
        buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
        for (i, (&s, &w)) in audio.samples[start..start + win]
            .iter()
            .zip(&window)
            .enumerate()
        {
            buf[i].re = s * w;
        }
        fft.process(&mut buf);
        for (p, c) in power.iter_mut().zip(&buf[..n_bins]) {
            *p = c.norm_sqr();
        }
        for m in 0..cfg.n_mels {
            let energy: f64 = bank
                .row(m)
                .iter()
                .zip(&power)
                .map(|(w, p)| w * p)
                .sum();
            frames[[t, m]] = (energy + LOG_FLOOR).ln();
        }
    }
    let frame_times = (0..n_frames)
        .map(|t| (t * hop) as f64 / cfg.sample_rate as f64)
        .collect();
    Ok(Spectrogram {
        frames,
        frame_times,
    })
}

/// Zero-mean, unit-variance over the whole matrix. A near-constant matrix
/// is only centered.
pub fn standardize(spec: &Spectrogram) -> Spectrogram {
    let n = spec.frames.len().max(1) as f64;
    let mean = spec.frames.sum() / n;
    let var = spec.frames.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    let scale = if std < STD_EPSILON { 1.0 } else { std };
    Spectrogram {
        frames: spec.frames.mapv(|x| (x - mean) / scale),
        frame_times: spec.frame_times.clone(),
    }
}

/// Full feature recipe: log-mel followed by standardization.
pub fn extract(audio: &AudioSignal, cfg: &FeatureConfig) -> Result<Spectrogram> {
    log_mel_spectrogram(audio, cfg).map(|s| standardize(&s))
}

/// Writes `frames` as `CMTL` v1: magic, version, T, F (u32 LE), then
/// row-major f32 LE.
pub fn write_feature_file(path: &Path, frames: &Array2<f64>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    w.write_all(CACHE_MAGIC).map_err(io)?;
    w.write_u32::<LittleEndian>(CACHE_VERSION).map_err(io)?;
    w.write_u32::<LittleEndian>(frames.nrows() as u32).map_err(io)?;
    w.write_u32::<LittleEndian>(frames.ncols() as u32).map_err(io)?;
    for &x in frames.iter() {
        w.write_f32::<LittleEndian>(x as f32).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_feature_file(path: &Path) -> Result<Array2<f32>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let bad = |msg: &str| Error::FeatureFile(format!("{}: {msg}", path.display()));
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
    if &magic != CACHE_MAGIC {
        return Err(bad("bad magic"));
    }
    let version = r.read_u32::<LittleEndian>().map_err(|_| bad("truncated header"))?;
    if version != CACHE_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let t = r.read_u32::<LittleEndian>().map_err(|_| bad("truncated header"))? as usize;
    let f = r.read_u32::<LittleEndian>().map_err(|_| bad("truncated header"))? as usize;
    let mut data = vec![0f32; t * f];
    r.read_f32_into::<LittleEndian>(&mut data)
        .map_err(|_| bad("truncated data"))?;
    let mut rest = Vec::new();
    r.read_to_end(&mut rest).map_err(|e| Error::io(path, e))?;
    if !rest.is_empty() {
        return Err(bad("trailing bytes"));
    }
    Array2::from_shape_vec((t, f), data).map_err(|e| bad(&e.to_string()))
}
