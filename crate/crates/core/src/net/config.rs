use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Conv2d { kernel: [usize; 2], stride: [usize; 2] },
    Reshape,
    Conv1d { kernel: usize },
    Dense,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    ClippedRelu,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    /// Output channels; ignored for reshape.
    pub filters: usize,
    pub activation: Activation,
    pub dropout: f64,
    pub batch_norm: bool,
}

impl LayerSpec {
    fn conv2d(name: &str, kernel: [usize; 2], stride: [usize; 2], filters: usize) -> Self {
        Self {
            name: name.into(),
            kind: LayerKind::Conv2d { kernel, stride },
            filters,
            activation: Activation::ClippedRelu,
            dropout: CONV_DROPOUT,
            batch_norm: true,
        }
    }

    fn conv1d(name: &str, kernel: usize, filters: usize) -> Self {
        Self {
            name: name.into(),
            kind: LayerKind::Conv1d { kernel },
            filters,
            activation: Activation::ClippedRelu,
            dropout: CONV_DROPOUT,
            batch_norm: true,
        }
    }

    fn dense(name: &str, filters: usize) -> Self {
        Self {
            name: name.into(),
            kind: LayerKind::Dense,
            filters,
            activation: Activation::ClippedRelu,
            dropout: DENSE_DROPOUT,
            batch_norm: true,
        }
    }

    fn reshape() -> Self {
        Self {
            name: "reshape-conv2d-to-conv1d".into(),
            kind: LayerKind::Reshape,
            filters: 0,
            activation: Activation::None,
            dropout: 0.0,
            batch_norm: false,
        }
    }

    /// Output head: dense, no normalization, activation or dropout.
    pub fn head(name: &str, units: usize) -> Self {
        Self {
            name: name.into(),
            kind: LayerKind::Dense,
            filters: units,
            activation: Activation::None,
            dropout: 0.0,
            batch_norm: false,
        }
    }

    /// Kernel and stride in (time, frequency) for spatial layers.
    pub fn geometry(&self) -> Option<([usize; 2], [usize; 2])> {
        match self.kind {
            LayerKind::Conv2d { kernel, stride } => Some((kernel, stride)),
            LayerKind::Conv1d { kernel } => Some(([kernel, 1], [1, 1])),
            LayerKind::Dense => Some(([1, 1], [1, 1])),
            LayerKind::Reshape => None,
        }
    }
}

pub const CONV_DROPOUT: f64 = 0.2;
pub const DENSE_DROPOUT: f64 = 0.4;
pub const RELU_CLIP: f64 = 20.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    #[default]
    Desk,
    Paper,
}

impl std::str::FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Preset::Desk),
            "paper" => Ok(Preset::Paper),
            other => Err(Error::Config(format!("unknown preset {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Heads {
    #[default]
    Both,
    Word,
    Char,
}

impl Heads {
    pub fn has_word(self) -> bool {
        matches!(self, Heads::Both | Heads::Word)
    }

    pub fn has_char(self) -> bool {
        matches!(self, Heads::Both | Heads::Char)
    }
}

impl std::str::FromStr for Heads {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "both" | "mtl" => Ok(Heads::Both),
            "word" => Ok(Heads::Word),
            "char" => Ok(Heads::Char),
            other => Err(Error::Config(format!("unknown heads {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub preset: Preset,
    pub input_features: usize,
    pub trunk: Vec<LayerSpec>,
    pub char_dim: usize,
    pub word_dim: usize,
    pub char_blank: usize,
    pub word_blank: usize,
    pub heads: Heads,
    pub relu_clip: f64,
    pub bn_momentum: f64,
    pub bn_epsilon: f64,
}

/// `[time, frequency, channels]`.
pub type Shape = [usize; 3];

pub fn same_out(len: usize, stride: usize) -> usize {
    len.div_ceil(stride)
}

/// Padding before the first element for "same" convolution.
pub fn same_pad_before(len: usize, kernel: usize, stride: usize) -> usize {
    let out = same_out(len, stride);
    let total = ((out - 1) * stride + kernel).saturating_sub(len);
    total / 2
}

impl NetworkConfig {
    fn with_trunk(preset: Preset, trunk: Vec<LayerSpec>, char_dim: usize, word_dim: usize) -> Self {
        Self {
            preset,
            input_features: 40,
            trunk,
            char_dim,
            word_dim,
            char_blank: char_dim.saturating_sub(1),
            word_blank: word_dim.saturating_sub(1),
            heads: Heads::Both,
            relu_clip: RELU_CLIP,
            bn_momentum: 0.9,
            bn_epsilon: 1e-5,
        }
    }

    /// Reduced trunk with the same layout: one time-striding 2-D layer,
    /// frequency-striding 2-D layers, a 1-D trunk and a dense layer shared
    /// by both heads.
    pub fn desk(char_dim: usize, word_dim: usize) -> Self {
        Self::with_trunk(
            Preset::Desk,
            vec![
                LayerSpec::conv2d("conv2d", [11, 15], [2, 2], 16),
                LayerSpec::conv2d("conv2d-1", [11, 7], [1, 2], 16),
                LayerSpec::reshape(),
                LayerSpec::conv1d("conv1d", 7, 64),
                LayerSpec::conv1d("conv1d-1", 7, 64),
                LayerSpec::conv1d("conv1d-2", 16, 128),
                LayerSpec::dense("dense", 128),
            ],
            char_dim,
            word_dim,
        )
    }

    /// Full-size architecture.
    pub fn paper(char_dim: usize, word_dim: usize) -> Self {
        let mut trunk = vec![
            LayerSpec::conv2d("conv2d", [11, 15], [2, 2], 64),
            LayerSpec::conv2d("conv2d-1", [11, 7], [1, 2], 64),
            LayerSpec::conv2d("conv2d-2", [11, 7], [1, 2], 192),
            LayerSpec::reshape(),
        ];
        for i in 0..7 {
            let name = if i == 0 { "conv1d".to_string() } else { format!("conv1d-{i}") };
            trunk.push(LayerSpec::conv1d(&name, 7, 256));
        }
        trunk.push(LayerSpec::conv1d("conv1d-7", 32, 2048));
        trunk.push(LayerSpec::dense("dense", 2048));
        Self::with_trunk(Preset::Paper, trunk, char_dim, word_dim)
    }

    pub fn for_preset(preset: Preset, char_dim: usize, word_dim: usize) -> Self {
        match preset {
            Preset::Desk => Self::desk(char_dim, word_dim),
            Preset::Paper => Self::paper(char_dim, word_dim),
        }
    }

    pub fn head_specs(&self) -> (LayerSpec, LayerSpec) {
        (
            LayerSpec::head("char-head", self.char_dim),
            LayerSpec::head("word-head", self.word_dim),
        )
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.input_features == 0 {
            return bad("input_features must be positive".into());
        }
        if self.heads.has_char() && self.char_dim < 2 {
            return bad("char head needs at least 2 units".into());
        }
        if self.heads.has_word() && self.word_dim < 2 {
            return bad("word head needs at least 2 units".into());
        }
        if self.char_blank >= self.char_dim.max(1) || self.word_blank >= self.word_dim.max(1) {
            return bad("blank index out of range".into());
        }
        for l in &self.trunk {
            if !(0.0..1.0).contains(&l.dropout) {
                return bad(format!("layer {}: dropout must be in [0, 1)", l.name));
            }
            if let Some((k, s)) = l.geometry() {
                if k.contains(&0) || s.contains(&0) || l.filters == 0 {
                    return bad(format!("layer {}: kernel, stride and filters must be positive", l.name));
                }
            }
        }
        if !matches!(self.trunk.last().map(|l| l.kind), Some(LayerKind::Dense)) {
            return bad("trunk must end in a dense layer".into());
        }
        self.layer_shapes(16).map(|_| ())
    }

    /// Output shape after every trunk layer for `frames` input frames.
    pub fn layer_shapes(&self, frames: usize) -> Result<Vec<(String, Shape)>> {
        let mut shape = [frames, self.input_features, 1];
        let mut out = Vec::with_capacity(self.trunk.len());
        for l in &self.trunk {
            shape = match l.kind {
                LayerKind::Reshape => [shape[0], 1, shape[1] * shape[2]],
                LayerKind::Conv2d { stride, .. } => {
                    [same_out(shape[0], stride[0]), same_out(shape[1], stride[1]), l.filters]
                }
                LayerKind::Conv1d { .. } | LayerKind::Dense => {
                    if shape[1] != 1 {
                        return Err(Error::Shape {
                            layer: l.name.clone(),
                            detail: format!("expects [time, 1, channels], got {shape:?}"),
                        });
                    }
                    [shape[0], 1, l.filters]
                }
            };
            out.push((l.name.clone(), shape));
        }
        Ok(out)
    }

    /// Number of output frames for `frames` input frames.
    pub fn output_frames(&self, frames: usize) -> usize {
        self.trunk.iter().fold(frames, |t, l| match l.kind {
            LayerKind::Conv2d { stride, .. } => same_out(t, stride[0]),
            _ => t,
        })
    }
}
