//! Convolutional CTC acoustic model with a shared trunk and two output heads.

mod adam;
mod config;
mod layer;
mod model;
mod params;
mod train;

pub use adam::{AdamConfig, AdamState};
pub use config::{
    same_out, same_pad_before, Activation, Heads, LayerKind, LayerSpec, NetworkConfig, Preset, Shape,
    CONV_DROPOUT, DENSE_DROPOUT, RELU_CLIP,
};
pub use layer::Mode;
pub use model::{mtl_loss, BatchLoss, Forward, HeadPosteriors, Model, MtlWeight, Targets};
pub use params::{ParamSet, Real, Tensor};
pub use train::{metrics_csv, transcribe, EpochReport, TrainConfig, Trainer, Recognized, Transcripts, Validation, METRICS_HEADER};
