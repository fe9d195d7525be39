//! Gated PixelCNN: autoregressive image models built from masked
//! convolutions, with conditioning, training, sampling and architecture
//! diagnostics.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod conv;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod layers;
pub mod mask;
pub mod model;
pub mod params;
pub mod rng;
pub mod sampler;
pub mod tensor;
pub mod train;

pub use autodiff::{BackwardFault, Gradients, ShiftDir, Tape, Var};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use conv::Pad;
pub use data::{CondSource, Dataset, QuantizationSpec, SyntheticKind};
pub use diagnostics::{
    blind_spot_oracle, causality_check, gradient_audit, receptive_field_map, AuditLoss, AuditOptions, DependencyMap, Method,
};
pub use error::{Error, Result};
pub use layers::{Activation, Architecture, Conditioning, Residual};
pub use mask::{build_mask, MaskSpec, MaskType};
pub use model::{
    nll_bits_per_dim, Autoregressive, CondMode, Encoder, Fault, GatedPixelCNN, ModelConfig, PixelCNNAutoencoder,
};
pub use params::{ParamId, ParamStore};
pub use rng::{Rng, RngState};
pub use sampler::{complete, sample, sample_interpolation, SampleOptions, Samples};
pub use tensor::Tensor;
pub use train::{fit, train_step, OptimizerKind, OptimizerState, TrainConfig};
