//! Residual CNN family with exact reverse-mode gradients of the scalar
//! output.
//!
//! Blocks use full pre-activation: `S_k = shortcut(S_{k-1}) + conv2(act(conv1(act(S_{k-1}))))`,
//! so a block whose convolutions are zero passes its input through
//! unchanged. The head is global average pooling over `act(S_K)` followed
//! by dense layers down to one scalar.

mod arch;
mod checkpoint;
pub(crate) mod network;
mod params;
mod real;

pub use arch::{
    Activation, ArchConfig, BlockSpec, ConvSpec, HeadSpec, InitScheme, OutputKind, Preset,
};
pub use checkpoint::{Checkpoint, CheckpointMeta, Precision};
pub use network::{FeatureMaps, Network, StageGrad};
pub use params::{GradVector, ModelParams, Segment};
pub use real::Real;

