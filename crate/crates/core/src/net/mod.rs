//! From-scratch 3D segmentation network with explicit backward passes.

pub mod checkpoint;
pub mod ddsp;
pub mod layers;
pub mod model;
pub mod tensor;

use std::path::PathBuf;

use thiserror::Error;

use crate::volgrid::Dims;

pub use checkpoint::{decode_checkpoint_into, encode_checkpoint, read_checkpoint_into, write_checkpoint};
pub use ddsp::{global_pyramid_pool, DdspBlock, DdspConfig, Wiring};
pub use layers::{Mode, Module, Param};
pub use model::{fuse_outputs, BlockKind, FusionMask, Heads, LongConnection, Net, NetCache, NetConfig};
pub use tensor::{Scalar, Tensor5};

#[derive(Debug, Error)]
pub enum NetError {
    #[error("expected {expected} input channels, got {found}")]
    ChannelMismatch { expected: usize, found: usize },
    #[error("kernel size {0} is even; only odd kernels keep same padding")]
    EvenKernel(usize),
    #[error("dilated kernel (dilation {dilation}) exceeds padded input {dims}")]
    KernelTooLarge { dims: Dims, dilation: usize },
    #[error("input dims {0} are not divisible by 4")]
    IndivisibleDims(Dims),
    #[error("invalid network config: {0}")]
    InvalidConfig(String),
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
    #[error("{0}: {1}")]
    Io(PathBuf, #[source] std::io::Error),
}
