//! Differentiable building blocks for the segmentation network.
//!
//! Every forward function returns its output together with a context value
//! that the matching backward function consumes. Contexts are moved into the
//! backward call, so each forward can be differentiated at most once.

mod activation;
mod concat;
mod conv;
mod conv_kernel;
pub mod gradcheck;
mod resample;

use thiserror::Error;

use crate::voxelgrid::Dims5;

pub use activation::{relu, relu_backward, softmax_backward, softmax_channels, ReluContext, SoftmaxContext};
pub use concat::{concat_channels, concat_channels_backward, ConcatContext};
pub use conv::{conv3d, conv3d_backward, conv3d_backward_kernel, ConvContext, ConvKernel, KERNEL_VOLUME};
pub use gradcheck::{gradient_check, GradCheckReport};
pub use resample::{maxpool2, maxpool2_backward, upsample2, upsample2_backward, PoolContext, UpsampleContext};

#[derive(Debug, Error, PartialEq)]
pub enum OpError {
    #[error("channel mismatch: input has {input} channels, kernel expects {kernel}")]
    ChannelMismatch { input: usize, kernel: usize },
    #[error("shape mismatch in {op}: expected {expected}, got {found}")]
    ShapeMismatch { op: &'static str, expected: Dims5, found: Dims5 },
    #[error("max-pool needs even spatial extents, got {0:?}")]
    OddExtent([usize; 3]),
    #[error("softmax needs at least 2 channels, got {0}")]
    TooFewChannels(usize),
    #[error("kernel buffers do not match {out_channels}x{in_channels}x3x3x3")]
    BadKernel { out_channels: usize, in_channels: usize },
    #[error("function returned non-finite value {value} at perturbation of index {index}")]
    NonFinite { index: usize, value: f64 },
    #[error("gradient has {found} entries, point has {expected}")]
    GradientLength { expected: usize, found: usize },
}

pub(crate) fn check_dims(op: &'static str, expected: Dims5, found: Dims5) -> Result<(), OpError> {
    if expected != found {
        return Err(OpError::ShapeMismatch { op, expected, found });
    }
    Ok(())
}
