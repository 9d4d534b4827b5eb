//! Differentiable building blocks of the teacher and student networks.
//!
//! Blocks hold only [`ParamId`](crate::ParamId)s; their weights live in a
//! [`ParamStore`](crate::ParamStore) supplied at forward time, so a block is
//! immutable after construction and independent of the element type.

mod attention;
mod conv;
mod fusion;
mod residual;
mod sampling;

pub use attention::{ChannelAttention, SpatialAttention};
pub use conv::{Conv2d, Init};
pub use fusion::{Ffb, Pfb, ProjectionFunction};
pub use residual::{Rcab, Rcag};
pub use sampling::{DownsampleBlock, UpsampleBlock};

use crate::error::{Error, Result};

/// Architectural free parameters shared by all blocks of one network.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockConfig {
    pub channels: usize,
    /// Channel-attention squeeze ratio.
    pub reduction_ratio: usize,
    /// Kernel of the spatial-attention conv.
    pub spatial_kernel: usize,
    pub rcab_per_group: usize,
}

impl Default for BlockConfig {
    fn default() -> Self {
        BlockConfig {
            channels: 16,
            reduction_ratio: 4,
            spatial_kernel: 7,
            rcab_per_group: 2,
        }
    }
}

impl BlockConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.reduction_ratio == 0 || self.channels % self.reduction_ratio != 0 {
            return Err(Error::Config(format!(
                "channels ({}) must be a positive multiple of reduction_ratio ({})",
                self.channels, self.reduction_ratio
            )));
        }
        if self.spatial_kernel % 2 == 0 {
            return Err(Error::Config(format!("spatial_kernel must be odd, got {}", self.spatial_kernel)));
        }
        if self.rcab_per_group == 0 {
            return Err(Error::Config("rcab_per_group must be at least 1".into()));
        }
        Ok(())
    }
}

pub(crate) fn check_channels(op: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::shape(op, "channels", expected, got));
    }
    Ok(())
}
