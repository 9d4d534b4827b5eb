use rand::Rng;

use super::{check_channels, BlockConfig, Conv2d, Init};
use crate::autograd::{Tape, Var};
use crate::error::Result;
use crate::param::{ParamBuilder, ParamStore};
use crate::scalar::Scalar;

/// Squeeze-and-excitation gate: `x ⊙ σ(W₂·relu(W₁·gap(x)))`.
#[derive(Clone, Debug)]
pub struct ChannelAttention {
    channels: usize,
    squeeze: Conv2d,
    excite: Conv2d,
}

impl ChannelAttention {
    pub fn new<T: Scalar, R: Rng>(pb: &mut ParamBuilder<'_, T, R>, name: &str, cfg: &BlockConfig) -> Result<Self> {
        let mut pb = pb.scoped(name);
        let hidden = cfg.channels / cfg.reduction_ratio;
        Ok(ChannelAttention {
            channels: cfg.channels,
            squeeze: Conv2d::new(&mut pb, "squeeze", cfg.channels, hidden, 1, Init::Relu)?,
            excite: Conv2d::new(&mut pb, "excite", hidden, cfg.channels, 1, Init::Linear)?,
        })
    }

    pub fn param_count(cfg: &BlockConfig) -> usize {
        let hidden = cfg.channels / cfg.reduction_ratio;
        Conv2d::param_count(cfg.channels, hidden, 1) + Conv2d::param_count(hidden, cfg.channels, 1)
    }

    /// The `(n,c,1,1)` gate alone.
    pub fn gate<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        check_channels("channel_attention", self.channels, tape.shape(x).c)?;
        let s = tape.global_avg_pool(x)?;
        let s = self.squeeze.forward(tape, store, s)?;
        let s = tape.relu(s)?;
        let s = self.excite.forward(tape, store, s)?;
        tape.sigmoid(s)
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let s = self.gate(tape, store, x)?;
        tape.mul_broadcast(x, s)
    }
}

/// Per-pixel gate from channel-pooled maps: `x ⊙ σ(conv_k([mean_c(x), max_c(x)]))`.
#[derive(Clone, Debug)]
pub struct SpatialAttention {
    channels: usize,
    conv: Conv2d,
}

impl SpatialAttention {
    pub fn new<T: Scalar, R: Rng>(pb: &mut ParamBuilder<'_, T, R>, name: &str, cfg: &BlockConfig) -> Result<Self> {
        let mut pb = pb.scoped(name);
        Ok(SpatialAttention {
            channels: cfg.channels,
            conv: Conv2d::new(&mut pb, "conv", 2, 1, cfg.spatial_kernel, Init::Linear)?,
        })
    }

    pub fn param_count(cfg: &BlockConfig) -> usize {
        Conv2d::param_count(2, 1, cfg.spatial_kernel)
    }

    pub fn gate<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        check_channels("spatial_attention", self.channels, tape.shape(x).c)?;
        let avg = tape.channel_mean_map(x)?;
        let max = tape.channel_max_map(x)?;
        let pooled = tape.concat_channels(avg, max)?;
        let m = self.conv.forward(tape, store, pooled)?;
        tape.sigmoid(m)
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let m = self.gate(tape, store, x)?;
        tape.mul_broadcast(x, m)
    }
}
