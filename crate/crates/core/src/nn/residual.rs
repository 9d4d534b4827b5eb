use rand::Rng;

use super::{check_channels, BlockConfig, ChannelAttention, Conv2d, Init};
use crate::autograd::{Tape, Var};
use crate::error::Result;
use crate::param::{ParamBuilder, ParamStore};
use crate::scalar::Scalar;

/// Residual channel attention block: `x + CA(conv₂(relu(conv₁(x))))`.
#[derive(Clone, Debug)]
pub struct Rcab {
    channels: usize,
    conv1: Conv2d,
    conv2: Conv2d,
    attention: ChannelAttention,
}

impl Rcab {
    pub fn new<T: Scalar, R: Rng>(pb: &mut ParamBuilder<'_, T, R>, name: &str, cfg: &BlockConfig) -> Result<Self> {
        let mut pb = pb.scoped(name);
        let c = cfg.channels;
        Ok(Rcab {
            channels: c,
            conv1: Conv2d::new(&mut pb, "conv1", c, c, 3, Init::Relu)?,
            conv2: Conv2d::new(&mut pb, "conv2", c, c, 3, Init::Residual)?,
            attention: ChannelAttention::new(&mut pb, "ca", cfg)?,
        })
    }

    pub fn param_count(cfg: &BlockConfig) -> usize {
        2 * Conv2d::param_count(cfg.channels, cfg.channels, 3) + ChannelAttention::param_count(cfg)
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        check_channels("rcab", self.channels, tape.shape(x).c)?;
        let y = self.conv1.forward(tape, store, x)?;
        let y = tape.relu(y)?;
        let y = self.conv2.forward(tape, store, y)?;
        let y = self.attention.forward(tape, store, y)?;
        tape.add(x, y)
    }
}

/// Residual group: `x + conv(rcab_B(…rcab_1(x)…))`.
#[derive(Clone, Debug)]
pub struct Rcag {
    channels: usize,
    blocks: Vec<Rcab>,
    conv: Conv2d,
}

impl Rcag {
    pub fn new<T: Scalar, R: Rng>(pb: &mut ParamBuilder<'_, T, R>, name: &str, cfg: &BlockConfig) -> Result<Self> {
        let mut pb = pb.scoped(name);
        let blocks = (0..cfg.rcab_per_group)
            .map(|i| Rcab::new(&mut pb, &format!("rcab{i}"), cfg))
            .collect::<Result<_>>()?;
        Ok(Rcag {
            channels: cfg.channels,
            blocks,
            conv: Conv2d::new(&mut pb, "conv", cfg.channels, cfg.channels, 3, Init::Residual)?,
        })
    }

    pub fn param_count(cfg: &BlockConfig) -> usize {
        cfg.rcab_per_group * Rcab::param_count(cfg) + Conv2d::param_count(cfg.channels, cfg.channels, 3)
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        check_channels("rcag", self.channels, tape.shape(x).c)?;
        let mut y = x;
        for block in &self.blocks {
            y = block.forward(tape, store, y)?;
        }
        let y = self.conv.forward(tape, store, y)?;
        tape.add(x, y)
    }
}
