use rand::Rng;

use super::{check_channels, Conv2d, Init};
use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::param::{ParamBuilder, ParamStore};
use crate::scalar::Scalar;

/// Halves resolution: `conv₃ₓ₃(pixel_unshuffle(x, 2))`, 4c → c channels.
#[derive(Clone, Debug)]
pub struct DownsampleBlock {
    channels: usize,
    conv: Conv2d,
}

impl DownsampleBlock {
    pub fn new<T: Scalar, R: Rng>(pb: &mut ParamBuilder<'_, T, R>, name: &str, channels: usize) -> Result<Self> {
        let mut pb = pb.scoped(name);
        Ok(DownsampleBlock {
            channels,
            conv: Conv2d::new(&mut pb, "conv", 4 * channels, channels, 3, Init::Linear)?,
        })
    }

    pub fn param_count(channels: usize) -> usize {
        Conv2d::param_count(4 * channels, channels, 3)
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let s = tape.shape(x);
        check_channels("downsample_block", self.channels, s.c)?;
        if s.h % 2 != 0 || s.w % 2 != 0 {
            return Err(Error::shape("downsample_block", "spatial size", "even height and width", s));
        }
        let y = tape.pixel_unshuffle(x, 2)?;
        self.conv.forward(tape, store, y)
    }
}

/// Doubles resolution: `pixel_shuffle(conv₃ₓ₃(x), 2)`, c → 4c → c channels.
#[derive(Clone, Debug)]
pub struct UpsampleBlock {
    channels: usize,
    conv: Conv2d,
}

impl UpsampleBlock {
    pub fn new<T: Scalar, R: Rng>(pb: &mut ParamBuilder<'_, T, R>, name: &str, channels: usize) -> Result<Self> {
        let mut pb = pb.scoped(name);
        Ok(UpsampleBlock {
            channels,
            conv: Conv2d::new(&mut pb, "conv", channels, 4 * channels, 3, Init::Linear)?,
        })
    }

    pub fn param_count(channels: usize) -> usize {
        Conv2d::param_count(channels, 4 * channels, 3)
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        check_channels("upsample_block", self.channels, tape.shape(x).c)?;
        let y = self.conv.forward(tape, store, x)?;
        tape.pixel_shuffle(y, 2)
    }
}
