use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::error::Result;
use crate::param::{ParamBuilder, ParamId, ParamStore};
use crate::scalar::Scalar;

/// Weight initialization, all `N(0, std²)` with `fan_in = in·k²`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// `std = √(2/fan_in)`, for convs feeding a relu.
    Relu,
    /// `std = √(1/fan_in)`, for convs with a linear or sigmoid consumer.
    Linear,
    /// `std = 0.1·√(1/fan_in)`, for the last conv of a residual branch so
    /// stacked branches start close to the identity.
    Residual,
}

impl Init {
    pub fn std(self, fan_in: usize) -> f64 {
        let base = (1.0 / fan_in as f64).sqrt();
        match self {
            Init::Relu => base * std::f64::consts::SQRT_2,
            Init::Linear => base,
            Init::Residual => 0.1 * base,
        }
    }
}

/// Stride-1, same-padded convolution with bias.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

impl Conv2d {
    pub fn new<T: Scalar, R: Rng>(
        pb: &mut ParamBuilder<'_, T, R>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        init: Init,
    ) -> Result<Self> {
        let mut pb = pb.scoped(name);
        let std = init.std(in_channels * kernel * kernel);
        let weight = pb.normal("w", (out_channels, in_channels, kernel, kernel), std)?;
        let bias = pb.zeros("b", (out_channels, 1, 1, 1))?;
        Ok(Conv2d {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
        })
    }

    /// `out·in·k² + out`.
    pub const fn param_count(in_channels: usize, out_channels: usize, kernel: usize) -> usize {
        out_channels * in_channels * kernel * kernel + out_channels
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        tape.conv2d(x, w, b, 1, self.kernel / 2)
    }
}
