use rand::Rng;

use super::{check_channels, BlockConfig, ChannelAttention, Conv2d, Init, SpatialAttention};
use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::param::{ParamBuilder, ParamStore};
use crate::scalar::Scalar;

/// Parsing map fusion block.
///
/// 1. resize the parsing planes to the feature size (nearest neighbour);
/// 2. project parsing (`n_classes → c`) and feature (`c → c`) with 3×3 convs;
/// 3. fuse the concatenated projections (`2c → c`);
/// 4. gate the fused map with channel and spatial attention in parallel;
/// 5. fuse the concatenated branch outputs (`2c → c`);
/// 6. add the result to the incoming feature.
#[derive(Clone, Debug)]
pub struct Pfb {
    channels: usize,
    n_classes: usize,
    proj_parsing: Conv2d,
    proj_feature: Conv2d,
    fuse_in: Conv2d,
    channel_att: ChannelAttention,
    spatial_att: SpatialAttention,
    fuse_out: Conv2d,
}

impl Pfb {
    pub fn new<T: Scalar, R: Rng>(
        pb: &mut ParamBuilder<'_, T, R>,
        name: &str,
        cfg: &BlockConfig,
        n_classes: usize,
    ) -> Result<Self> {
        let mut pb = pb.scoped(name);
        let c = cfg.channels;
        Ok(Pfb {
            channels: c,
            n_classes,
            proj_parsing: Conv2d::new(&mut pb, "proj_parsing", n_classes, c, 3, Init::Linear)?,
            proj_feature: Conv2d::new(&mut pb, "proj_feature", c, c, 3, Init::Linear)?,
            fuse_in: Conv2d::new(&mut pb, "fuse_in", 2 * c, c, 3, Init::Linear)?,
            channel_att: ChannelAttention::new(&mut pb, "ca", cfg)?,
            spatial_att: SpatialAttention::new(&mut pb, "sa", cfg)?,
            fuse_out: Conv2d::new(&mut pb, "fuse_out", 2 * c, c, 3, Init::Residual)?,
        })
    }

    pub fn param_count(cfg: &BlockConfig, n_classes: usize) -> usize {
        let c = cfg.channels;
        Conv2d::param_count(n_classes, c, 3)
            + Conv2d::param_count(c, c, 3)
            + 2 * Conv2d::param_count(2 * c, c, 3)
            + ChannelAttention::param_count(cfg)
            + SpatialAttention::param_count(cfg)
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, f: Var, parsing: Var) -> Result<Var> {
        let fs = tape.shape(f);
        let ps = tape.shape(parsing);
        check_channels("pfb", self.channels, fs.c)?;
        if ps.c != self.n_classes {
            return Err(Error::shape("pfb", "parsing classes", self.n_classes, ps.c));
        }
        if ps.n != fs.n {
            return Err(Error::shape("pfb", "batch", fs.n, ps.n));
        }
        let p = tape.nearest_resize(parsing, fs.h, fs.w)?;
        let a = self.proj_parsing.forward(tape, store, p)?;
        let b = self.proj_feature.forward(tape, store, f)?;
        let ab = tape.concat_channels(a, b)?;
        let fused = self.fuse_in.forward(tape, store, ab)?;
        let ca = self.channel_att.forward(tape, store, fused)?;
        let sa = self.spatial_att.forward(tape, store, fused)?;
        let both = tape.concat_channels(ca, sa)?;
        let e = self.fuse_out.forward(tape, store, both)?;
        tape.add(f, e)
    }
}

/// Error-feedback refiner: `conv₂(relu(conv₁(e)))`.
#[derive(Clone, Debug)]
pub struct ProjectionFunction {
    channels: usize,
    conv1: Conv2d,
    conv2: Conv2d,
}

impl ProjectionFunction {
    pub fn new<T: Scalar, R: Rng>(pb: &mut ParamBuilder<'_, T, R>, name: &str, channels: usize) -> Result<Self> {
        let mut pb = pb.scoped(name);
        Ok(ProjectionFunction {
            channels,
            conv1: Conv2d::new(&mut pb, "conv1", channels, channels, 3, Init::Relu)?,
            conv2: Conv2d::new(&mut pb, "conv2", channels, channels, 3, Init::Residual)?,
        })
    }

    pub fn param_count(channels: usize) -> usize {
        2 * Conv2d::param_count(channels, channels, 3)
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, e: Var) -> Result<Var> {
        check_channels("projection_function", self.channels, tape.shape(e).c)?;
        let y = self.conv1.forward(tape, store, e)?;
        let y = tape.relu(y)?;
        self.conv2.forward(tape, store, y)
    }
}

/// Feature fusion block: `CA(f + PF(f − f_prev))` with `f_prev` a retained
/// feature at the same resolution.
#[derive(Clone, Debug)]
pub struct Ffb {
    projection: ProjectionFunction,
    attention: ChannelAttention,
}

impl Ffb {
    pub fn new<T: Scalar, R: Rng>(pb: &mut ParamBuilder<'_, T, R>, name: &str, cfg: &BlockConfig) -> Result<Self> {
        let mut pb = pb.scoped(name);
        Ok(Ffb {
            projection: ProjectionFunction::new(&mut pb, "pf", cfg.channels)?,
            attention: ChannelAttention::new(&mut pb, "ca", cfg)?,
        })
    }

    pub fn param_count(cfg: &BlockConfig) -> usize {
        ProjectionFunction::param_count(cfg.channels) + ChannelAttention::param_count(cfg)
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, f: Var, f_prev: Var) -> Result<Var> {
        let (a, b) = (tape.shape(f), tape.shape(f_prev));
        if a != b {
            return Err(Error::shape("ffb", "retained feature shape", a, b));
        }
        let diff = tape.sub(f, f_prev)?;
        let refined = self.projection.forward(tape, store, diff)?;
        let y = tape.add(f, refined)?;
        self.attention.forward(tape, store, y)
    }
}
