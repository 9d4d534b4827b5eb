//! Teacher and student encoder-decoder networks.
//!
//! Both networks share one topology:
//!
//! ```text
//! up   = bicubic(lr → H×W)
//! x    = conv(up)                                  3 → C
//! enc  : stages × [fusion × B, keep skip, down]    tap after each down
//! mid  : fusion × B
//! dec  : stages × [up, FFB(x, skip), fusion × B]   tap after each up
//! sr   = conv(x) + up                              C → 3
//! ```
//!
//! The teacher's fusion is a [`Pfb`] fed with the parsing map, the student's
//! is an [`Rcag`]. With every weight zero both networks return `up` exactly.

mod checkpoint;
mod config;

pub use checkpoint::{read_header, CheckpointHeader, CHECKPOINT_MAGIC};
pub use config::NetConfig;

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, DownsampleBlock, Init, Ffb, Pfb, Rcag, UpsampleBlock};
use crate::param::{ParamBuilder, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum NetKind {
    Teacher,
    Student,
}

impl NetKind {
    pub fn as_str(self) -> &'static str {
        match self {
            NetKind::Teacher => "teacher",
            NetKind::Student => "student",
        }
    }
}

impl fmt::Display for NetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for NetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "teacher" => Ok(NetKind::Teacher),
            "student" => Ok(NetKind::Student),
            other => Err(Error::Config(format!("unknown network kind `{other}`"))),
        }
    }
}

#[derive(Clone, Debug)]
enum Fusion {
    Parsing(Pfb),
    Residual(Rcag),
}

#[derive(Clone, Debug)]
struct EncoderStage {
    fusions: Vec<Fusion>,
    down: DownsampleBlock,
}

#[derive(Clone, Debug)]
struct DecoderStage {
    up: UpsampleBlock,
    ffb: Option<Ffb>,
    fusions: Vec<Fusion>,
}

/// Output of a recorded forward pass: the SR image and the distillation taps
/// (one after every down/up block, in execution order).
#[derive(Clone, Debug)]
pub struct ForwardResult {
    pub sr: Var,
    pub taps: Vec<Var>,
}

/// Materialized [`ForwardResult`].
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction<T> {
    pub sr: Tensor<T>,
    pub taps: Vec<Tensor<T>>,
}

#[derive(Debug)]
pub struct Network<T> {
    kind: NetKind,
    cfg: NetConfig,
    store: ParamStore<T>,
    head: Conv2d,
    encoder: Vec<EncoderStage>,
    bottleneck: Vec<Fusion>,
    decoder: Vec<DecoderStage>,
    tail: Conv2d,
}

impl<T: Scalar> Network<T> {
    /// Builds and Kaiming-initializes a network from `cfg.seed`.
    pub fn new(kind: NetKind, cfg: &NetConfig) -> Result<Self> {
        cfg.validate()?;
        if cfg.element_mode != T::MODE {
            return Err(Error::Config(format!(
                "element_mode is {} but the network was instantiated as {}",
                cfg.element_mode,
                T::MODE
            )));
        }
        let block = cfg.block_config();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(kind as u64);
        let mut pb = ParamBuilder::new(&mut store, &mut rng);
        let c = cfg.base_channels;
        let use_pfb = kind == NetKind::Teacher && cfg.use_pfb;

        let make_fusions = |pb: &mut ParamBuilder<'_, T, ChaCha8Rng>, scope: &str| -> Result<Vec<Fusion>> {
            let mut pb = pb.scoped(scope);
            (0..cfg.blocks_per_stage)
                .map(|j| {
                    let name = format!("fuse{j}");
                    Ok(if use_pfb {
                        Fusion::Parsing(Pfb::new(&mut pb, &name, &block, cfg.n_classes)?)
                    } else {
                        Fusion::Residual(Rcag::new(&mut pb, &name, &block)?)
                    })
                })
                .collect()
        };

        let head = Conv2d::new(&mut pb, "head", 3, c, 3, Init::Linear)?;
        let mut encoder = Vec::with_capacity(cfg.stages);
        for i in 0..cfg.stages {
            let scope = format!("enc{i}");
            let fusions = make_fusions(&mut pb, &scope)?;
            let down = DownsampleBlock::new(&mut pb.scoped(&scope), "down", c)?;
            encoder.push(EncoderStage { fusions, down });
        }
        let bottleneck = make_fusions(&mut pb, "mid")?;
        let mut decoder = Vec::with_capacity(cfg.stages);
        for i in 0..cfg.stages {
            let scope = format!("dec{i}");
            let up = UpsampleBlock::new(&mut pb.scoped(&scope), "up", c)?;
            let ffb = if cfg.use_ffb {
                Some(Ffb::new(&mut pb.scoped(&scope), "ffb", &block)?)
            } else {
                None
            };
            let fusions = make_fusions(&mut pb, &scope)?;
            decoder.push(DecoderStage { up, ffb, fusions });
        }
        let tail = Conv2d::new(&mut pb, "tail", c, 3, 3, Init::Residual)?;
        Ok(Network {
            kind,
            cfg: cfg.clone(),
            store,
            head,
            encoder,
            bottleneck,
            decoder,
            tail,
        })
    }

    pub fn teacher(cfg: &NetConfig) -> Result<Self> {
        Self::new(NetKind::Teacher, cfg)
    }

    pub fn student(cfg: &NetConfig) -> Result<Self> {
        Self::new(NetKind::Student, cfg)
    }

    pub fn kind(&self) -> NetKind {
        self.kind
    }

    pub fn config(&self) -> &NetConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    /// Closed-form parameter count of a network built from `cfg`.
    pub fn param_count(kind: NetKind, cfg: &NetConfig) -> usize {
        let c = cfg.base_channels;
        let block = cfg.block_config();
        let fusion = if kind == NetKind::Teacher && cfg.use_pfb {
            Pfb::param_count(&block, cfg.n_classes)
        } else {
            Rcag::param_count(&block)
        };
        let ffb = if cfg.use_ffb { Ffb::param_count(&block) } else { 0 };
        Conv2d::param_count(3, c, 3)
            + Conv2d::param_count(c, 3, 3)
            + cfg.blocks_per_stage * fusion * (2 * cfg.stages + 1)
            + cfg.stages * (DownsampleBlock::param_count(c) + UpsampleBlock::param_count(c) + ffb)
    }

    /// Whether [`forward`](Self::forward) needs a parsing map.
    pub fn requires_parsing(&self) -> bool {
        self.kind == NetKind::Teacher && self.cfg.use_pfb
    }

    /// Records a forward pass on `tape`.
    ///
    /// `lr` is `(n, 3, h, w)`; the output is `(n, 3, h·scale, w·scale)`. A
    /// teacher with parsing fusion needs `parsing` of shape
    /// `(n, n_classes, h·scale, w·scale)`; the student accepts none.
    pub fn forward(&self, tape: &mut Tape<T>, lr: Var, parsing: Option<Var>) -> Result<ForwardResult> {
        self.forward_with(tape, &self.store, lr, parsing)
    }

    /// [`forward`](Self::forward) reading weights from `store`, which must
    /// have this network's layout (e.g. a perturbed clone of [`params`](Self::params)).
    pub fn forward_with(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        lr: Var,
        parsing: Option<Var>,
    ) -> Result<ForwardResult> {
        if store.len() != self.store.len() {
            return Err(Error::invalid("network", "parameter store has a different layout"));
        }
        let s = tape.shape(lr);
        if s.c != 3 {
            return Err(Error::shape("network", "input channels", 3, s.c));
        }
        let (hh, ww) = (s.h * self.cfg.scale, s.w * self.cfg.scale);
        let m = 1usize << self.cfg.stages;
        if hh == 0 || ww == 0 || hh % m != 0 || ww % m != 0 {
            return Err(Error::shape(
                "network",
                "output size",
                format!("multiple of {m} for {} stages", self.cfg.stages),
                format!("{hh}×{ww}"),
            ));
        }
        let parsing = match (self.kind, parsing) {
            (NetKind::Student, Some(_)) => {
                return Err(Error::invalid("network", "the student takes no parsing map"));
            }
            (NetKind::Teacher, None) if self.requires_parsing() => {
                return Err(Error::ParsingRequired {
                    n_classes: self.cfg.n_classes,
                });
            }
            (NetKind::Teacher, Some(p)) => {
                let ps = tape.shape(p);
                let want = Shape::new(s.n, self.cfg.n_classes, hh, ww);
                if ps != want {
                    return Err(Error::shape("network", "parsing shape", want, ps));
                }
                Some(p)
            }
            (_, None) => None,
        };

        let up = tape.bicubic_resize(lr, hh, ww)?;
        let mut x = self.head.forward(tape, store, up)?;
        let mut taps = Vec::with_capacity(2 * self.cfg.stages);
        let mut skips = Vec::with_capacity(self.cfg.stages);
        for stage in &self.encoder {
            x = self.fuse(tape, store, &stage.fusions, x, parsing)?;
            skips.push(x);
            x = stage.down.forward(tape, store, x)?;
            taps.push(x);
        }
        x = self.fuse(tape, store, &self.bottleneck, x, parsing)?;
        for stage in &self.decoder {
            x = stage.up.forward(tape, store, x)?;
            taps.push(x);
            let skip = skips.pop().expect("one skip per stage");
            if let Some(ffb) = &stage.ffb {
                x = ffb.forward(tape, store, x, skip)?;
            }
            x = self.fuse(tape, store, &stage.fusions, x, parsing)?;
        }
        let residual = self.tail.forward(tape, store, x)?;
        let sr = tape.add(up, residual)?;
        Ok(ForwardResult { sr, taps })
    }

    fn fuse(&self, tape: &mut Tape<T>, store: &ParamStore<T>, fusions: &[Fusion], mut x: Var, parsing: Option<Var>) -> Result<Var> {
        for f in fusions {
            x = match f {
                Fusion::Parsing(pfb) => {
                    let p = parsing.ok_or(Error::ParsingRequired {
                        n_classes: self.cfg.n_classes,
                    })?;
                    pfb.forward(tape, store, x, p)?
                }
                Fusion::Residual(rcag) => rcag.forward(tape, store, x)?,
            };
        }
        Ok(x)
    }

    /// Forward pass without gradient recording.
    pub fn predict(&self, lr: &Tensor<T>, parsing: Option<&Tensor<T>>) -> Result<Prediction<T>> {
        let mut tape = Tape::inference();
        let lv = tape.constant(lr.clone());
        let pv = parsing.map(|p| tape.constant(p.clone()));
        let out = self.forward(&mut tape, lv, pv)?;
        Ok(Prediction {
            sr: tape.value(out.sr).clone(),
            taps: out.taps.iter().map(|&t| tape.value(t).clone()).collect(),
        })
    }

    /// Writes the network (and optionally its Adam moments) to `path`.
    pub fn save(&self, path: impl AsRef<Path>, train_step: u64, with_moments: bool) -> Result<()> {
        checkpoint::save(self, path.as_ref(), train_step, with_moments)
    }

    /// Loads a checkpoint whose structure must match `expected`.
    ///
    /// Returns the network and the recorded training step.
    pub fn load(path: impl AsRef<Path>, expected: &NetConfig) -> Result<(Self, u64)> {
        checkpoint::load(path.as_ref(), Some(expected))
    }

    /// Loads a checkpoint, taking the configuration from its header.
    pub fn load_any(path: impl AsRef<Path>) -> Result<(Self, u64)> {
        checkpoint::load(path.as_ref(), None)
    }
}

impl<T: Scalar> Clone for Network<T> {
    fn clone(&self) -> Self {
        Network {
            kind: self.kind,
            cfg: self.cfg.clone(),
            store: self.store.clone(),
            head: self.head.clone(),
            encoder: self.encoder.clone(),
            bottleneck: self.bottleneck.clone(),
            decoder: self.decoder.clone(),
            tail: self.tail.clone(),
        }
    }
}
