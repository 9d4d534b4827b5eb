use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::nn::BlockConfig;
use crate::scalar::ElementMode;

/// Architecture and loss weights shared by a teacher/student pair.
#[derive(Clone, Debug, PartialEq)]
pub struct NetConfig {
    pub base_channels: usize,
    /// Number of down/up levels.
    pub stages: usize,
    /// Fusion blocks (PFB or RCAG) per encoder stage, bottleneck and decoder stage.
    pub blocks_per_stage: usize,
    /// Parsing planes fed to the teacher.
    pub n_classes: usize,
    /// Super-resolution factor.
    pub scale: usize,
    pub lambda_ts: f64,
    pub lambda_fs: f64,
    pub rcab_per_group: usize,
    pub reduction_ratio: usize,
    pub spatial_kernel: usize,
    pub element_mode: ElementMode,
    /// Teacher fusion uses parsing maps; when false the teacher uses RCAGs.
    pub use_pfb: bool,
    pub use_ffb: bool,
    pub seed: u64,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig::desk()
    }
}

impl NetConfig {
    /// Small preset for laptop-scale training: 32×32 targets at ×4.
    pub fn desk() -> Self {
        NetConfig {
            base_channels: 16,
            stages: 2,
            blocks_per_stage: 1,
            n_classes: 4,
            scale: 4,
            lambda_ts: 1.0,
            lambda_fs: 0.05,
            rcab_per_group: 2,
            reduction_ratio: 4,
            spatial_kernel: 7,
            element_mode: ElementMode::F32,
            use_pfb: true,
            use_ffb: true,
            seed: 0,
        }
    }

    /// Gradient-check preset (64-bit).
    pub fn toy() -> Self {
        NetConfig {
            base_channels: 8,
            element_mode: ElementMode::F64,
            ..NetConfig::desk()
        }
    }

    /// 128×128 targets from 16×16 inputs with 19 parsing classes.
    pub fn full() -> Self {
        NetConfig {
            base_channels: 64,
            stages: 3,
            scale: 8,
            n_classes: 19,
            reduction_ratio: 16,
            ..NetConfig::desk()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "toy" => Ok(Self::toy()),
            "full" => Ok(Self::full()),
            other => Err(Error::Config(format!("unknown preset `{other}` (expected desk, toy or full)"))),
        }
    }

    pub fn block_config(&self) -> BlockConfig {
        BlockConfig {
            channels: self.base_channels,
            reduction_ratio: self.reduction_ratio,
            spatial_kernel: self.spatial_kernel,
            rcab_per_group: self.rcab_per_group,
        }
    }

    /// High-resolution sizes must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        (1usize << self.stages).max(self.scale)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages == 0 || self.stages > 8 {
            return Err(Error::Config(format!("stages must be in 1..=8, got {}", self.stages)));
        }
        if self.blocks_per_stage == 0 {
            return Err(Error::Config("blocks_per_stage must be at least 1".into()));
        }
        if self.scale < 2 || !self.scale.is_power_of_two() {
            return Err(Error::Config(format!("scale must be a power of two ≥ 2, got {}", self.scale)));
        }
        if self.n_classes == 0 {
            return Err(Error::Config("n_classes must be at least 1".into()));
        }
        for (name, v) in [("lambda_ts", self.lambda_ts), ("lambda_fs", self.lambda_fs)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} must be finite and ≥ 0, got {v}")));
            }
        }
        self.block_config().validate()
    }

    /// `key=value` lines for every field, in a fixed order.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("base_channels", self.base_channels.to_string()),
            ("stages", self.stages.to_string()),
            ("blocks_per_stage", self.blocks_per_stage.to_string()),
            ("n_classes", self.n_classes.to_string()),
            ("scale", self.scale.to_string()),
            ("lambda_ts", fmt_f64(self.lambda_ts)),
            ("lambda_fs", fmt_f64(self.lambda_fs)),
            ("rcab_per_group", self.rcab_per_group.to_string()),
            ("reduction_ratio", self.reduction_ratio.to_string()),
            ("spatial_kernel", self.spatial_kernel.to_string()),
            ("element_mode", self.element_mode.to_string()),
            ("use_pfb", self.use_pfb.to_string()),
            ("use_ffb", self.use_ffb.to_string()),
            ("seed", self.seed.to_string()),
        ]
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.to_pairs() {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    pub const KEYS: &'static [&'static str] = &[
        "base_channels",
        "stages",
        "blocks_per_stage",
        "n_classes",
        "scale",
        "lambda_ts",
        "lambda_fs",
        "rcab_per_group",
        "reduction_ratio",
        "spatial_kernel",
        "element_mode",
        "use_pfb",
        "use_ffb",
        "seed",
    ];

    /// Sets one field from its textual form. Returns `Ok(false)` for keys
    /// that are not network fields.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        let v = value.trim();
        match key {
            "base_channels" => self.base_channels = parse(key, v)?,
            "stages" => self.stages = parse(key, v)?,
            "blocks_per_stage" => self.blocks_per_stage = parse(key, v)?,
            "n_classes" => self.n_classes = parse(key, v)?,
            "scale" => self.scale = parse(key, v)?,
            "lambda_ts" => self.lambda_ts = parse(key, v)?,
            "lambda_fs" => self.lambda_fs = parse(key, v)?,
            "rcab_per_group" => self.rcab_per_group = parse(key, v)?,
            "reduction_ratio" => self.reduction_ratio = parse(key, v)?,
            "spatial_kernel" => self.spatial_kernel = parse(key, v)?,
            "element_mode" => self.element_mode = v.parse().map_err(Error::Config)?,
            "use_pfb" => self.use_pfb = parse(key, v)?,
            "use_ffb" => self.use_ffb = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// Shortest representation that parses back to the same `f64`.
pub(crate) fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

pub(crate) fn parse<V: std::str::FromStr>(key: &str, v: &str) -> Result<V> {
    v.parse()
        .map_err(|_| Error::Config(format!("cannot parse `{v}` for `{key}`")))
}
