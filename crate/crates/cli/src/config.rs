//! Flat `key=value` run configuration.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use pkdn::data::Dataset;
use pkdn::net::NetConfig;
use pkdn::train::{Adam, TrainOptions};
use pkdn::{Error, Result, Scalar};

/// Network, trainer and data settings of one run.
///
/// Text form: one `key=value` per line, `#` starts a comment. A `preset` key
/// is applied first wherever it appears; every other key is applied in order,
/// so later lines and `--set` flags win.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub preset: String,
    pub net: NetConfig,
    pub steps: u64,
    pub batch: usize,
    pub adam: Adam,
    pub data_seed: u64,
    pub checkpoint_every: u64,
    /// Directory with `hr/` and `parsing/`; empty means synthetic data.
    pub data_dir: String,
    pub synth_count: usize,
    pub synth_size: usize,
    pub synth_seed: u64,
}

pub const RUN_KEYS: &[&str] = &[
    "preset",
    "steps",
    "batch",
    "lr",
    "beta1",
    "beta2",
    "eps",
    "data_seed",
    "checkpoint_every",
    "data_dir",
    "synth_count",
    "synth_size",
    "synth_seed",
];

fn parse<V: std::str::FromStr>(key: &str, v: &str) -> Result<V> {
    v.parse()
        .map_err(|_| Error::Config(format!("cannot parse `{v}` for `{key}`")))
}

impl RunConfig {
    pub fn with_preset(name: &str) -> Result<Self> {
        Ok(RunConfig {
            preset: name.to_string(),
            net: NetConfig::preset(name)?,
            steps: 2000,
            batch: 4,
            adam: Adam::default(),
            data_seed: 0,
            checkpoint_every: 500,
            data_dir: String::new(),
            synth_count: 128,
            synth_size: 32,
            synth_seed: 1,
        })
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "preset" => {
                if v != self.preset {
                    return Err(Error::Config(format!("conflicting presets `{v}` and `{}`", self.preset)));
                }
            }
            "steps" => self.steps = parse(key, v)?,
            "batch" => self.batch = parse(key, v)?,
            "lr" => self.adam.lr = parse(key, v)?,
            "beta1" => self.adam.beta1 = parse(key, v)?,
            "beta2" => self.adam.beta2 = parse(key, v)?,
            "eps" => self.adam.eps = parse(key, v)?,
            "data_seed" => self.data_seed = parse(key, v)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, v)?,
            "data_dir" => self.data_dir = v.to_string(),
            "synth_count" => self.synth_count = parse(key, v)?,
            "synth_size" => self.synth_size = parse(key, v)?,
            "synth_seed" => self.synth_seed = parse(key, v)?,
            _ => {
                if !self.net.set(key, v)? {
                    let known: Vec<&str> = RUN_KEYS.iter().chain(NetConfig::KEYS).copied().collect();
                    return Err(Error::Config(format!(
                        "unknown configuration key `{key}` (known: {})",
                        known.join(", ")
                    )));
                }
            }
        }
        Ok(())
    }

    /// Builds a config from an optional file and `KEY=VALUE` overrides.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut pairs = Vec::new();
        if let Some(path) = file {
            let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            for (n, line) in text.lines().enumerate() {
                let line = line.split('#').next().unwrap_or("").trim();
                if line.is_empty() {
                    continue;
                }
                let (k, v) = line
                    .split_once('=')
                    .ok_or_else(|| Error::Config(format!("{}:{}: expected key=value", path.display(), n + 1)))?;
                pairs.push((k.trim().to_string(), v.trim().to_string()));
            }
        }
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{o}`")))?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        let preset = pairs
            .iter()
            .rev()
            .find(|(k, _)| k == "preset")
            .map_or("desk", |(_, v)| v.as_str());
        let mut cfg = RunConfig::with_preset(preset)?;
        for (k, v) in &pairs {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        if self.batch == 0 {
            return Err(Error::Config("batch must be at least 1".into()));
        }
        let a = &self.adam;
        if !(a.lr > 0.0 && a.eps > 0.0 && (0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2)) {
            return Err(Error::Config(format!("invalid optimizer settings {a:?}")));
        }
        if self.data_dir.is_empty() {
            let m = self.net.size_multiple();
            if self.synth_count == 0 || self.synth_size < 32 || self.synth_size % m != 0 {
                return Err(Error::Config(format!(
                    "synthetic data needs synth_count ≥ 1 and synth_size ≥ 32, a multiple of {m}"
                )));
            }
            if self.net.n_classes < pkdn::data::SYNTH_CLASSES {
                return Err(Error::Config(format!(
                    "synthetic faces have {} classes but n_classes is {}",
                    pkdn::data::SYNTH_CLASSES,
                    self.net.n_classes
                )));
            }
        }
        Ok(())
    }

    /// Every key with its effective value, in a fixed order.
    pub fn to_text(&self) -> String {
        let mut s = format!("preset={}\n", self.preset);
        for (k, v) in self.net.to_pairs() {
            let _ = writeln!(s, "{k}={v}");
        }
        let a = &self.adam;
        let _ = write!(
            s,
            "steps={}\nbatch={}\nlr={:?}\nbeta1={:?}\nbeta2={:?}\neps={:?}\ndata_seed={}\ncheckpoint_every={}\n\
             data_dir={}\nsynth_count={}\nsynth_size={}\nsynth_seed={}\n",
            self.steps,
            self.batch,
            a.lr,
            a.beta1,
            a.beta2,
            a.eps,
            self.data_seed,
            self.checkpoint_every,
            self.data_dir,
            self.synth_count,
            self.synth_size,
            self.synth_seed
        );
        s
    }

    pub fn dataset<T: Scalar>(&self) -> Result<Dataset<T>> {
        if self.data_dir.is_empty() {
            Dataset::synthetic(self.synth_count, self.synth_size, self.synth_seed, self.net.n_classes, self.net.scale)
        } else {
            Dataset::from_dir(&self.data_dir, self.net.n_classes, self.net.scale)
        }
    }

    pub fn train_options(&self, run_dir: &Path) -> TrainOptions {
        TrainOptions {
            steps: self.steps,
            batch: self.batch,
            data_seed: self.data_seed,
            adam: self.adam,
            checkpoint_every: self.checkpoint_every,
            checkpoint_dir: Some(checkpoint_dir(run_dir)),
            log_path: Some(run_dir.join("train.tsv")),
        }
    }
}

pub fn checkpoint_dir(run_dir: &Path) -> PathBuf {
    run_dir.join("checkpoints")
}
