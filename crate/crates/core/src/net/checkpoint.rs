//! `PKDN1` checkpoint files. The byte layout is documented in
//! `docs/checkpoint-format.md`.

use std::fs;
use std::path::Path;

use super::{NetConfig, NetKind, Network};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"PKDN1";

/// Fields that change the parameter layout; a mismatch on any of them makes
/// a checkpoint unusable for a given config.
const STRUCTURAL: &[&str] = &[
    "base_channels",
    "stages",
    "blocks_per_stage",
    "n_classes",
    "scale",
    "rcab_per_group",
    "reduction_ratio",
    "spatial_kernel",
    "element_mode",
    "use_pfb",
    "use_ffb",
];

/// Decoded header of a checkpoint file.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointHeader {
    pub kind: NetKind,
    pub config: NetConfig,
    pub train_step: u64,
    pub has_moments: bool,
    pub params: Vec<(String, Shape)>,
}

impl CheckpointHeader {
    fn to_text(&self) -> String {
        let mut s = format!("kind={}\n", self.kind);
        s.push_str(&self.config.to_text());
        s.push_str(&format!("train_step={}\n", self.train_step));
        s.push_str(&format!("moments={}\n", u8::from(self.has_moments)));
        s.push_str(&format!("param_count={}\n", self.params.len()));
        for (name, sh) in &self.params {
            s.push_str(&format!("param={} {} {} {} {}\n", name, sh.n, sh.c, sh.h, sh.w));
        }
        s
    }

    fn parse(text: &str) -> Result<Self> {
        let bad = |m: String| Error::MalformedHeader(m);
        let mut config = NetConfig::desk();
        let mut seen = Vec::new();
        let (mut kind, mut train_step, mut moments, mut count) = (None, None, None, None);
        let mut params = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("line {} has no `=`", lineno + 1)))?;
            match k {
                "kind" => kind = Some(v.parse::<NetKind>().map_err(|e| bad(e.to_string()))?),
                "train_step" => train_step = Some(v.parse::<u64>().map_err(|_| bad(format!("train_step `{v}`")))?),
                "moments" => {
                    moments = Some(match v {
                        "0" => false,
                        "1" => true,
                        _ => return Err(bad(format!("moments `{v}`"))),
                    })
                }
                "param_count" => count = Some(v.parse::<usize>().map_err(|_| bad(format!("param_count `{v}`")))?),
                "param" => {
                    let f: Vec<&str> = v.split(' ').collect();
                    let dims: Option<Vec<usize>> = f.get(1..).map(|d| d.iter().filter_map(|x| x.parse().ok()).collect());
                    match dims {
                        Some(d) if f.len() == 5 && d.len() == 4 && !f[0].is_empty() => {
                            params.push((f[0].to_string(), Shape::new(d[0], d[1], d[2], d[3])))
                        }
                        _ => return Err(bad(format!("param line `{v}`"))),
                    }
                }
                _ => {
                    if !config.set(k, v).map_err(|e| bad(e.to_string()))? {
                        return Err(bad(format!("unknown key `{k}`")));
                    }
                    seen.push(k);
                }
            }
        }
        if let Some(missing) = NetConfig::KEYS.iter().find(|k| !seen.contains(k)) {
            return Err(bad(format!("missing key `{missing}`")));
        }
        let count = count.ok_or_else(|| bad("missing key `param_count`".into()))?;
        if count != params.len() {
            return Err(bad(format!("param_count is {count} but {} param lines follow", params.len())));
        }
        Ok(CheckpointHeader {
            kind: kind.ok_or_else(|| bad("missing key `kind`".into()))?,
            config,
            train_step: train_step.ok_or_else(|| bad("missing key `train_step`".into()))?,
            has_moments: moments.ok_or_else(|| bad("missing key `moments`".into()))?,
            params,
        })
    }
}

pub(super) fn save<T: Scalar>(net: &Network<T>, path: &Path, train_step: u64, with_moments: bool) -> Result<()> {
    let header = CheckpointHeader {
        kind: net.kind,
        config: net.cfg.clone(),
        train_step,
        has_moments: with_moments,
        params: net.store.iter().map(|p| (p.name.clone(), p.shape())).collect(),
    };
    let text = header.to_text();
    let mut buf = Vec::with_capacity(9 + text.len() + net.store.numel() * T::MODE.byte_width() * 3);
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    let len = u32::try_from(text.len()).map_err(|_| Error::MalformedHeader("header exceeds 4 GiB".into()))?;
    buf.extend_from_slice(&len.to_le_bytes());
    buf.extend_from_slice(text.as_bytes());
    let mut blobs: Vec<&Tensor<T>> = net.store.iter().map(|p| &p.value).collect();
    if with_moments {
        blobs.extend(net.store.iter().map(|p| &p.m));
        blobs.extend(net.store.iter().map(|p| &p.v));
    }
    for t in blobs {
        for &x in t.data() {
            x.write_le(&mut buf);
        }
    }
    // write-then-rename so an interrupted save never leaves a torn file
    let tmp = path.with_extension("partial");
    fs::write(&tmp, &buf).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn split_header(bytes: &[u8]) -> Result<(CheckpointHeader, &[u8])> {
    let n = bytes.len().min(4);
    if bytes[..n] != CHECKPOINT_MAGIC[..n] {
        return Err(Error::BadMagic);
    }
    if bytes.len() < 5 {
        return Err(Error::Truncated("magic".into()));
    }
    if bytes[4] != CHECKPOINT_MAGIC[4] {
        return Err(Error::UnknownVersion(String::from_utf8_lossy(&bytes[..5]).into_owned()));
    }
    let len_bytes: [u8; 4] = bytes
        .get(5..9)
        .and_then(|b| b.try_into().ok())
        .ok_or_else(|| Error::Truncated("header length".into()))?;
    let len = u32::from_le_bytes(len_bytes) as usize;
    let text = bytes
        .get(9..9 + len)
        .ok_or_else(|| Error::Truncated(format!("header of {len} bytes")))?;
    let text = std::str::from_utf8(text).map_err(|_| Error::MalformedHeader("header is not UTF-8".into()))?;
    Ok((CheckpointHeader::parse(text)?, &bytes[9 + len..]))
}

/// Reads only the header of a checkpoint.
pub fn read_header(path: impl AsRef<Path>) -> Result<CheckpointHeader> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(split_header(&bytes)?.0)
}

pub(super) fn load<T: Scalar>(path: &Path, expected: Option<&NetConfig>) -> Result<(Network<T>, u64)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (header, mut body) = split_header(&bytes)?;
    let file_cfg = &header.config;
    if let Some(exp) = expected {
        let (fp, ep) = (file_cfg.to_pairs(), exp.to_pairs());
        for ((k, fv), (_, ev)) in fp.iter().zip(&ep) {
            if STRUCTURAL.contains(k) && fv != ev {
                return Err(Error::ConfigMismatch {
                    field: k.to_string(),
                    file: fv.clone(),
                    expected: ev.clone(),
                });
            }
        }
    }
    if file_cfg.element_mode != T::MODE {
        return Err(Error::ConfigMismatch {
            field: "element_mode".into(),
            file: file_cfg.element_mode.to_string(),
            expected: T::MODE.to_string(),
        });
    }
    let mut net = Network::<T>::new(header.kind, file_cfg)?;
    let table: Vec<(String, Shape)> = net.store.iter().map(|p| (p.name.clone(), p.shape())).collect();
    if table != header.params {
        return Err(Error::MalformedHeader(
            "parameter table does not match the architecture described by the header".into(),
        ));
    }
    let width = T::MODE.byte_width();
    let mut take = |what: &str, name: &str, n: usize| -> Result<Vec<T>> {
        let bytes = body
            .get(..n * width)
            .ok_or_else(|| Error::Truncated(format!("{what} of `{name}`")))?;
        body = &body[n * width..];
        Ok(bytes.chunks_exact(width).map(T::read_le).collect())
    };
    let sections: &[&str] = if header.has_moments { &["value", "m", "v"] } else { &["value"] };
    for &section in sections {
        for p in net.store.iter_mut() {
            let shape = p.shape();
            let t = Tensor::from_vec(shape, take(section, &p.name, shape.numel())?)?;
            match section {
                "value" => p.value = t,
                "m" => p.m = t,
                _ => p.v = t,
            }
        }
    }
    if !body.is_empty() {
        return Err(Error::MalformedHeader(format!("{} trailing bytes after parameter data", body.len())));
    }
    Ok((net, header.train_step))
}
