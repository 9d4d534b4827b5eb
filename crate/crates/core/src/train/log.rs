use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use super::LossBreakdown;
use crate::error::{Error, Result};

pub const LOG_HEADER: &str = "step\tl_sr\tl_ts\tl_fs\ttotal\twall_ms";

/// Append-only tab-separated training log, flushed after every line.
///
/// Losses are printed in shortest round-trip form, so a log line parses back
/// to the exact 64-bit values.
#[derive(Debug)]
pub struct TrainLog {
    path: PathBuf,
    out: BufWriter<File>,
}

impl TrainLog {
    /// Truncates `path` and writes the header.
    pub fn create(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut log = TrainLog {
            out: BufWriter::new(file),
            path,
        };
        log.line(LOG_HEADER)?;
        Ok(log)
    }

    /// Continues an existing log (header written if the file is new or empty).
    pub fn append(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let fresh = std::fs::metadata(&path).map(|m| m.len() == 0).unwrap_or(true);
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        let mut log = TrainLog {
            out: BufWriter::new(file),
            path,
        };
        if fresh {
            log.line(LOG_HEADER)?;
        }
        Ok(log)
    }

    pub fn write(&mut self, step: u64, l: &LossBreakdown, wall_ms: u128) -> Result<()> {
        self.line(&format!("{step}\t{:?}\t{:?}\t{:?}\t{:?}\t{wall_ms}", l.l_sr, l.l_ts, l.l_fs, l.total))
    }

    fn line(&mut self, s: &str) -> Result<()> {
        writeln!(self.out, "{s}")
            .and_then(|_| self.out.flush())
            .map_err(|e| Error::io(&self.path, e))
    }

    /// Reads `(step, losses)` rows back, skipping the header.
    pub fn read(path: impl AsRef<Path>) -> Result<Vec<(u64, LossBreakdown)>> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let bad = |n: usize| Error::Dataset(format!("{}: malformed log line {n}", path.display()));
        let mut rows = Vec::new();
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if n == 0 && line == LOG_HEADER {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 6 {
                return Err(bad(n + 1));
            }
            let num = |i: usize| f[i].parse::<f64>().map_err(|_| bad(n + 1));
            let step = f[0].parse::<u64>().map_err(|_| bad(n + 1))?;
            rows.push((
                step,
                LossBreakdown {
                    l_sr: num(1)?,
                    l_ts: num(2)?,
                    l_fs: num(3)?,
                    total: num(4)?,
                },
            ));
        }
        Ok(rows)
    }
}
