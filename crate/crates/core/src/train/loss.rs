use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::net::NetConfig;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Weights of the output-imitation and feature-imitation terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda_ts: f64,
    pub lambda_fs: f64,
}

impl From<&NetConfig> for LossWeights {
    fn from(cfg: &NetConfig) -> Self {
        LossWeights {
            lambda_ts: cfg.lambda_ts,
            lambda_fs: cfg.lambda_fs,
        }
    }
}

/// Loss terms of one step, as 64-bit values.
///
/// `total` is recomputed here as `l_sr + λ_TS·l_ts + λ_FS·l_fs` rather than
/// read back from the tape, so it composes exactly from the logged parts.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub l_sr: f64,
    pub l_ts: f64,
    pub l_fs: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn compose(l_sr: f64, l_ts: f64, l_fs: f64, w: LossWeights) -> Self {
        LossBreakdown {
            l_sr,
            l_ts,
            l_fs,
            total: l_sr + w.lambda_ts * l_ts + w.lambda_fs * l_fs,
        }
    }

    /// Teacher steps only have the reconstruction term.
    pub fn teacher(l_t: f64) -> Self {
        LossBreakdown {
            l_sr: l_t,
            l_ts: 0.0,
            l_fs: 0.0,
            total: l_t,
        }
    }
}

/// `mean |a − b|` recorded on the tape.
pub fn l1<T: Scalar>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var> {
    let d = tape.sub(a, b)?;
    tape.mean_abs(d)
}

/// Teacher objective `mean |sr − hr|`.
pub fn teacher_objective<T: Scalar>(tape: &mut Tape<T>, sr: Var, hr: Var) -> Result<Var> {
    l1(tape, sr, hr)
}

/// Student objective. Returns the differentiable total and its breakdown.
///
/// `sr_t` and `taps_t` should be constants (a frozen teacher's outputs).
pub fn student_objective<T: Scalar>(
    tape: &mut Tape<T>,
    sr_s: Var,
    hr: Var,
    sr_t: Var,
    taps_t: &[Var],
    taps_s: &[Var],
    w: LossWeights,
) -> Result<(Var, LossBreakdown)> {
    if taps_t.len() != taps_s.len() {
        return Err(Error::shape("student_loss", "tap count", taps_t.len(), taps_s.len()));
    }
    if taps_t.is_empty() {
        return Err(Error::invalid("student_loss", "no feature taps"));
    }
    for (i, (&t, &s)) in taps_t.iter().zip(taps_s).enumerate() {
        let (ts, ss) = (tape.shape(t), tape.shape(s));
        if ts != ss {
            return Err(Error::shape("student_loss", "tap shape", ts, format!("{ss} at tap {i}")));
        }
    }
    let l_sr = l1(tape, sr_s, hr)?;
    let l_ts = l1(tape, sr_t, sr_s)?;
    let mut per_tap = Vec::with_capacity(taps_t.len());
    let mut fs_sum: Option<Var> = None;
    for (&t, &s) in taps_t.iter().zip(taps_s) {
        let term = l1(tape, t, s)?;
        per_tap.push(tape.value(term).item().f64());
        fs_sum = Some(match fs_sum {
            None => term,
            Some(acc) => tape.add(acc, term)?,
        });
    }
    let n = taps_t.len() as f64;
    let l_fs = tape.scale(fs_sum.expect("at least one tap"), 1.0 / n)?;

    let ts_term = tape.scale(l_ts, w.lambda_ts)?;
    let fs_term = tape.scale(l_fs, w.lambda_fs)?;
    let total = tape.add(l_sr, ts_term)?;
    let total = tape.add(total, fs_term)?;

    // sorted so the logged value does not depend on tap order
    per_tap.sort_by(f64::total_cmp);
    let fs = per_tap.iter().sum::<f64>() / n;
    let value = |v: Var| tape.value(v).item().f64();
    Ok((total, LossBreakdown::compose(value(l_sr), value(l_ts), fs, w)))
}

/// `mean |sr − hr|` of two tensors.
pub fn teacher_loss<T: Scalar>(sr: &Tensor<T>, hr: &Tensor<T>) -> Result<f64> {
    let mut tape = Tape::inference();
    let (a, b) = (tape.constant(sr.clone()), tape.constant(hr.clone()));
    let l = teacher_objective(&mut tape, a, b)?;
    Ok(tape.value(l).item().f64())
}

/// Evaluates the student objective on plain tensors.
pub fn student_loss<T: Scalar>(
    sr_s: &Tensor<T>,
    hr: &Tensor<T>,
    sr_t: &Tensor<T>,
    taps_t: &[Tensor<T>],
    taps_s: &[Tensor<T>],
    w: LossWeights,
) -> Result<LossBreakdown> {
    let mut tape = Tape::inference();
    let mut c = |t: &Tensor<T>| tape.constant(t.clone());
    let (s, h, t) = (c(sr_s), c(hr), c(sr_t));
    let tt: Vec<Var> = taps_t.iter().map(&mut c).collect();
    let ts: Vec<Var> = taps_s.iter().map(&mut c).collect();
    Ok(student_objective(&mut tape, s, h, t, &tt, &ts, w)?.1)
}
