//! Central finite-difference verification of analytic gradients.

use std::sync::Arc;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Var};
use crate::error::Result;
use crate::param::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub epsilon: f64,
    /// Coordinates probed per tensor; tensors at or below this size are probed exhaustively.
    pub coords_per_tensor: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            epsilon: 1e-4,
            coords_per_tensor: 16,
            seed: 0x5eed,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// `max |a − n| / max(|a|, |n|, floor)` over probed coordinates, with
    /// `floor = 1e-6 · max(1, |f(θ)|)`. Components below the floor are
    /// smaller than what a finite difference of `f` can resolve, so they are
    /// compared on that absolute scale instead.
    pub max_rel_error: f64,
    /// Where the maximum occurred, e.g. `param pfb.fuse_in.w[17]`.
    pub worst: String,
    pub coords_checked: usize,
}

fn rel_error(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

fn central(eps: f64, mut f: impl FnMut(f64) -> Result<f64>) -> Result<f64> {
    let (p2, p1, m1, m2) = (f(2.0 * eps)?, f(eps)?, f(-eps)?, f(-2.0 * eps)?);
    Ok((8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * eps))
}

fn pick(len: usize, limit: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if len <= limit {
        (0..len).collect()
    } else {
        let mut v = sample(rng, len, limit).into_vec();
        v.sort_unstable();
        v
    }
}

/// Compares the analytic gradient of scalar `f` with the five-point central
/// difference `(−f(θ+2ε) + 8f(θ+ε) − 8f(θ−ε) + f(θ−2ε)) / 12ε`, w.r.t.
/// every parameter of `store` and every tensor in `inputs`.
///
/// Perturbed evaluations keep the relu masks, max argmaxes and abs signs of
/// the unperturbed pass. Without that a probe that straddles a kink measures
/// the average slope of two pieces instead of the derivative at θ. Pinning
/// also makes a fairly large ε safe, which keeps roundoff in `f` small
/// relative to the difference.
///
/// `store` gradients are zeroed before and left holding the analytic
/// gradient afterwards; parameter values are restored bit-exactly.
pub fn finite_diff_check<F>(
    f: F,
    store: &mut ParamStore<f64>,
    inputs: &[Tensor<f64>],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>, &[Var]) -> Result<Var>,
{
    store.zero_grad();
    let mut tape = Tape::new();
    tape.record_pattern();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&mut tape, store, &vars)?;
    let pattern = Arc::new(tape.take_pattern());
    let floor = 1e-6 * tape.value(loss).item().abs().max(1.0);
    let grads = tape.backward(loss, store)?;

    let eval = |store: &ParamStore<f64>, inputs: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::inference();
        tape.replay_pattern(pattern.clone());
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, store, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let eps = opts.epsilon;
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: String::new(),
        coords_checked: 0,
    };
    let record = |report: &mut GradCheckReport, what: String, a: f64, n: f64| {
        let e = rel_error(a, n, floor);
        report.coords_checked += 1;
        if report.worst.is_empty() || e > report.max_rel_error {
            report.max_rel_error = e;
            report.worst = format!("{what} (analytic {a:.6e}, numeric {n:.6e})");
        }
    };

    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let len = store.get(id).value.len();
        for k in pick(len, opts.coords_per_tensor, &mut rng) {
            let analytic = store.get(id).grad.data()[k];
            let orig = store.get(id).value.data()[k];
            let numeric = central(eps, |d| {
                store.get_mut(id).value.data_mut()[k] = orig + d;
                let v = eval(store, inputs);
                store.get_mut(id).value.data_mut()[k] = orig;
                v
            })?;
            let name = format!("param {}[{k}]", store.get(id).name);
            record(&mut report, name, analytic, numeric);
        }
    }

    let mut probe = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).cloned();
        for k in pick(probe[i].len(), opts.coords_per_tensor, &mut rng) {
            let a = analytic.as_ref().map_or(0.0, |g| g.data()[k]);
            let orig = probe[i].data()[k];
            let numeric = central(eps, |d| {
                probe[i].data_mut()[k] = orig + d;
                let v = eval(store, &probe);
                probe[i].data_mut()[k] = orig;
                v
            })?;
            record(&mut report, format!("input {i}[{k}]"), a, numeric);
        }
    }
    Ok(report)
}
