//! Losses, the optimizer, and the two training stages: the teacher alone,
//! then the student under the frozen teacher.
//!
//! Step `k` of a run always trains on
//! [`Dataset::batch_for_step`]`(k, batch, data_seed)`, so a run resumed from a
//! checkpoint taken after step `k` replays exactly what an uninterrupted run
//! would have done.

mod adam;
mod log;
mod loss;

pub use adam::Adam;
pub use log::{TrainLog, LOG_HEADER};
pub use loss::{l1, student_loss, student_objective, teacher_loss, teacher_objective, LossBreakdown, LossWeights};

use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::autograd::Tape;
use crate::data::{Batch, Dataset};
use crate::error::{Error, Result};
use crate::net::{NetKind, Network};
use crate::scalar::Scalar;
use crate::tensor::Shape;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOptions {
    /// Train until this many steps have been taken in total.
    pub steps: u64,
    pub batch: usize,
    pub data_seed: u64,
    pub adam: Adam,
    /// Save `step_{k:06}.pkdn` (with moments) every this many steps; 0 disables.
    pub checkpoint_every: u64,
    pub checkpoint_dir: Option<PathBuf>,
    pub log_path: Option<PathBuf>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            steps: 2000,
            batch: 4,
            data_seed: 0,
            adam: Adam::default(),
            checkpoint_every: 0,
            checkpoint_dir: None,
            log_path: None,
        }
    }
}

/// Progress of a run. Adam moments are stored on the network's parameters
/// and travel with its checkpoints.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainState {
    /// Number of optimizer steps taken so far.
    pub step: u64,
    pub data_seed: u64,
    /// Losses of the steps taken by this process, measured before each update.
    pub history: Vec<LossBreakdown>,
}

impl TrainState {
    pub fn new(data_seed: u64) -> Self {
        TrainState {
            step: 0,
            data_seed,
            history: Vec::new(),
        }
    }

    /// Continues a run whose checkpoint recorded `step`.
    pub fn resume(step: u64, data_seed: u64) -> Self {
        TrainState {
            step,
            data_seed,
            history: Vec::new(),
        }
    }

    pub fn last(&self) -> Option<&LossBreakdown> {
        self.history.last()
    }
}

pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("step_{step:06}.pkdn"))
}

/// Fails if a batch's per-sample geometry differs from the run's first batch.
struct DriftGuard(Option<(Shape, Shape)>);

impl DriftGuard {
    fn check<T: Scalar>(&mut self, step: u64, b: &Batch<T>) -> Result<()> {
        let per_sample = |s: Shape| Shape::new(1, s.c, s.h, s.w);
        let now = (per_sample(b.lr.shape()), per_sample(b.hr.shape()));
        match self.0 {
            None => self.0 = Some(now),
            Some(first) if first != now => {
                return Err(Error::Dataset(format!(
                    "sample shape changed at step {step}: lr {} hr {} after lr {} hr {}",
                    now.0, now.1, first.0, first.1
                )));
            }
            Some(_) => {}
        }
        Ok(())
    }
}

struct Runner<'a> {
    opts: &'a TrainOptions,
    log: Option<TrainLog>,
    guard: DriftGuard,
}

impl<'a> Runner<'a> {
    fn new(opts: &'a TrainOptions, state: &TrainState) -> Result<Self> {
        if opts.batch == 0 {
            return Err(Error::Config("batch must be at least 1".into()));
        }
        if opts.checkpoint_every > 0 {
            let dir = opts
                .checkpoint_dir
                .as_ref()
                .ok_or_else(|| Error::Config("checkpoint_every needs a checkpoint directory".into()))?;
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let log = match &opts.log_path {
            Some(p) if state.step == 0 => Some(TrainLog::create(p)?),
            Some(p) => Some(TrainLog::append(p)?),
            None => None,
        };
        Ok(Runner {
            opts,
            log,
            guard: DriftGuard(None),
        })
    }

    fn batch<'d, T: Scalar>(&mut self, data: &'d Dataset<T>, state: &TrainState) -> Result<Batch<T>> {
        let idx = data.batch_for_step(state.step, self.opts.batch, state.data_seed);
        let b = data.collate(&idx)?;
        self.guard.check(state.step, &b)?;
        Ok(b)
    }

    fn finish_step<T: Scalar>(
        &mut self,
        net: &mut Network<T>,
        state: &mut TrainState,
        losses: LossBreakdown,
        started: Instant,
    ) -> Result<()> {
        let step = state.step;
        self.opts.adam.step(net.params_mut(), step + 1)?;
        state.step += 1;
        state.history.push(losses);
        if let Some(log) = &mut self.log {
            log.write(step, &losses, started.elapsed().as_millis())?;
        }
        if self.opts.checkpoint_every > 0 && state.step % self.opts.checkpoint_every == 0 {
            let dir = self.opts.checkpoint_dir.as_ref().expect("checked in new");
            net.save(checkpoint_path(dir, state.step), state.step, true)?;
        }
        Ok(())
    }
}

fn finite_or_abort(v: f64, step: u64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFiniteLoss { step: step as usize })
    }
}

/// Minimizes `mean |sr − hr|` of the teacher until `opts.steps` steps in total.
pub fn train_teacher<T: Scalar>(
    net: &mut Network<T>,
    data: &Dataset<T>,
    opts: &TrainOptions,
    state: &mut TrainState,
) -> Result<()> {
    if net.kind() != NetKind::Teacher {
        return Err(Error::invalid("train_teacher", "network is a student"));
    }
    let mut run = Runner::new(opts, state)?;
    while state.step < opts.steps {
        let started = Instant::now();
        let b = run.batch(data, state)?;
        let mut tape = Tape::new();
        let lr = tape.constant(b.lr);
        let hr = tape.constant(b.hr);
        let parsing = net.requires_parsing().then(|| tape.constant(b.parsing));
        let out = net.forward(&mut tape, lr, parsing)?;
        let loss = teacher_objective(&mut tape, out.sr, hr)?;
        let l_t = finite_or_abort(tape.value(loss).item().f64(), state.step)?;
        tape.backward(loss, net.params_mut())?;
        run.finish_step(net, state, LossBreakdown::teacher(l_t), started)?;
    }
    Ok(())
}

/// Distills `teacher` into `student` until `opts.steps` steps in total.
///
/// The teacher runs without recording gradients and must be frozen; its
/// outputs enter the student's tape as constants.
pub fn train_student<T: Scalar>(
    student: &mut Network<T>,
    teacher: &Network<T>,
    data: &Dataset<T>,
    opts: &TrainOptions,
    state: &mut TrainState,
) -> Result<()> {
    if student.kind() != NetKind::Student || teacher.kind() != NetKind::Teacher {
        return Err(Error::invalid("train_student", "needs a student and a teacher, in that order"));
    }
    if !teacher.params().is_frozen() {
        return Err(Error::TeacherNotFrozen);
    }
    let weights = LossWeights::from(student.config());
    let mut run = Runner::new(opts, state)?;
    while state.step < opts.steps {
        let started = Instant::now();
        let b = run.batch(data, state)?;
        let guide = teacher.predict(&b.lr, teacher.requires_parsing().then_some(&b.parsing))?;

        let mut tape = Tape::new();
        let lr = tape.constant(b.lr);
        let hr = tape.constant(b.hr);
        let sr_t = tape.constant(guide.sr);
        let taps_t: Vec<_> = guide.taps.into_iter().map(|t| tape.constant(t)).collect();
        let out = student.forward(&mut tape, lr, None)?;
        let (loss, parts) = student_objective(&mut tape, out.sr, hr, sr_t, &taps_t, &out.taps, weights)?;
        finite_or_abort(tape.value(loss).item().f64(), state.step)?;
        finite_or_abort(parts.total, state.step)?;
        tape.backward(loss, student.params_mut())?;
        run.finish_step(student, state, parts, started)?;
    }
    Ok(())
}
