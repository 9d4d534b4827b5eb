use std::fs;
use std::path::{Path, PathBuf};

use pkdn::autograd::fault::with_corrupted_relu_backward;
use pkdn::data::{load_image, load_parsing, save_image, write_synthetic, Dataset, SYNTH_CLASSES};
use pkdn::metrics::{evaluate, Bicubic, Identity, MetricReport, SuperResolver};
use pkdn::net::{read_header, NetKind, Network};
use pkdn::selftest;
use pkdn::train::{train_student, train_teacher, TrainLog, TrainState, LOG_HEADER};
use pkdn::{ElementMode, Error, Scalar};

use crate::config::{checkpoint_dir, RunConfig};
use crate::CliError;

type Result<T> = std::result::Result<T, CliError>;

pub fn selftest(corrupt_relu: bool) -> Result<()> {
    let run = || selftest::run_with(|c| println!("{}", c.line()));
    let report = if corrupt_relu {
        with_corrupted_relu_backward(run)
    } else {
        run()
    };
    println!("{} checks in {:.1}s", report.checks.len(), report.elapsed.as_secs_f64());
    let failed: Vec<&str> = report.failures().map(|c| c.name.as_str()).collect();
    if failed.is_empty() {
        println!("all checks passed");
        Ok(())
    } else {
        Err(CliError::SelfTest(failed.join(", ")))
    }
}

pub fn synth(count: usize, size: usize, seed: u64, out: &Path) -> Result<()> {
    if count == 0 || size < 32 {
        return Err(CliError::Usage("synth needs --count ≥ 1 and --size ≥ 32".into()));
    }
    let stems = write_synthetic(out, count, size, seed)?;
    println!(
        "wrote {} pairs of {size}×{size} ({SYNTH_CLASSES} parsing classes) to {}",
        stems.len(),
        out.display()
    );
    Ok(())
}

/// Writes `config.txt`, or checks that a resumed run kept its configuration.
fn echo_config(run_dir: &Path, cfg: &RunConfig, resume: bool) -> Result<()> {
    fs::create_dir_all(run_dir).map_err(|e| Error::Io {
        path: run_dir.to_path_buf(),
        source: e,
    })?;
    let path = run_dir.join("config.txt");
    let text = cfg.to_text();
    if resume {
        // the step target may grow when a run is extended
        let settings = |t: &str| t.lines().filter(|l| !l.starts_with("steps=")).collect::<Vec<_>>().join("\n");
        if let Ok(old) = fs::read_to_string(&path) {
            if settings(&old) != settings(&text) {
                return Err(CliError::Usage(format!(
                    "{} differs from the effective configuration; a resumed run must keep its settings (except steps)",
                    path.display()
                )));
            }
        }
    }
    fs::write(&path, text).map_err(|e| Error::Io { path, source: e })?;
    Ok(())
}

fn latest_checkpoint(run_dir: &Path) -> Result<Option<(u64, PathBuf)>> {
    let dir = checkpoint_dir(run_dir);
    let Ok(entries) = fs::read_dir(&dir) else { return Ok(None) };
    let mut best = None;
    for entry in entries.flatten() {
        let name = entry.file_name();
        let Some(step) = name
            .to_str()
            .and_then(|n| n.strip_prefix("step_"))
            .and_then(|n| n.strip_suffix(".pkdn"))
            .and_then(|n| n.parse::<u64>().ok())
        else {
            continue;
        };
        if best.as_ref().is_none_or(|(s, _)| step > *s) {
            best = Some((step, entry.path()));
        }
    }
    Ok(best)
}

/// Drops log rows at or after `step` so a resumed run appends where the
/// checkpoint left off.
fn truncate_log(path: &Path, step: u64) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let keep: Vec<String> = TrainLog::read(path)?
        .iter()
        .zip(fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?
        .lines()
        .filter(|l| *l != LOG_HEADER))
        .filter(|((s, _), _)| *s < step)
        .map(|(_, line)| line.to_string())
        .collect();
    let mut text = format!("{LOG_HEADER}\n");
    for line in keep {
        text.push_str(&line);
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

pub fn train(kind: NetKind, cfg: &RunConfig, run_dir: &Path, teacher: Option<&Path>, resume: bool) -> Result<()> {
    match cfg.net.element_mode {
        ElementMode::F32 => train_as::<f32>(kind, cfg, run_dir, teacher, resume),
        ElementMode::F64 => train_as::<f64>(kind, cfg, run_dir, teacher, resume),
    }
}

fn load_teacher<T: Scalar>(path: &Path, cfg: &RunConfig) -> Result<Network<T>> {
    if !path.is_file() {
        return Err(CliError::Usage(format!("teacher checkpoint {} does not exist", path.display())));
    }
    let header = read_header(path)?;
    if header.kind != NetKind::Teacher {
        return Err(CliError::Usage(format!("{} holds a {}, not a teacher", path.display(), header.kind)));
    }
    let (t, s) = (&header.config, &cfg.net);
    for (field, a, b) in [
        ("base_channels", t.base_channels, s.base_channels),
        ("stages", t.stages, s.stages),
        ("scale", t.scale, s.scale),
    ] {
        if a != b {
            return Err(Error::ConfigMismatch {
                field: field.into(),
                file: a.to_string(),
                expected: b.to_string(),
            }
            .into());
        }
    }
    let (mut net, _) = Network::<T>::load_any(path)?;
    net.params_mut().freeze();
    Ok(net)
}

fn train_as<T: Scalar>(kind: NetKind, cfg: &RunConfig, run_dir: &Path, teacher: Option<&Path>, resume: bool) -> Result<()> {
    echo_config(run_dir, cfg, resume)?;
    let teacher = teacher.map(|p| load_teacher::<T>(p, cfg)).transpose()?;
    let data: Dataset<T> = cfg.dataset()?;
    let opts = cfg.train_options(run_dir);

    let latest = if resume { latest_checkpoint(run_dir)? } else { None };
    let (mut net, mut state) = match latest {
        Some((_, path)) => {
            let (net, step) = Network::<T>::load(&path, &cfg.net)?;
            if net.kind() != kind {
                return Err(CliError::Usage(format!("{} holds a {}, not a {kind}", path.display(), net.kind())));
            }
            println!("resuming {kind} from {} (step {step})", path.display());
            truncate_log(opts.log_path.as_deref().expect("set by train_options"), step)?;
            (net, TrainState::resume(step, cfg.data_seed))
        }
        None => (Network::<T>::new(kind, &cfg.net)?, TrainState::new(cfg.data_seed)),
    };
    println!(
        "training {kind}: {} parameters, {} samples, steps {}..{}",
        net.params().numel(),
        data.len(),
        state.step,
        cfg.steps
    );
    match &teacher {
        None => train_teacher(&mut net, &data, &opts, &mut state)?,
        Some(t) => train_student(&mut net, t, &data, &opts, &mut state)?,
    }
    let out = run_dir.join(format!("{kind}.pkdn"));
    net.save(&out, state.step, false)?;
    if let (Some(first), Some(last)) = (state.history.first(), state.last()) {
        println!(
            "step {}: total {:.6} (l_sr {:.6}, l_ts {:.6}, l_fs {:.6}); first logged total {:.6}",
            state.step, last.total, last.l_sr, last.l_ts, last.l_fs, first.total
        );
    }
    println!("wrote {}", out.display());
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Baseline {
    Bicubic,
    Identity,
}

pub enum EvalModel {
    Checkpoint(PathBuf),
    Baseline { which: Baseline, scale: usize, n_classes: usize },
}

fn write_report(report: &MetricReport, out: &Path) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::Io {
        path: out.to_path_buf(),
        source: e,
    })?;
    report.write(out.join("metrics.tsv"), out.join("metrics.json"))?;
    let m = &report.mean;
    let fmt = |v: f64| if v.is_finite() { format!("{v:.4}") } else { "inf".into() };
    println!(
        "{}: {} images, PSNR-Y {} dB, SSIM-Y {:.4}, PSNR-RGB {} dB, SSIM-RGB {:.4}",
        report.model,
        report.images.len(),
        fmt(m.psnr_y),
        m.ssim_y,
        fmt(m.psnr_rgb),
        m.ssim_rgb
    );
    println!("wrote {} and {}", out.join("metrics.tsv").display(), out.join("metrics.json").display());
    Ok(())
}

fn eval_as<T: Scalar>(model: &dyn SuperResolver<T>, data_dir: &Path, n_classes: usize, scale: usize, out: &Path) -> Result<()> {
    let data = Dataset::<T>::from_dir(data_dir, n_classes, scale)?;
    write_report(&evaluate(model, &data)?, out)
}

pub fn eval(model: EvalModel, data_dir: &Path, out: &Path) -> Result<()> {
    match model {
        EvalModel::Baseline { which, scale, n_classes } => {
            let m: &dyn SuperResolver<f64> = match which {
                Baseline::Bicubic => &Bicubic,
                Baseline::Identity => &Identity,
            };
            eval_as(m, data_dir, n_classes, scale, out)
        }
        EvalModel::Checkpoint(path) => {
            let h = read_header(&path)?;
            let (n, s) = (h.config.n_classes, h.config.scale);
            match h.config.element_mode {
                ElementMode::F32 => eval_as(&Network::<f32>::load_any(&path)?.0, data_dir, n, s, out),
                ElementMode::F64 => eval_as(&Network::<f64>::load_any(&path)?.0, data_dir, n, s, out),
            }
        }
    }
}

fn infer_as<T: Scalar>(ckpt: &Path, input: &Path, parsing: Option<&Path>, output: &Path) -> Result<()> {
    let (net, _) = Network::<T>::load_any(ckpt)?;
    let lr = load_image::<T>(input)?;
    let parsing = match (net.requires_parsing(), parsing) {
        (true, Some(p)) => Some(load_parsing::<T>(p, net.config().n_classes)?),
        (true, None) => {
            return Err(Error::ParsingRequired {
                n_classes: net.config().n_classes,
            }
            .into())
        }
        (false, Some(_)) if net.kind() == NetKind::Student => {
            return Err(CliError::Usage("the student takes only the low-resolution image; drop --parsing".into()));
        }
        (false, _) => None,
    };
    let sr = net.predict(&lr, parsing.as_ref())?.sr;
    save_image(&sr, output)?;
    let (i, o) = (lr.shape(), sr.shape());
    println!("{}×{} → {}×{}: wrote {}", i.w, i.h, o.w, o.h, output.display());
    Ok(())
}

pub fn infer(ckpt: &Path, input: &Path, parsing: Option<&Path>, output: &Path) -> Result<()> {
    match read_header(ckpt)?.config.element_mode {
        ElementMode::F32 => infer_as::<f32>(ckpt, input, parsing, output),
        ElementMode::F64 => infer_as::<f64>(ckpt, input, parsing, output),
    }
}
