//! Acceptance criteria. Each test prints one `PASS`/`FAIL` line to the real
//! stdout (bypassing the harness capture) and then asserts.
//!
//! Run with `cargo test -p pkdn --test acceptance`.

use std::io::Write;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pkdn::data::{bicubic_downsample, Dataset};
use pkdn::metrics::{evaluate, psnr, ssim, Bicubic};
use pkdn::net::{NetConfig, Network};
use pkdn::train::{student_loss, teacher_loss, train_student, train_teacher, Adam, LossWeights, TrainOptions, TrainState};
use pkdn::{selftest, Network32, Tape, Tensor, Tensor64};

fn verdict(name: &str, pass: bool, detail: &str) {
    let line = format!("ACCEPTANCE {} {name}: {detail}\n", if pass { "PASS" } else { "FAIL" });
    let _ = std::io::stdout().lock().write_all(line.as_bytes());
    assert!(pass, "{name}: {detail}");
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn bits_equal(a: &Tensor64, b: &Tensor64) -> bool {
    a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
}

#[test]
fn gradient_integrity() {
    let report = selftest::run();
    let worst = report
        .checks
        .iter()
        .filter_map(|c| c.max_rel_error.map(|e| (e, c.name.as_str())))
        .fold((0.0, ""), |a, b| if b.0 > a.0 { b } else { a });
    let failures: Vec<String> = report.failures().map(|c| c.line()).collect();
    let nets = ["teacher_network(toy,32x32)", "student_network(toy,32x32)"];
    let covered = selftest::BLOCK_NAMES
        .iter()
        .chain(&nets)
        .all(|n| report.checks.iter().any(|c| c.name == *n && c.max_rel_error.is_some()));
    let fast = report.elapsed <= Duration::from_secs(300);
    verdict(
        "gradient integrity",
        report.passed() && covered && fast,
        &format!(
            "{} checks, worst rel error {:.2e} ({}), {:.1}s, tolerance 1e-5, limit 300s; failures: {failures:?}",
            report.checks.len(),
            worst.0,
            worst.1,
            report.elapsed.as_secs_f64()
        ),
    );
}

#[test]
fn structural_invariants() {
    let mut t = Tape::<f64>::inference();
    let x = Tensor::randn((2, 16, 5, 3), 1.0, &mut rng(1));
    let v = t.constant(x.clone());
    let up = t.pixel_shuffle(v, 2).unwrap();
    let back = t.pixel_unshuffle(up, 2).unwrap();
    let shuffle_ok = bits_equal(t.value(back), &x);

    let cfg = NetConfig::toy();
    let lr = Tensor::uniform((1, 3, 8, 8), 0.0, 1.0, &mut rng(2));
    let bicubic = {
        let mut t = Tape::<f64>::inference();
        let l = t.constant(lr.clone());
        let u = t.bicubic_resize(l, 32, 32).unwrap();
        t.value(u).clone()
    };
    let parsing = Tensor::from_fn((1, cfg.n_classes, 32, 32), |_, c, y, _| if c == y % 4 { 1.0 } else { 0.0 });
    let mut zero_ok = true;
    for mut net in [Network::<f64>::teacher(&cfg).unwrap(), Network::<f64>::student(&cfg).unwrap()] {
        net.params_mut().zero_values();
        let p = net.requires_parsing().then_some(&parsing);
        zero_ok &= bits_equal(&net.predict(&lr, p).unwrap().sr, &bicubic);
    }

    let mut r = rng(3);
    let mut congruent = 0;
    for _ in 0..10 {
        let mut c = NetConfig::toy();
        c.base_channels = 4 * r.random_range(1..=4);
        c.stages = r.random_range(1..=3);
        c.blocks_per_stage = r.random_range(1..=2);
        c.scale = [2, 4, 8][r.random_range(0..3)];
        c.rcab_per_group = r.random_range(1..=2);
        c.n_classes = r.random_range(2..=6);
        c.use_pfb = r.random();
        c.use_ffb = r.random();
        c.seed = r.random();
        let side = c.size_multiple() * r.random_range(1..=2);
        let lr = Tensor::uniform((1, 3, side / c.scale, side / c.scale), 0.0, 1.0, &mut r);
        let p = Tensor::from_fn((1, c.n_classes, side, side), |_, k, y, x| if k == (x + y) % c.n_classes { 1.0 } else { 0.0 });
        let teacher = Network::<f64>::teacher(&c).unwrap();
        let tp = teacher.predict(&lr, teacher.requires_parsing().then_some(&p)).unwrap();
        let sp = Network::<f64>::student(&c).unwrap().predict(&lr, None).unwrap();
        let shapes = |taps: &[Tensor64]| taps.iter().map(|t| t.shape()).collect::<Vec<_>>();
        if shapes(&tp.taps) == shapes(&sp.taps) && tp.taps.len() == 2 * c.stages {
            congruent += 1;
        }
    }
    verdict(
        "structural invariants",
        shuffle_ok && zero_ok && congruent == 10,
        &format!("shuffle round trip exact: {shuffle_ok}; zero-weight nets equal bicubic bit for bit: {zero_ok}; tap congruence {congruent}/10"),
    );
}

fn mae(a: &Tensor64, b: &Tensor64) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}

#[test]
fn loss_algebra() {
    let mut worst_rel: f64 = 0.0;
    let mut zero_iff_equal = true;
    let u = |s: (usize, usize, usize, usize), seed| Tensor::<f64>::uniform(s, 0.0, 1.0, &mut rng(seed));
    for seed in 0..20u64 {
        let mut r = rng(seed);
        let w = LossWeights {
            lambda_ts: r.random_range(0.0..2.0),
            lambda_fs: r.random_range(0.0..2.0),
        };
        let (s, h, t) = (u((1, 3, 8, 8), seed * 10), u((1, 3, 8, 8), seed * 10 + 1), u((1, 3, 8, 8), seed * 10 + 2));
        let tt = vec![u((1, 4, 4, 4), seed * 10 + 3), u((1, 4, 2, 2), seed * 10 + 4)];
        let ts = vec![u((1, 4, 4, 4), seed * 10 + 5), u((1, 4, 2, 2), seed * 10 + 6)];
        let l = student_loss(&s, &h, &t, &tt, &ts, w).unwrap();
        let total = l.l_sr + w.lambda_ts * l.l_ts + w.lambda_fs * l.l_fs;
        worst_rel = worst_rel.max((l.total - total).abs() / total);
        let fs = (mae(&tt[0], &ts[0]) + mae(&tt[1], &ts[1])) / 2.0;
        worst_rel = worst_rel.max((l.l_sr - mae(&s, &h)).abs() / l.l_sr);
        worst_rel = worst_rel.max((l.l_ts - mae(&t, &s)).abs() / l.l_ts);
        worst_rel = worst_rel.max((l.l_fs - fs).abs() / fs);

        let same = student_loss(&h, &h, &h, &tt, &tt, w).unwrap();
        zero_iff_equal &= same.l_sr == 0.0 && same.l_ts == 0.0 && same.l_fs == 0.0 && same.total == 0.0;
        let nudge = |x: &Tensor64| {
            let mut y = x.clone();
            y.data_mut()[5] += 1e-3;
            y
        };
        let one_off = student_loss(&nudge(&h), &h, &h, &tt, &tt, w).unwrap();
        zero_iff_equal &= one_off.l_sr > 0.0 && one_off.l_ts > 0.0 && one_off.l_fs == 0.0;
        let tap_off = student_loss(&h, &h, &h, &tt, &[tt[0].clone(), nudge(&tt[1])], w).unwrap();
        zero_iff_equal &= tap_off.l_fs > 0.0 && tap_off.l_sr == 0.0;
        zero_iff_equal &= teacher_loss(&h, &h).unwrap() == 0.0 && teacher_loss(&nudge(&h), &h).unwrap() > 0.0;
    }
    let z = Tensor::<f64>::zeros((1, 3, 8, 8));
    let two_tap = student_loss(
        &z,
        &z,
        &z,
        &[Tensor::zeros((1, 2, 4, 4)), Tensor::zeros((1, 2, 8, 8))],
        &[Tensor::full((1, 2, 4, 4), 0.2), Tensor::full((1, 2, 8, 8), 0.4)],
        LossWeights { lambda_ts: 1.0, lambda_fs: 0.05 },
    )
    .unwrap()
    .l_fs;
    verdict(
        "loss algebra",
        worst_rel <= 1e-12 && zero_iff_equal && (two_tap - 0.3).abs() <= 1e-15,
        &format!("worst relative composition/term error {worst_rel:.2e} (limit 1e-12); zero iff equal: {zero_iff_equal}; taps 0.2, 0.4 → l_fs {two_tap}"),
    );
}

fn corpus_l_t(net: &Network32, data: &Dataset<f32>) -> f64 {
    let total: f64 = data
        .samples()
        .iter()
        .map(|s| {
            let p = net.requires_parsing().then_some(&s.parsing);
            teacher_loss(&net.predict(&s.lr, p).unwrap().sr, &s.hr).unwrap()
        })
        .sum();
    total / data.len() as f64
}

fn desk_options(steps: u64) -> TrainOptions {
    TrainOptions {
        steps,
        batch: 4,
        data_seed: 0,
        adam: Adam::default(),
        ..TrainOptions::default()
    }
}

#[test]
fn teacher_overfit() {
    let cfg = NetConfig::desk();
    let data = Dataset::<f32>::synthetic(1, 32, 0, cfg.n_classes, cfg.scale).unwrap();
    let mut net = Network32::teacher(&cfg).unwrap();
    let started = Instant::now();
    let mut st = TrainState::new(0);
    train_teacher(&mut net, &data, &desk_options(2000), &mut st).unwrap();
    let secs = started.elapsed().as_secs_f64();
    let (l0, l_end) = (st.history[0].l_sr, corpus_l_t(&net, &data));
    verdict(
        "teacher overfit",
        l_end < 0.02 && l0 >= 10.0 * l_end && secs <= 900.0,
        &format!("desk teacher, 1 sample 32x32, 2000 Adam steps at lr 1e-4: L_T {l0:.5} → {l_end:.5} ({:.1}x drop), {secs:.0}s", l0 / l_end),
    );
}

const TRAIN_COUNT: usize = 128;
const TRAIN_SEED: u64 = 1;
const TEST_SEED: u64 = 2;

fn train_split() -> Dataset<f32> {
    Dataset::synthetic(TRAIN_COUNT, 32, TRAIN_SEED, 4, 4).unwrap()
}

/// The full desk teacher after 2000 steps on the training split, shared by
/// the distillation and ablation criteria.
fn trained_teacher() -> &'static Network32 {
    static TEACHER: OnceLock<Network32> = OnceLock::new();
    TEACHER.get_or_init(|| {
        let mut net = Network32::teacher(&NetConfig::desk()).unwrap();
        train_teacher(&mut net, &train_split(), &desk_options(2000), &mut TrainState::new(0)).unwrap();
        net
    })
}

#[test]
fn distillation() {
    let cfg = NetConfig::desk();
    let data = train_split();
    let mut teacher = trained_teacher().clone();
    teacher.params_mut().freeze();
    let before = teacher.clone();
    let mut student = Network32::student(&cfg).unwrap();
    let mut st = TrainState::new(0);
    train_student(&mut student, &teacher, &data, &desk_options(2000), &mut st).unwrap();

    let untouched = teacher.params().values_bit_identical(before.params());
    let (fs0, fs_end) = (st.history[0].l_fs, st.last().unwrap().l_fs);
    let test = Dataset::<f32>::synthetic(8, 32, TEST_SEED, cfg.n_classes, cfg.scale).unwrap();
    let s = evaluate(&student, &test).unwrap();
    let b = evaluate(&Bicubic, &test).unwrap();
    verdict(
        "distillation",
        untouched && fs_end <= 0.5 * fs0 && s.mean.psnr_y > b.mean.psnr_y,
        &format!(
            "teacher bit-identical: {untouched}; l_fs {fs0:.4} → {fs_end:.4}; test PSNR-Y student {:.3} vs bicubic {:.3} dB (RGB {:.3} vs {:.3})",
            s.mean.psnr_y, b.mean.psnr_y, s.mean.psnr_rgb, b.mean.psnr_rgb
        ),
    );
}

#[test]
fn ablation_direction() {
    let data = train_split();
    let full = corpus_l_t(trained_teacher(), &data);
    let mut plain_cfg = NetConfig::desk();
    plain_cfg.use_pfb = false;
    plain_cfg.use_ffb = false;
    let mut plain = Network32::teacher(&plain_cfg).unwrap();
    train_teacher(&mut plain, &data, &desk_options(2000), &mut TrainState::new(0)).unwrap();
    let ablated = corpus_l_t(&plain, &data);
    verdict(
        "ablation direction",
        full <= ablated,
        &format!("training-split L_T after 2000 steps: PFB+FFB {full:.5} vs no PFB/FFB {ablated:.5}"),
    );
}

fn oracle_psnr(a: &Tensor64, b: &Tensor64) -> f64 {
    let mse = a.data().iter().zip(b.data()).map(|(x, y)| (255.0 * (x - y)).powi(2)).sum::<f64>() / a.len() as f64;
    10.0 * (65025.0 / mse).log10()
}

fn oracle_ssim(a: &Tensor64, b: &Tensor64) -> f64 {
    let s = a.shape();
    let g = |d: f64| (-d * d / (2.0 * 1.5 * 1.5)).exp();
    let z: f64 = (0..11).flat_map(|i| (0..11).map(move |j| g(i as f64 - 5.0) * g(j as f64 - 5.0))).sum();
    let (c1, c2) = ((0.01f64 * 255.0).powi(2), (0.03f64 * 255.0).powi(2));
    let (mut sum, mut n) = (0.0, 0.0);
    for y0 in 0..=s.h - 11 {
        for x0 in 0..=s.w - 11 {
            let mut m = [0.0f64; 5];
            for i in 0..11 {
                for j in 0..11 {
                    let w = g(i as f64 - 5.0) * g(j as f64 - 5.0) / z;
                    let (p, q) = (255.0 * a.at(0, 0, y0 + i, x0 + j), 255.0 * b.at(0, 0, y0 + i, x0 + j));
                    for (k, v) in [p, q, p * p, q * q, p * q].into_iter().enumerate() {
                        m[k] += w * v;
                    }
                }
            }
            let (va, vb, cov) = (m[2] - m[0] * m[0], m[3] - m[1] * m[1], m[4] - m[0] * m[1]);
            sum += (2.0 * m[0] * m[1] + c1) * (2.0 * cov + c2) / ((m[0] * m[0] + m[1] * m[1] + c1) * (va + vb + c2));
            n += 1.0;
        }
    }
    sum / n
}

#[test]
fn metric_oracles() {
    let mut worst: f64 = 0.0;
    for seed in 0..5 {
        let a = Tensor::<f64>::uniform((1, 1, 32, 32), 0.0, 1.0, &mut rng(100 + seed));
        let b = Tensor::<f64>::uniform((1, 1, 32, 32), 0.0, 1.0, &mut rng(200 + seed));
        let c = a.map(|v| 0.7 * v + 0.2 * b.data()[0]);
        worst = worst.max((psnr(&a, &b).unwrap() - oracle_psnr(&a, &b)).abs());
        worst = worst.max((ssim(&a, &b).unwrap() - oracle_ssim(&a, &b)).abs());
        worst = worst.max((ssim(&a, &c).unwrap() - oracle_ssim(&a, &c)).abs());
    }
    let base = Tensor::<f64>::full((1, 3, 32, 32), 0.5);
    let offset = psnr(&base, &base.map(|v| v + 1.0 / 255.0)).unwrap();
    let a = Tensor::<f64>::uniform((1, 3, 32, 32), 0.0, 1.0, &mut rng(300));
    let self_ssim = ssim(&a, &a).unwrap();
    verdict(
        "metric oracles",
        worst <= 1e-9 && (offset - 48.1308).abs() < 5e-5 && self_ssim == 1.0,
        &format!("max deviation from brute force {worst:.2e} (limit 1e-9); uniform 1/255 offset {offset:.4} dB; ssim(a,a) = {self_ssim}"),
    );
}

fn cubic(x: f64) -> f64 {
    let x = x.abs();
    if x < 1.0 {
        1.5 * x.powi(3) - 2.5 * x * x + 1.0
    } else if x < 2.0 {
        -0.5 * x.powi(3) + 2.5 * x * x - 4.0 * x + 2.0
    } else {
        0.0
    }
}

/// Direct 2-D sum of the stretched kernel with edge clamping and normalization.
fn direct_downsample(hr: &Tensor64, f: usize) -> Tensor64 {
    let s = hr.shape();
    let fs = f as f64;
    let r = 2 * f as isize + 1;
    Tensor::from_fn((s.n, s.c, s.h / f, s.w / f), |n, c, i, j| {
        let (cy, cx) = ((i as f64 + 0.5) * fs - 0.5, (j as f64 + 0.5) * fs - 0.5);
        let (mut acc, mut norm) = (0.0, 0.0);
        for y in cy.floor() as isize - r..=cy.ceil() as isize + r {
            for x in cx.floor() as isize - r..=cx.ceil() as isize + r {
                let w = cubic((y as f64 - cy) / fs) * cubic((x as f64 - cx) / fs);
                let (yy, xx) = (y.clamp(0, s.h as isize - 1), x.clamp(0, s.w as isize - 1));
                acc += w * hr.at(n, c, yy as usize, xx as usize);
                norm += w;
            }
        }
        (acc / norm).clamp(0.0, 1.0)
    })
}

#[test]
fn degradation_protocol() {
    let hr = Tensor::<f64>::uniform((1, 3, 128, 128), 0.0, 1.0, &mut rng(400));
    let lr = bicubic_downsample(&hr, 8).unwrap();
    let geometry = lr.shape() == (1, 3, 16, 16).into();
    let constant = Tensor::<f64>::full((1, 3, 128, 128), 0.3);
    let fixed = bicubic_downsample(&constant, 8).unwrap().data().iter().all(|&v| (v - 0.3).abs() < 1e-12);
    let deviation = lr.max_abs_diff(&direct_downsample(&hr, 8));
    verdict(
        "degradation protocol",
        geometry && fixed && deviation <= 1e-6,
        &format!("128x128 → {} at factor 8; constant fixed point: {fixed}; separable vs direct max deviation {deviation:.2e} (limit 1e-6)", lr.shape()),
    );
}
