//! The gradient-check and invariant suite behind `pkdn selftest`.
//!
//! Every check runs in 64-bit. Gradient checks project the output onto a
//! fixed random tensor and compare against [`finite_diff_check`].

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{finite_diff_check, GradCheckOptions, Tape, Var};
use crate::data::synth_face;
use crate::error::Result;
use crate::net::{NetConfig, NetKind, Network};
use crate::nn::{
    BlockConfig, ChannelAttention, Conv2d, DownsampleBlock, Ffb, Init, Pfb, ProjectionFunction, Rcab, Rcag,
    SpatialAttention, UpsampleBlock,
};
use crate::param::{ParamBuilder, ParamStore};
use crate::resample::bicubic_resize;
use crate::tensor::Tensor;
use crate::train::{student_objective, LossWeights};

pub const GRADIENT_TOLERANCE: f64 = 1e-5;

/// Names of the building blocks the suite must cover.
pub const BLOCK_NAMES: [&str; 9] = [
    "channel_attention",
    "spatial_attention",
    "rcab",
    "rcag",
    "pfb",
    "projection_function",
    "ffb",
    "downsample_block",
    "upsample_block",
];

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    /// Worst relative error of a gradient check; `None` for exact checks.
    pub max_rel_error: Option<f64>,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    /// `name  max_rel_error  PASS|FAIL  detail`, tab-separated.
    pub fn line(&self) -> String {
        let err = self.max_rel_error.map_or_else(|| "exact".to_string(), |e| format!("{e:.3e}"));
        let verdict = if self.passed { "PASS" } else { "FAIL" };
        format!("{}\t{err}\t{verdict}\t{}", self.name, self.detail)
    }
}

#[derive(Clone, Debug)]
pub struct SelfTestReport {
    pub checks: Vec<Check>,
    pub elapsed: Duration,
}

impl SelfTestReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.passed)
    }
}

type Fwd<'a> = Box<dyn Fn(&mut Tape<f64>, &ParamStore<f64>, &[Var]) -> Result<Var> + 'a>;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn randn(shape: (usize, usize, usize, usize), seed: u64) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, &mut rng(seed))
}

fn one_hot(classes: usize, h: usize, w: usize, seed: u64) -> Tensor<f64> {
    let mut r = rng(seed);
    let labels: Vec<usize> = (0..h * w).map(|_| r.random_range(0..classes)).collect();
    Tensor::from_fn((1, classes, h, w), |_, c, y, x| if labels[y * w + x] == c { 1.0 } else { 0.0 })
}

/// Builds a block into a fresh store; biases get small random values so the
/// check covers them too.
fn build<B>(seed: u64, f: impl FnOnce(&mut ParamBuilder<'_, f64, ChaCha8Rng>) -> Result<B>) -> Result<(B, ParamStore<f64>)> {
    let mut store = ParamStore::new();
    let mut r = rng(seed);
    let block = f(&mut ParamBuilder::new(&mut store, &mut r))?;
    randomize_biases(&mut store, seed);
    Ok((block, store))
}

fn randomize_biases(store: &mut ParamStore<f64>, seed: u64) {
    let mut r = rng(seed ^ 0xb1a5);
    for p in store.iter_mut().filter(|p| p.name.ends_with(".b")) {
        p.value = Tensor::randn(p.value.shape(), 0.05, &mut r);
    }
}

fn grad_check(name: &str, mut store: ParamStore<f64>, inputs: Vec<Tensor<f64>>, coords: usize, f: Fwd<'_>) -> Check {
    let mut run = || -> Result<(f64, String)> {
        let mut tape = Tape::inference();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &store, &vars)?;
        let proj = Tensor::randn(tape.shape(out), 1.0, &mut rng(0x9e0));
        let opts = GradCheckOptions {
            coords_per_tensor: coords,
            ..GradCheckOptions::default()
        };
        let r = finite_diff_check(
            |tape, store, xs| {
                let y = f(tape, store, xs)?;
                tape.weighted_sum(y, &proj)
            },
            &mut store,
            &inputs,
            &opts,
        )?;
        Ok((r.max_rel_error, format!("{} coords; worst {}", r.coords_checked, r.worst)))
    };
    match run() {
        Ok((e, detail)) => Check {
            name: name.into(),
            max_rel_error: Some(e),
            passed: e <= GRADIENT_TOLERANCE,
            detail,
        },
        Err(e) => Check {
            name: name.into(),
            max_rel_error: None,
            passed: false,
            detail: format!("error: {e}"),
        },
    }
}

fn exact(name: &str, f: impl FnOnce() -> Result<(bool, String)>) -> Check {
    let (passed, detail) = f().unwrap_or_else(|e| (false, format!("error: {e}")));
    Check {
        name: name.into(),
        max_rel_error: None,
        passed,
        detail,
    }
}

fn bits_equal(a: &Tensor<f64>, b: &Tensor<f64>) -> bool {
    a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
}

fn primitive_checks(out: &mut dyn FnMut(Check)) {
    let none = ParamStore::<f64>::new;
    let x = || randn((2, 3, 5, 6), 1);
    let y = || randn((2, 3, 5, 6), 2);
    let conv = |stride: usize, padding: usize, seed: u64| -> Check {
        let mut store = ParamStore::new();
        let mut r = rng(seed);
        let w = store.register("w", Tensor::randn((4, 3, 3, 3), 0.3, &mut r)).expect("fresh store");
        let b = store.register("b", Tensor::randn((1, 4, 1, 1), 0.1, &mut r)).expect("fresh store");
        grad_check(
            &format!("conv2d(stride={stride},padding={padding})"),
            store,
            vec![randn((2, 3, 7, 6), seed + 1)],
            64,
            Box::new(move |t, s, v| {
                let (wv, bv) = (t.param(s, w), t.param(s, b));
                t.conv2d(v[0], wv, bv, stride, padding)
            }),
        )
    };
    out(conv(1, 1, 10));
    out(conv(2, 0, 12));
    out(grad_check("pixel_shuffle", none(), vec![randn((1, 8, 3, 2), 3)], 64, Box::new(|t, _, v| t.pixel_shuffle(v[0], 2))));
    out(grad_check("pixel_unshuffle", none(), vec![randn((1, 2, 6, 4), 4)], 64, Box::new(|t, _, v| t.pixel_unshuffle(v[0], 2))));
    out(grad_check("nearest_resize", none(), vec![randn((1, 2, 3, 4), 5)], 64, Box::new(|t, _, v| t.nearest_resize(v[0], 7, 9))));
    out(grad_check("bicubic_resize(up)", none(), vec![randn((1, 2, 4, 5), 6)], 64, Box::new(|t, _, v| t.bicubic_resize(v[0], 16, 20))));
    out(grad_check("bicubic_resize(down)", none(), vec![randn((1, 2, 16, 12), 7)], 64, Box::new(|t, _, v| t.bicubic_resize(v[0], 4, 3))));
    out(grad_check("add", none(), vec![x(), y()], 32, Box::new(|t, _, v| t.add(v[0], v[1]))));
    out(grad_check("sub", none(), vec![x(), y()], 32, Box::new(|t, _, v| t.sub(v[0], v[1]))));
    out(grad_check("scale", none(), vec![x()], 32, Box::new(|t, _, v| t.scale(v[0], -1.7))));
    out(grad_check(
        "mul_broadcast(channel)",
        none(),
        vec![x(), randn((2, 3, 1, 1), 8)],
        32,
        Box::new(|t, _, v| t.mul_broadcast(v[0], v[1])),
    ));
    out(grad_check(
        "mul_broadcast(spatial)",
        none(),
        vec![x(), randn((2, 1, 5, 6), 9)],
        32,
        Box::new(|t, _, v| t.mul_broadcast(v[0], v[1])),
    ));
    out(grad_check("relu", none(), vec![x()], 64, Box::new(|t, _, v| t.relu(v[0]))));
    out(grad_check("sigmoid", none(), vec![x()], 64, Box::new(|t, _, v| t.sigmoid(v[0]))));
    out(grad_check(
        "concat_channels",
        none(),
        vec![x(), randn((2, 2, 5, 6), 11)],
        32,
        Box::new(|t, _, v| t.concat_channels(v[0], v[1])),
    ));
    out(grad_check("global_avg_pool", none(), vec![x()], 64, Box::new(|t, _, v| t.global_avg_pool(v[0]))));
    out(grad_check("channel_mean_map", none(), vec![x()], 64, Box::new(|t, _, v| t.channel_mean_map(v[0]))));
    out(grad_check("channel_max_map", none(), vec![x()], 64, Box::new(|t, _, v| t.channel_max_map(v[0]))));
    out(grad_check("mean_abs", none(), vec![x()], 64, Box::new(|t, _, v| t.mean_abs(v[0]))));
    out(grad_check("mean", none(), vec![x()], 64, Box::new(|t, _, v| t.mean(v[0]))));
}

fn block_checks(out: &mut dyn FnMut(Check)) -> Result<()> {
    let cfg = BlockConfig {
        channels: 8,
        reduction_ratio: 4,
        spatial_kernel: 7,
        rcab_per_group: 2,
    };
    let feat = |seed| randn((1, 8, 6, 6), seed);
    let (b, s) = build(30, |pb| ChannelAttention::new(pb, "ca", &cfg))?;
    out(grad_check("channel_attention", s, vec![randn((2, 8, 6, 6), 31)], 16, Box::new(|t, s, v| b.forward(t, s, v[0]))));
    let (b, s) = build(32, |pb| SpatialAttention::new(pb, "sa", &cfg))?;
    out(grad_check("spatial_attention", s, vec![randn((2, 8, 6, 6), 33)], 16, Box::new(|t, s, v| b.forward(t, s, v[0]))));
    let (b, s) = build(34, |pb| Rcab::new(pb, "rcab", &cfg))?;
    out(grad_check("rcab", s, vec![feat(35)], 16, Box::new(|t, s, v| b.forward(t, s, v[0]))));
    let (b, s) = build(36, |pb| Rcag::new(pb, "rcag", &cfg))?;
    out(grad_check("rcag", s, vec![feat(37)], 16, Box::new(|t, s, v| b.forward(t, s, v[0]))));
    let (b, s) = build(38, |pb| Pfb::new(pb, "pfb", &cfg, 4))?;
    out(grad_check(
        "pfb",
        s,
        vec![randn((1, 8, 8, 8), 39), one_hot(4, 16, 16, 40)],
        16,
        Box::new(|t, s, v| b.forward(t, s, v[0], v[1])),
    ));
    let (b, s) = build(41, |pb| ProjectionFunction::new(pb, "pf", 8))?;
    out(grad_check("projection_function", s, vec![feat(42)], 16, Box::new(|t, s, v| b.forward(t, s, v[0]))));
    let (b, s) = build(43, |pb| Ffb::new(pb, "ffb", &cfg))?;
    out(grad_check("ffb", s, vec![feat(44), feat(45)], 16, Box::new(|t, s, v| b.forward(t, s, v[0], v[1]))));
    let (b, s) = build(46, |pb| DownsampleBlock::new(pb, "down", 8))?;
    out(grad_check("downsample_block", s, vec![randn((1, 8, 8, 8), 47)], 16, Box::new(|t, s, v| b.forward(t, s, v[0]))));
    let (b, s) = build(48, |pb| UpsampleBlock::new(pb, "up", 8))?;
    out(grad_check("upsample_block", s, vec![randn((1, 8, 4, 4), 49)], 16, Box::new(|t, s, v| b.forward(t, s, v[0]))));
    let (b, s) = build(50, |pb| Conv2d::new(pb, "conv", 8, 4, 3, Init::Relu))?;
    out(grad_check("conv_layer", s, vec![feat(51)], 16, Box::new(|t, s, v| b.forward(t, s, v[0]))));
    Ok(())
}

fn loss_check(out: &mut dyn FnMut(Check)) {
    let w = LossWeights {
        lambda_ts: 0.7,
        lambda_fs: 0.3,
    };
    let inputs = vec![
        randn((1, 3, 8, 8), 60),
        randn((1, 3, 8, 8), 61),
        randn((1, 3, 8, 8), 62),
        randn((1, 4, 4, 4), 63),
        randn((1, 4, 4, 4), 64),
        randn((1, 4, 2, 2), 65),
        randn((1, 4, 2, 2), 66),
    ];
    let f: Fwd<'_> = Box::new(move |t, _, v| {
        let (total, _) = student_objective(t, v[0], v[1], v[2], &[v[3], v[5]], &[v[4], v[6]], w)?;
        Ok(total)
    });
    out(grad_check("student_loss", ParamStore::new(), inputs, 32, f));
}

fn network_checks(out: &mut dyn FnMut(Check)) -> Result<()> {
    let cfg = NetConfig::toy();
    let lr = Tensor::uniform((1, 3, 8, 8), 0.0, 1.0, &mut rng(70));
    for kind in [NetKind::Teacher, NetKind::Student] {
        let mut net = Network::<f64>::new(kind, &cfg)?;
        randomize_biases(net.params_mut(), 71);
        let store = net.params().clone();
        let mut inputs = vec![lr.clone()];
        if kind == NetKind::Teacher {
            inputs.push(one_hot(cfg.n_classes, 32, 32, 72));
        }
        let net = &net;
        out(grad_check(
            &format!("{kind}_network(toy,32x32)"),
            store,
            inputs,
            4,
            Box::new(move |t, s, v| Ok(net.forward_with(t, s, v[0], v.get(1).copied())?.sr)),
        ));
    }
    Ok(())
}

fn invariant_checks(out: &mut dyn FnMut(Check)) {
    out(exact("pixel_shuffle_round_trip", || {
        let x = randn((2, 12, 3, 5), 80);
        let mut t = Tape::inference();
        let v = t.constant(x.clone());
        let s = t.pixel_shuffle(v, 2)?;
        let back = t.pixel_unshuffle(s, 2)?;
        let y = randn((1, 3, 8, 6), 81);
        let w = t.constant(y.clone());
        let u = t.pixel_unshuffle(w, 2)?;
        let fwd = t.pixel_shuffle(u, 2)?;
        let ok = bits_equal(t.value(back), &x) && bits_equal(t.value(fwd), &y);
        Ok((ok, "unshuffle∘shuffle and shuffle∘unshuffle are identities".into()))
    }));
    out(exact("zero_weight_networks_are_bicubic", || {
        let cfg = NetConfig::toy();
        let (hr, parsing) = synth_face::<f64>(3, 32, cfg.n_classes)?;
        let lr = bicubic_resize(&hr, 8, 8);
        let up = bicubic_resize(&lr, 32, 32);
        let mut ok = true;
        for kind in [NetKind::Teacher, NetKind::Student] {
            let mut net = Network::<f64>::new(kind, &cfg)?;
            net.params_mut().zero_values();
            let p = net.requires_parsing().then_some(&parsing);
            ok &= bits_equal(&net.predict(&lr, p)?.sr, &up);
        }
        Ok((ok, "teacher and student outputs equal bicubic upsampling bit for bit".into()))
    }));
    out(exact("tap_congruence", || {
        let mut r = rng(82);
        for _ in 0..10 {
            let mut cfg = NetConfig::toy();
            cfg.stages = r.random_range(1..=3);
            cfg.blocks_per_stage = r.random_range(1..=2);
            cfg.scale = [2, 4][r.random_range(0..2)];
            cfg.seed = r.random();
            let side = 8 << cfg.stages;
            let lr = Tensor::uniform((1, 3, side / cfg.scale, side / cfg.scale), 0.0, 1.0, &mut r);
            let t = Network::<f64>::teacher(&cfg)?.predict(&lr, Some(&one_hot(cfg.n_classes, side, side, 83)))?;
            let s = Network::<f64>::student(&cfg)?.predict(&lr, None)?;
            let shapes = |p: &crate::net::Prediction<f64>| p.taps.iter().map(|t| t.shape()).collect::<Vec<_>>();
            if shapes(&t) != shapes(&s) || t.taps.len() != 2 * cfg.stages {
                return Ok((false, format!("taps differ for {cfg:?}")));
            }
        }
        Ok((true, "10 random configurations".into()))
    }));
}

/// Runs every check, handing each to `progress` as it completes.
pub fn run_with(mut progress: impl FnMut(&Check)) -> SelfTestReport {
    let started = Instant::now();
    let mut checks = Vec::new();
    let mut push = |c: Check| {
        progress(&c);
        checks.push(c);
    };
    primitive_checks(&mut push);
    if let Err(e) = block_checks(&mut push) {
        push(exact("blocks", || Err(e)));
    }
    loss_check(&mut push);
    if let Err(e) = network_checks(&mut push) {
        push(exact("networks", || Err(e)));
    }
    invariant_checks(&mut push);
    SelfTestReport {
        checks,
        elapsed: started.elapsed(),
    }
}

pub fn run() -> SelfTestReport {
    run_with(|_| {})
}
