use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;

fn t64(shape: (usize, usize, usize, usize), v: &[f64]) -> Tensor<f64> {
    Tensor::from_vec(shape, v.to_vec()).unwrap()
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[test]
fn conv_all_ones_3x3() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::full((1, 1, 3, 3), 1.0));
    let w = tape.constant(Tensor::full((1, 1, 3, 3), 1.0));
    let b = tape.constant(Tensor::zeros((1, 1, 1, 1)));
    let y = tape.conv2d(x, w, b, 1, 1).unwrap();
    assert_eq!(tape.value(y).data(), &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
}

#[test]
fn conv_identity_kernel() {
    let mut tape = Tape::<f64>::new();
    let xt = Tensor::randn((2, 1, 4, 5), 1.0, &mut rng(1));
    let x = tape.constant(xt.clone());
    let w = tape.constant(Tensor::full((1, 1, 1, 1), 1.0));
    let b = tape.constant(Tensor::zeros((1, 1, 1, 1)));
    let y = tape.conv2d(x, w, b, 1, 0).unwrap();
    assert_eq!(tape.value(y), &xt);
}

#[test]
fn conv_output_shape_with_stride() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::zeros((1, 2, 7, 6)));
    let w = tape.constant(Tensor::zeros((3, 2, 3, 3)));
    let b = tape.constant(Tensor::zeros((3, 1, 1, 1)));
    let y = tape.conv2d(x, w, b, 2, 1).unwrap();
    assert_eq!(tape.shape(y), Shape::new(1, 3, 4, 3));
}

#[test]
fn conv_shape_errors_name_dimension() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::zeros((1, 2, 4, 4)));
    let w = tape.constant(Tensor::zeros((3, 5, 3, 3)));
    let b = tape.constant(Tensor::zeros((3, 1, 1, 1)));
    let err = tape.conv2d(x, w, b, 1, 1).unwrap_err().to_string();
    assert!(err.contains("input channels"), "{err}");
    let w2 = tape.constant(Tensor::zeros((3, 2, 2, 2)));
    assert!(tape.conv2d(x, w2, b, 1, 1).is_err());
}

#[test]
fn conv_gradients_match_finite_differences() {
    let mut r = rng(7);
    let mut store = ParamStore::<f64>::new();
    let w = store.register("w", Tensor::randn((4, 3, 3, 3), 0.5, &mut r)).unwrap();
    let b = store.register("b", Tensor::randn((4, 1, 1, 1), 0.5, &mut r)).unwrap();
    let x = Tensor::randn((2, 3, 5, 5), 1.0, &mut r);
    let proj = Tensor::randn((2, 4, 5, 5), 1.0, &mut r);
    let report = finite_diff_check(
        |tape, store, inputs| {
            let (wv, bv) = (tape.param(store, w), tape.param(store, b));
            let y = tape.conv2d(inputs[0], wv, bv, 1, 1)?;
            tape.weighted_sum(y, &proj)
        },
        &mut store,
        &[x],
        &GradCheckOptions {
            coords_per_tensor: 1000,
            ..Default::default()
        },
    )
    .unwrap();
    assert!(report.max_rel_error <= 1e-5, "{report:?}");
}

#[test]
fn strided_conv_gradients_match_finite_differences() {
    let mut r = rng(8);
    let mut store = ParamStore::<f64>::new();
    let w = store.register("w", Tensor::randn((2, 3, 3, 3), 0.5, &mut r)).unwrap();
    let b = store.register("b", Tensor::randn((2, 1, 1, 1), 0.5, &mut r)).unwrap();
    let x = Tensor::randn((1, 3, 6, 7), 1.0, &mut r);
    let proj = Tensor::randn((1, 2, 3, 4), 1.0, &mut r);
    let report = finite_diff_check(
        |tape, store, inputs| {
            let (wv, bv) = (tape.param(store, w), tape.param(store, b));
            let y = tape.conv2d(inputs[0], wv, bv, 2, 1)?;
            tape.weighted_sum(y, &proj)
        },
        &mut store,
        &[x],
        &GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.max_rel_error <= 1e-5, "{report:?}");
}

#[test]
fn pixel_shuffle_layout() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t64((1, 4, 1, 1), &[1.0, 2.0, 3.0, 4.0]));
    let y = tape.pixel_shuffle(x, 2).unwrap();
    assert_eq!(tape.shape(y), Shape::new(1, 1, 2, 2));
    assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
    let z = tape.pixel_unshuffle(y, 2).unwrap();
    assert_eq!(tape.shape(z), Shape::new(1, 4, 1, 1));
    assert_eq!(tape.value(z).data(), &[1.0, 2.0, 3.0, 4.0]);
}

#[test]
fn pixel_shuffle_index_formula() {
    // out[n, c, h·r+i, w·r+j] = in[n, c·r²+i·r+j, h, w]
    let r = 2;
    let xt = Tensor::<f64>::from_fn((2, 8, 3, 2), |n, c, h, w| (((n * 8 + c) * 3 + h) * 2 + w) as f64);
    let mut tape = Tape::new();
    let x = tape.constant(xt.clone());
    let y = tape.pixel_shuffle(x, r).unwrap();
    let yt = tape.value(y);
    for n in 0..2 {
        for c in 0..2 {
            for h in 0..3 {
                for w in 0..2 {
                    for i in 0..r {
                        for j in 0..r {
                            assert_eq!(yt.at(n, c, h * r + i, w * r + j), xt.at(n, c * r * r + i * r + j, h, w));
                        }
                    }
                }
            }
        }
    }
}

#[test]
fn shuffle_with_factor_one_is_identity() {
    let xt = Tensor::<f64>::randn((1, 3, 4, 4), 1.0, &mut rng(2));
    let mut tape = Tape::new();
    let x = tape.constant(xt.clone());
    let y = tape.pixel_shuffle(x, 1).unwrap();
    let z = tape.pixel_unshuffle(x, 1).unwrap();
    assert_eq!(tape.value(y), &xt);
    assert_eq!(tape.value(z), &xt);
}

#[test]
fn shuffle_precondition_errors() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::zeros((1, 3, 4, 4)));
    assert!(tape.pixel_shuffle(x, 2).is_err());
    let odd = tape.constant(Tensor::zeros((1, 1, 3, 4)));
    assert!(tape.pixel_unshuffle(odd, 2).is_err());
}

#[test]
fn unshuffle_then_shuffle_round_trips() {
    let xt = Tensor::<f64>::randn((1, 3, 4, 4), 1.0, &mut rng(3));
    let mut tape = Tape::new();
    let x = tape.constant(xt.clone());
    let y = tape.pixel_unshuffle(x, 2).unwrap();
    let z = tape.pixel_shuffle(y, 2).unwrap();
    assert_eq!(tape.value(z), &xt);
}

proptest! {
    #[test]
    fn shuffle_unshuffle_inverse(n in 1usize..3, c in 1usize..4, h in 1usize..4, w in 1usize..4, r in prop::sample::select(vec![2usize, 4]), seed in any::<u64>()) {
        let xt = Tensor::<f32>::randn((n, c * r * r, h, w), 1.0, &mut rng(seed));
        let mut tape = Tape::new();
        let x = tape.constant(xt.clone());
        let y = tape.pixel_shuffle(x, r).unwrap();
        let z = tape.pixel_unshuffle(y, r).unwrap();
        prop_assert_eq!(tape.value(z), &xt);
    }

    #[test]
    fn mean_abs_nonnegative_zero_iff_all_zero(v in prop::collection::vec(prop_oneof![Just(0.0f64), -10.0f64..10.0], 1..40)) {
        let len = v.len();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_vec((1, 1, 1, len), v.clone()).unwrap());
        let m = tape.mean_abs(x).unwrap();
        let val = tape.value(m).item();
        prop_assert!(val >= 0.0);
        prop_assert_eq!(val == 0.0, v.iter().all(|&e| e == 0.0));
    }
}

#[test]
fn nearest_resize_cases() {
    let mut tape = Tape::<f64>::new();
    let one = tape.constant(Tensor::full((1, 1, 1, 1), 2.5));
    let big = tape.nearest_resize(one, 3, 5).unwrap();
    assert!(tape.value(big).data().iter().all(|&v| v == 2.5));

    let x = tape.constant(t64((1, 1, 2, 2), &[1.0, 2.0, 3.0, 4.0]));
    let up = tape.nearest_resize(x, 4, 4).unwrap();
    #[rustfmt::skip]
    let want = [
        1.0, 1.0, 2.0, 2.0,
        1.0, 1.0, 2.0, 2.0,
        3.0, 3.0, 4.0, 4.0,
        3.0, 3.0, 4.0, 4.0,
    ];
    assert_eq!(tape.value(up).data(), &want);
    let same = tape.nearest_resize(x, 2, 2).unwrap();
    assert_eq!(tape.value(same), tape.value(x));
    assert!(tape.nearest_resize(x, 0, 2).is_err());
}

#[test]
fn nearest_resize_gradient_scatters_additively() {
    let mut store = ParamStore::<f64>::new();
    let mut tape = Tape::new();
    let x = tape.leaf(t64((1, 1, 2, 2), &[1.0, 2.0, 3.0, 4.0]));
    let up = tape.nearest_resize(x, 4, 4).unwrap();
    let loss = tape.mean(up).unwrap();
    let g = tape.backward(loss, &mut store).unwrap();
    // each source pixel feeds 4 of 16 outputs
    assert_eq!(g.get(x).unwrap().data(), &[0.25; 4]);
}

#[test]
fn elementwise_definitions() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t64((1, 1, 1, 3), &[-1.0, 0.0, 2.0]));
    let r = tape.relu(x).unwrap();
    assert_eq!(tape.value(r).data(), &[0.0, 0.0, 2.0]);
    let z = tape.constant(Tensor::zeros((1, 1, 1, 1)));
    let s = tape.sigmoid(z).unwrap();
    assert_eq!(tape.value(s).item(), 0.5);
    let big = tape.constant(t64((1, 1, 1, 2), &[-800.0, 800.0]));
    let sb = tape.sigmoid(big).unwrap();
    assert!(tape.value(sb).data().iter().all(|&v| v > 0.0 && v < 1.0));

    let a = tape.constant(Tensor::full((1, 2, 4, 4), 1.0));
    let b = tape.constant(Tensor::full((1, 3, 4, 4), 2.0));
    let c = tape.concat_channels(a, b).unwrap();
    let cv = tape.value(c);
    assert_eq!(cv.shape(), Shape::new(1, 5, 4, 4));
    assert_eq!(cv.at(0, 1, 3, 3), 1.0);
    assert_eq!(cv.at(0, 2, 0, 0), 2.0);
    assert!(tape.add(a, b).is_err());
    let wrong = tape.constant(Tensor::full((1, 2, 3, 4), 2.0));
    assert!(tape.concat_channels(a, wrong).is_err());
}

#[test]
fn mul_broadcast_shapes() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::from_fn((1, 2, 2, 2), |_, c, y, x| (c * 4 + y * 2 + x) as f64));
    let sc = tape.constant(t64((1, 2, 1, 1), &[2.0, 3.0]));
    let sp = tape.constant(t64((1, 1, 2, 2), &[1.0, 0.0, -1.0, 2.0]));
    let a = tape.mul_broadcast(x, sc).unwrap();
    assert_eq!(tape.value(a).data(), &[0.0, 2.0, 4.0, 6.0, 12.0, 15.0, 18.0, 21.0]);
    let b = tape.mul_broadcast(x, sp).unwrap();
    assert_eq!(tape.value(b).data(), &[0.0, 0.0, -2.0, 6.0, 4.0, 0.0, -6.0, 14.0]);
    let bad = tape.constant(Tensor::zeros((1, 2, 2, 1)));
    assert!(tape.mul_broadcast(x, bad).is_err());
}

#[test]
fn reductions() {
    let mut tape = Tape::<f64>::new();
    let z = tape.constant(Tensor::zeros((1, 2, 3, 3)));
    let mz = tape.mean_abs(z).unwrap();
    assert_eq!(tape.value(mz).item(), 0.0);
    let alt = tape.constant(t64((1, 1, 1, 4), &[-1.0, 1.0, -1.0, 1.0]));
    let ma = tape.mean_abs(alt).unwrap();
    assert_eq!(tape.value(ma).item(), 1.0);
    let p = tape.constant(t64((1, 1, 2, 2), &[1.0, 2.0, 3.0, 5.0]));
    let gap = tape.global_avg_pool(p).unwrap();
    assert_eq!(tape.value(gap).item(), 2.75);

    let x = tape.constant(t64((1, 3, 1, 2), &[1.0, 5.0, 4.0, 5.0, 4.0, -1.0]));
    let mean = tape.channel_mean_map(x).unwrap();
    assert_eq!(tape.value(mean).data(), &[3.0, 3.0]);
    let max = tape.channel_max_map(x).unwrap();
    assert_eq!(tape.value(max).data(), &[4.0, 5.0]);
    let empty = tape.constant(Tensor::zeros((0, 1, 1, 1)));
    assert!(matches!(tape.mean_abs(empty), Err(Error::EmptyTensor { .. })));
}

#[test]
fn channel_max_ties_route_to_first_channel() {
    let mut store = ParamStore::<f64>::new();
    let mut tape = Tape::new();
    let x = tape.leaf(t64((1, 3, 1, 1), &[2.0, 2.0, 1.0]));
    let m = tape.channel_max_map(x).unwrap();
    let loss = tape.mean(m).unwrap();
    let g = tape.backward(loss, &mut store).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[1.0, 0.0, 0.0]);
}

#[test]
fn backward_mean_abs_sign_convention() {
    let mut store = ParamStore::<f64>::new();
    let w = store.register("w", t64((1, 1, 1, 1), &[3.0])).unwrap();
    let z = store.register("z", t64((1, 1, 1, 2), &[0.0, -2.0])).unwrap();
    let unused = store.register("unused", t64((1, 1, 1, 1), &[1.0])).unwrap();
    let mut tape = Tape::new();
    let wv = tape.param(&store, w);
    let zv = tape.param(&store, z);
    let _ = tape.param(&store, unused);
    let l1 = tape.mean_abs(wv).unwrap();
    let l2 = tape.mean_abs(zv).unwrap();
    let loss = tape.add(l1, l2).unwrap();
    tape.backward(loss, &mut store).unwrap();
    assert_eq!(store.get(w).grad.data(), &[1.0]);
    assert_eq!(store.get(z).grad.data(), &[0.0, -0.5]);
    assert_eq!(store.get(unused).grad.data(), &[0.0]);
}

#[test]
fn backward_sum_rule_and_accumulation() {
    let mut store = ParamStore::<f64>::new();
    let w = store.register("w", t64((1, 1, 1, 2), &[1.0, -4.0])).unwrap();
    let mut tape = Tape::new();
    let wv = tape.param(&store, w);
    let twice = tape.add(wv, wv).unwrap();
    let loss = tape.mean(twice).unwrap();
    tape.backward(loss, &mut store).unwrap();
    assert_eq!(store.get(w).grad.data(), &[1.0, 1.0]);

    // a second tape accumulates on top
    let mut tape = Tape::new();
    let wv = tape.param(&store, w);
    let loss = tape.mean(wv).unwrap();
    tape.backward(loss, &mut store).unwrap();
    assert_eq!(store.get(w).grad.data(), &[1.5, 1.5]);
}

#[test]
fn backward_contract_errors() {
    let mut store = ParamStore::<f64>::new();
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::full((1, 1, 2, 2), 1.0));
    assert!(matches!(tape.backward(x, &mut store), Err(Error::NotScalar(_))));
    let loss = tape.mean(x).unwrap();
    tape.backward(loss, &mut store).unwrap();
    assert!(matches!(tape.backward(loss, &mut store), Err(Error::TapeConsumed)));
}

#[test]
fn frozen_and_foreign_parameters() {
    let mut a = ParamStore::<f64>::new();
    let wa = a.register("w", Tensor::full((1, 1, 1, 1), 2.0)).unwrap();
    let mut b = ParamStore::<f64>::new();

    let mut tape = Tape::new();
    let v = tape.param(&a, wa);
    let loss = tape.mean(v).unwrap();
    assert!(matches!(tape.backward(loss, &mut b), Err(Error::ForeignParameter(_))));

    a.freeze();
    let mut tape = Tape::new();
    let v = tape.param(&a, wa);
    let loss = tape.mean(v).unwrap();
    tape.backward(loss, &mut b).unwrap();
    assert_eq!(a.get(wa).grad.data(), &[0.0]);
}

#[test]
fn inference_tape_records_no_gradients() {
    let mut store = ParamStore::<f64>::new();
    let w = store.register("w", Tensor::full((1, 1, 1, 1), 2.0)).unwrap();
    let mut tape = Tape::inference();
    let v = tape.param(&store, w);
    let loss = tape.mean(v).unwrap();
    tape.backward(loss, &mut store).unwrap();
    assert_eq!(store.get(w).grad.data(), &[0.0]);
}

#[test]
fn ops_do_not_mutate_inputs_and_are_deterministic() {
    let xt = Tensor::<f64>::randn((1, 2, 4, 4), 1.0, &mut rng(4));
    let wt = Tensor::<f64>::randn((3, 2, 3, 3), 1.0, &mut rng(5));
    let run = || {
        let mut tape = Tape::new();
        let x = tape.constant(xt.clone());
        let w = tape.constant(wt.clone());
        let b = tape.constant(Tensor::zeros((3, 1, 1, 1)));
        let y = tape.conv2d(x, w, b, 1, 1).unwrap();
        let y = tape.sigmoid(y).unwrap();
        tape.value(y).clone()
    };
    let before = xt.clone();
    assert_eq!(run(), run());
    assert_eq!(xt, before);
}

#[test]
fn gradcheck_linear_function_is_exact() {
    let mut store = ParamStore::<f64>::new();
    let w = store.register("w", Tensor::randn((1, 2, 3, 3), 1.0, &mut rng(9))).unwrap();
    let report = finite_diff_check(
        |tape, store, _| {
            let v = tape.param(store, w);
            tape.mean(v)
        },
        &mut store,
        &[],
        &GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.max_rel_error <= 1e-9, "{report:?}");
}

/// Inputs whose relu pre-activations sit at least `margin` from zero.
fn nudge_away_from_zero(t: &Tensor<f64>, margin: f64) -> Tensor<f64> {
    t.map(|v| if v.abs() < margin { v.signum() * margin + v } else { v })
}

#[test]
fn gradcheck_conv_relu_composite() {
    let mut r = rng(10);
    let mut store = ParamStore::<f64>::new();
    let w = store.register("w", Tensor::randn((3, 2, 3, 3), 0.5, &mut r)).unwrap();
    let b = store.register("b", Tensor::randn((3, 1, 1, 1), 0.1, &mut r)).unwrap();
    let x = Tensor::randn((1, 2, 6, 6), 1.0, &mut r);
    // check the pre-activations are clear of the kink
    let mut probe = Tape::new();
    let (xv, wv, bv) = (probe.constant(x.clone()), probe.param(&store, w), probe.param(&store, b));
    let pre = probe.conv2d(xv, wv, bv, 1, 1).unwrap();
    let nudged = nudge_away_from_zero(probe.value(pre), 1e-3);
    assert!(nudged.data().iter().all(|v| v.abs() >= 1e-3));
    let min_gap = probe.value(pre).data().iter().map(|v| v.abs()).fold(f64::MAX, f64::min);
    assert!(min_gap > 1e-4, "seed lands on a relu kink");

    let proj = Tensor::randn((1, 3, 6, 6), 1.0, &mut r);
    let report = finite_diff_check(
        |tape, store, inputs| {
            let (wv, bv) = (tape.param(store, w), tape.param(store, b));
            let y = tape.conv2d(inputs[0], wv, bv, 1, 1)?;
            let y = tape.relu(y)?;
            tape.weighted_sum(y, &proj)
        },
        &mut store,
        &[x],
        &GradCheckOptions {
            coords_per_tensor: 1000,
            ..Default::default()
        },
    )
    .unwrap();
    assert!(report.max_rel_error <= 1e-5, "{report:?}");
}

#[test]
fn gradcheck_every_primitive() {
    let mut r = rng(11);
    let mut store = ParamStore::<f64>::new();
    let a = Tensor::randn((2, 3, 4, 4), 1.0, &mut r);
    let b = Tensor::randn((2, 3, 4, 4), 1.0, &mut r);
    let gate_c = Tensor::randn((2, 3, 1, 1), 1.0, &mut r);
    let small = Tensor::randn((2, 1, 3, 3), 1.0, &mut r);
    let proj = Tensor::randn((2, 7, 4, 4), 1.0, &mut r);
    let report = finite_diff_check(
        |tape, _, i| {
            let s = tape.sub(i[0], i[1])?;
            let s = tape.sigmoid(s)?;
            let g = tape.sigmoid(i[2])?;
            let m = tape.mul_broadcast(i[0], g)?;
            let sp_mean = tape.channel_mean_map(i[1])?;
            let sp_max = tape.channel_max_map(i[0])?;
            let sp = tape.add(sp_mean, sp_max)?;
            let m2 = tape.mul_broadcast(m, sp)?;
            let up = tape.nearest_resize(i[3], 4, 4)?;
            let up2 = tape.bicubic_resize(i[3], 4, 4)?;
            let up = tape.add(up, up2)?;
            let c = tape.concat_channels(m2, s)?;
            let c = tape.concat_channels(c, up)?;
            let un = tape.pixel_unshuffle(c, 2)?;
            let sh = tape.pixel_shuffle(un, 2)?;
            let sh = tape.scale(sh, 0.7)?;
            let pooled = tape.global_avg_pool(i[1])?;
            let l1 = tape.weighted_sum(sh, &proj)?;
            let l2 = tape.mean(pooled)?;
            let l3 = tape.mean_abs(i[0])?;
            let l = tape.add(l1, l2)?;
            tape.add(l, l3)
        },
        &mut store,
        &[a, b, gate_c, small],
        &GradCheckOptions {
            coords_per_tensor: 200,
            ..Default::default()
        },
    )
    .unwrap();
    assert!(report.max_rel_error <= 1e-5, "{report:?}");
}

#[test]
fn corrupted_relu_backward_is_detected() {
    let mut r = rng(12);
    let mut store = ParamStore::<f64>::new();
    let x = Tensor::randn((1, 1, 4, 4), 1.0, &mut r);
    let proj = Tensor::randn((1, 1, 4, 4), 1.0, &mut r);
    let check = |store: &mut ParamStore<f64>| {
        finite_diff_check(
            |tape, _, i| {
                let y = tape.relu(i[0])?;
                tape.weighted_sum(y, &proj)
            },
            store,
            &[x.clone()],
            &GradCheckOptions::default(),
        )
        .unwrap()
    };
    assert!(check(&mut store).max_rel_error <= 1e-5);
    let bad = fault::with_corrupted_relu_backward(|| check(&mut store));
    assert!(bad.max_rel_error > 0.1);
    assert!(check(&mut store).max_rel_error <= 1e-5);
}
