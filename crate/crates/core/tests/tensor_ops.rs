use flowtrack::tensor::{check_gradients, Align, Tape, Tensor, Var};
use flowtrack::Error;
use proptest::prelude::*;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape, data.to_vec()).unwrap()
}

fn wavy(shape: &[usize], seed: f64) -> Tensor {
    Tensor::from_fn(shape, |i| ((i as f64 + 1.0) * 0.7123 + seed).sin())
}

#[test]
fn conv2d_identity_kernel() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[1, 3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]));
    let k = tape.constant(t(&[1, 1, 1, 1], &[1.0]));
    let y = tape.conv2d(x, k, 1, 0).unwrap();
    assert_eq!(tape.value(y), tape.value(x));
}

#[test]
fn conv2d_ones_sliding_window() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::full(&[1, 4, 4], 1.0));
    let k = tape.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
    let y = tape.conv2d(x, k, 1, 1).unwrap();
    let v = tape.value(y);
    assert_eq!(v.shape(), &[1, 4, 4]);
    for (yy, xx) in [(1, 1), (1, 2), (2, 1), (2, 2)] {
        assert_eq!(v.at3(0, yy, xx), 9.0);
    }
    for (yy, xx) in [(0, 0), (0, 3), (3, 0), (3, 3)] {
        assert_eq!(v.at3(0, yy, xx), 4.0);
    }
    assert_eq!(v.at3(0, 0, 1), 6.0);
}

#[test]
fn conv2d_stride_two_shape() {
    let mut tape = Tape::new();
    let x = tape.constant(wavy(&[1, 8, 8], 0.0));
    let k = tape.constant(wavy(&[3, 1, 3, 3], 1.0));
    let y = tape.conv2d(x, k, 2, 1).unwrap();
    assert_eq!(tape.shape(y), &[3, 4, 4]);
}

#[test]
fn conv2d_channel_mismatch_is_shape_error() {
    let mut tape = Tape::new();
    let x = tape.constant(wavy(&[2, 5, 5], 0.0));
    let k = tape.constant(wavy(&[1, 3, 3, 3], 0.0));
    let err = tape.conv2d(x, k, 1, 1).unwrap_err();
    assert!(matches!(err, Error::Shape { op: "conv2d", .. }), "{err}");
    assert!(err.to_string().contains("2 channels"));
}

#[test]
fn attention_identical_keys_average_values() {
    let mut tape = Tape::new();
    let q = tape.constant(wavy(&[3, 4], 0.3));
    let k = tape.constant(Tensor::from_fn(&[5, 4], |i| (i % 4) as f64 * 0.2));
    let v = tape.constant(wavy(&[5, 4], 2.0));
    let o = tape.attention(q, k, v, 2).unwrap();
    let vd = tape.value(v).data().to_vec();
    for r in 0..3 {
        for c in 0..4 {
            let mean: f64 = (0..5).map(|j| vd[j * 4 + c]).sum::<f64>() / 5.0;
            assert!((tape.value(o).data()[r * 4 + c] - mean).abs() < 1e-12);
        }
    }
}

#[test]
fn attention_saturates_on_dominant_logit() {
    let mut tape = Tape::new();
    let q = tape.constant(t(&[1, 1], &[1.0]));
    let k = tape.constant(t(&[3, 1], &[50.0, 0.0, 0.0]));
    let v = tape.constant(t(&[3, 1], &[7.0, -3.0, 11.0]));
    let o = tape.attention(q, k, v, 1).unwrap();
    assert!((tape.value(o).item() - 7.0).abs() < 1e-9);
}

#[test]
fn attention_matches_hand_softmax_mixture() {
    // logits q·k / sqrt(1): 2 and 1
    let p0 = 2f64.exp() / (2f64.exp() + 1f64.exp());
    let expected = 3.0 * p0 + -(1.0 - p0);
    let mut tape = Tape::new();
    let q = tape.constant(t(&[1, 1], &[2.0]));
    let k = tape.constant(t(&[2, 1], &[1.0, 0.5]));
    let v = tape.constant(t(&[2, 1], &[3.0, -1.0]));
    let o = tape.attention(q, k, v, 1).unwrap();
    assert!((tape.value(o).item() - expected).abs() < 1e-12);
}

#[test]
fn attention_rejects_indivisible_heads() {
    let mut tape = Tape::new();
    let q = tape.constant(wavy(&[2, 6], 0.0));
    let err = tape.attention(q, q, q, 4).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
}

#[test]
fn upsample_constant_map() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::full(&[2, 3, 3], 3.5));
    let y = tape.upsample_bilinear(x, 2).unwrap();
    assert_eq!(tape.shape(y), &[2, 6, 6]);
    assert!(tape.value(y).data().iter().all(|v| *v == 3.5));
    assert_eq!(tape.value(y).sum() / 72.0, 3.5);
}

#[test]
fn upsample_row_is_monotone_and_corner_aligned() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[1, 1, 2], &[0.0, 1.0]));
    let y = tape.upsample_bilinear(x, 2).unwrap();
    assert_eq!(tape.shape(y), &[1, 2, 4]);
    for row in tape.value(y).data().chunks(4) {
        assert!(row.windows(2).all(|w| w[0] <= w[1]));
        assert_eq!(row[0], 0.0);
        assert_eq!(row[3], 1.0);
    }
}

#[test]
fn upsample_matches_closed_form_bilinear() {
    // input f(y, x) = x + y on the 2x2 lattice; bilinear interpolation of it is exactly x + y
    let mut tape = Tape::new();
    let x = tape.constant(t(&[1, 2, 2], &[0.0, 1.0, 1.0, 2.0]));
    let y = tape.upsample_bilinear(x, 2).unwrap();
    let v = tape.value(y);
    for oy in 0..4 {
        for ox in 0..4 {
            let sy = oy as f64 * 1.0 / 3.0;
            let sx = ox as f64 * 1.0 / 3.0;
            assert!((v.at3(0, oy, ox) - (sx + sy)).abs() < 1e-12);
        }
    }
}

#[test]
fn center_aligned_upsample_shifts_with_its_input() {
    let n = 8;
    let f = |x: usize| ((x * x) as f64 * 0.37).sin();
    let a = Tensor::from_fn(&[1, 1, n], &f);
    let b = Tensor::from_fn(&[1, 1, n], |x| f(x + 1));
    let mut tape = Tape::new();
    let (a, b) = (tape.constant(a), tape.constant(b));
    let ya = tape.upsample_bilinear_aligned(a, 4, Align::Centers).unwrap();
    let yb = tape.upsample_bilinear_aligned(b, 4, Align::Centers).unwrap();
    let (ya, yb) = (tape.value(ya).data(), tape.value(yb).data());
    // away from the clamped borders, a one-cell input shift is a four-cell output shift
    for x in 4..4 * (n - 2) {
        assert!((yb[x] - ya[x + 4]).abs() < 1e-12, "x = {x}");
    }
    let c = tape.constant(Tensor::full(&[2, 3, 3], -1.25));
    let yc = tape.upsample_bilinear_aligned(c, 2, Align::Centers).unwrap();
    assert!(tape.value(yc).data().iter().all(|v| *v == -1.25));
}

#[test]
fn upsample_rejects_zero_factor() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::full(&[1, 2, 2], 1.0));
    assert!(matches!(tape.upsample_bilinear(x, 0), Err(Error::Config(_))));
}

#[test]
fn masked_l1_examples() {
    let mut tape = Tape::new();
    let p = tape.param(t(&[3], &[1.0, -2.0, 3.0]));
    let z = tape.constant(Tensor::zeros(&[3]));
    let ones = tape.constant(Tensor::full(&[3], 1.0));
    let same = tape.masked_l1(p, p, ones).unwrap();
    assert_eq!(tape.value(same).item(), 0.0);
    let l = tape.masked_l1(p, z, ones).unwrap();
    assert!((tape.value(l).item() - 2.0).abs() < 1e-15);
    tape.backward(l).unwrap();
    let g = tape.grad(p).unwrap().data().to_vec();
    assert_eq!(g, vec![1.0 / 3.0, -1.0 / 3.0, 1.0 / 3.0]);
}

#[test]
fn masked_l1_all_zero_mask() {
    let mut tape = Tape::new();
    let p = tape.param(t(&[2], &[4.0, -1.0]));
    let z = tape.constant(Tensor::zeros(&[2]));
    let m = tape.constant(Tensor::zeros(&[2]));
    let l = tape.masked_l1(p, z, m).unwrap();
    assert_eq!(tape.value(l).item(), 0.0);
    tape.backward(l).unwrap();
    assert!(tape.grad(p).unwrap().data().iter().all(|g| *g == 0.0));
}

#[test]
fn backward_square_sum() {
    let mut tape = Tape::new();
    let x = tape.param(t(&[1], &[3.0]));
    let sq = tape.mul(x, x).unwrap();
    let l = tape.sum(sq);
    tape.backward(l).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[6.0]);
}

#[test]
fn backward_fan_out_accumulates() {
    let mut tape = Tape::new();
    let x = tape.param(t(&[2], &[1.5, -0.5]));
    let a = tape.scale(x, 3.0);
    let b = tape.scale(x, -1.25);
    let s = tape.add(a, b).unwrap();
    let l = tape.sum(s);
    tape.backward(l).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[1.75, 1.75]);
}

#[test]
fn backward_rejects_non_scalar() {
    let mut tape = Tape::new();
    let x = tape.param(t(&[2], &[1.0, 2.0]));
    assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
}

#[test]
fn every_reachable_param_gets_grad() {
    let mut tape = Tape::new();
    let a = tape.param(wavy(&[2, 3], 0.1));
    let b = tape.param(wavy(&[3, 2], 0.2));
    let unused = tape.param(wavy(&[4], 0.3));
    let m = tape.matmul(a, b).unwrap();
    let l = tape.sum(m);
    tape.backward(l).unwrap();
    assert!(tape.grad(a).is_some() && tape.grad(b).is_some());
    assert!(tape.grad(unused).is_none());
}

fn sum_of_weighted(tape: &mut Tape, y: Var) -> Var {
    // a fixed, non-symmetric readout keeps every output coordinate in play
    let w = wavy(tape.shape(y), 4.2);
    let w = tape.constant(w);
    let p = tape.mul(y, w).unwrap();
    tape.sum(p)
}

#[test]
fn gradcheck_every_op() {
    type Build = Box<dyn Fn(&mut Tape, &[Var]) -> flowtrack::Result<Var>>;
    let cases: Vec<(&str, Vec<Tensor>, Build)> = vec![
        ("add", vec![wavy(&[3, 2], 0.0), wavy(&[3, 2], 1.0)], Box::new(|t, v| {
            let y = t.add(v[0], v[1])?;
            Ok(sum_of_weighted(t, y))
        })),
        ("sub_mul", vec![wavy(&[5], 0.0), wavy(&[5], 1.0)], Box::new(|t, v| {
            let d = t.sub(v[0], v[1])?;
            let y = t.mul(d, v[0])?;
            Ok(sum_of_weighted(t, y))
        })),
        ("matmul_transpose", vec![wavy(&[3, 4], 0.0), wavy(&[2, 4], 1.0)], Box::new(|t, v| {
            let bt = t.transpose(v[1])?;
            let y = t.matmul(v[0], bt)?;
            Ok(sum_of_weighted(t, y))
        })),
        ("biases", vec![wavy(&[3, 2, 2], 0.0), wavy(&[3], 1.0), wavy(&[4, 3], 2.0)], Box::new(|t, v| {
            let a = t.add_channel_bias(v[0], v[1])?;
            let b = t.add_row_bias(v[2], v[1])?;
            let (sa, sb) = (sum_of_weighted(t, a), sum_of_weighted(t, b));
            t.add(sa, sb)
        })),
        ("conv2d", vec![wavy(&[2, 6, 5], 0.0), wavy(&[3, 2, 3, 3], 1.0)], Box::new(|t, v| {
            let y = t.conv2d(v[0], v[1], 2, 1)?;
            Ok(sum_of_weighted(t, y))
        })),
        ("relu_softplus", vec![wavy(&[7], 0.4)], Box::new(|t, v| {
            let r = t.relu(v[0]);
            let s = t.softplus(r);
            Ok(sum_of_weighted(t, s))
        })),
        ("softmax_rows", vec![wavy(&[3, 5], 0.0)], Box::new(|t, v| {
            let y = t.softmax_rows(v[0])?;
            Ok(sum_of_weighted(t, y))
        })),
        ("layer_norm", vec![wavy(&[3, 6], 0.0), wavy(&[6], 1.0), wavy(&[6], 2.0)], Box::new(|t, v| {
            let y = t.layer_norm_rows(v[0], v[1], v[2])?;
            Ok(sum_of_weighted(t, y))
        })),
        ("attention", vec![wavy(&[3, 4], 0.0), wavy(&[5, 4], 1.0), wavy(&[5, 4], 2.0)], Box::new(|t, v| {
            let y = t.attention(v[0], v[1], v[2], 2)?;
            Ok(sum_of_weighted(t, y))
        })),
        ("concat_reshape", vec![wavy(&[2, 3], 0.0), wavy(&[1, 3], 1.0)], Box::new(|t, v| {
            let c = t.concat(&[v[0], v[1]])?;
            let y = t.reshape(c, &[9])?;
            Ok(sum_of_weighted(t, y))
        })),
        ("upsample", vec![wavy(&[2, 3, 2], 0.0)], Box::new(|t, v| {
            let y = t.upsample_bilinear(v[0], 4)?;
            Ok(sum_of_weighted(t, y))
        })),
        ("upsample_centers", vec![wavy(&[2, 3, 4], 0.3)], Box::new(|t, v| {
            let y = t.upsample_bilinear_aligned(v[0], 2, Align::Centers)?;
            Ok(sum_of_weighted(t, y))
        })),
        ("avg_pool", vec![wavy(&[2, 4, 6], 0.0)], Box::new(|t, v| {
            let y = t.avg_pool(v[0], 2)?;
            Ok(sum_of_weighted(t, y))
        })),
        ("masked_l1", vec![wavy(&[6], 0.0), wavy(&[6], 1.5)], Box::new(|t, v| {
            let m = t.constant(Tensor::new(&[6], vec![1., 0., 1., 1., 0., 1.]).unwrap());
            t.masked_l1(v[0], v[1], m)
        })),
        ("weighted_mean", vec![wavy(&[2, 3, 3], 0.0), wavy(&[1, 3, 3], 1.0)], Box::new(|t, v| {
            let w = t.softplus(v[1]);
            let y = t.weighted_mean(v[0], w)?;
            Ok(sum_of_weighted(t, y))
        })),
    ];
    for (name, inputs, build) in cases {
        let r = check_gradients(name, &inputs, None, |t, v| build(t, v)).unwrap();
        assert!(r.passed(), "{name}: rel err {}", r.max_rel_error);
    }
}

#[test]
fn gradcheck_composed_conv_attention() {
    let inputs = vec![wavy(&[2, 4, 4], 0.0), wavy(&[4, 2, 3, 3], 1.0), wavy(&[3, 4], 2.0)];
    let r = check_gradients("conv+attn", &inputs, None, |t, v| {
        let f = t.conv2d(v[0], v[1], 1, 1)?;
        let r = t.reshape(f, &[4, 16])?;
        let tokens = t.transpose(r)?;
        let y = t.attention(v[2], tokens, tokens, 2)?;
        Ok(sum_of_weighted(t, y))
    })
    .unwrap();
    assert!(r.passed(), "{}", r.max_rel_error);
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(vals in proptest::collection::vec(-30.0f64..30.0, 12)) {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&[3, 4], vals).unwrap());
        let y = tape.softmax_rows(x).unwrap();
        for row in tape.value(y).data().chunks(4) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn conv2d_is_bilinear(
        a in -3.0f64..3.0,
        b in -3.0f64..3.0,
        xs in proptest::collection::vec(-1.0f64..1.0, 50),
        ys in proptest::collection::vec(-1.0f64..1.0, 50),
        ks in proptest::collection::vec(-1.0f64..1.0, 18),
    ) {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&[2, 5, 5], xs).unwrap());
        let y = tape.constant(Tensor::new(&[2, 5, 5], ys).unwrap());
        let k = tape.constant(Tensor::new(&[1, 2, 3, 3], ks).unwrap());
        let ax = tape.scale(x, a);
        let by = tape.scale(y, b);
        let mix = tape.add(ax, by).unwrap();
        let lhs = tape.conv2d(mix, k, 1, 1).unwrap();
        let cx = tape.conv2d(x, k, 1, 1).unwrap();
        let cy = tape.conv2d(y, k, 1, 1).unwrap();
        let acx = tape.scale(cx, a);
        let bcy = tape.scale(cy, b);
        let rhs = tape.add(acx, bcy).unwrap();
        prop_assert!(tape.value(lhs).max_abs_diff(tape.value(rhs)) < 1e-10);
        // and linear in the kernel
        let k2 = tape.scale(k, a);
        let lk = tape.conv2d(x, k2, 1, 1).unwrap();
        let rk = tape.scale(cx, a);
        prop_assert!(tape.value(lk).max_abs_diff(tape.value(rk)) < 1e-10);
    }
}
