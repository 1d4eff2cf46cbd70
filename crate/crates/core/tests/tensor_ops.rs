use linerec::tensor::grad_check;
use linerec::{Tape, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Values bounded away from zero so relu and max-pool kinks are far from
/// the finite-difference stencil.
fn rand_away_from_zero(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| {
        let m: f64 = rng.random_range(0.05..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

fn int_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-4i32..=4) as f64)
}

/// `Σ w ⊙ y` with fixed random weights, so every output element matters.
fn weighted_sum(tape: &Tape<f64>, y: Var, seed: u64) -> linerec::Result<Var> {
    let w = tape.constant(rand_tensor(&tape.shape(y), seed ^ 0xABCD));
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

fn conv_oracle(
    x: &Tensor<f64>,
    k: &Tensor<f64>,
    bias: &[f64],
    stride: usize,
    pad: usize,
) -> Tensor<f64> {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (f, kh, kw) = (k.shape()[0], k.shape()[2], k.shape()[3]);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = Tensor::zeros(&[n, f, oh, ow]);
    for ni in 0..n {
        for fi in 0..f {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias[fi];
                    for ci in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                    acc += x.at(&[ni, ci, iy as usize, ix as usize])
                                        * k.at(&[fi, ci, ky, kx]);
                                }
                            }
                        }
                    }
                    let o = out.offset(&[ni, fi, oy, ox]);
                    out.data_mut()[o] = acc;
                }
            }
        }
    }
    out
}

fn conv_value(
    x: &Tensor<f64>,
    k: &Tensor<f64>,
    bias: &[f64],
    stride: usize,
    pad: usize,
) -> Tensor<f64> {
    let tape = Tape::new();
    let xv = tape.constant(x.clone());
    let kv = tape.constant(k.clone());
    let bv = tape.constant(Tensor::new(&[bias.len()], bias.to_vec()).unwrap());
    let y = tape.conv2d(xv, kv, Some(bv), stride, pad).unwrap();
    (*tape.value(y)).clone()
}

#[test]
fn conv_identity_and_sum_cases() {
    let x = rand_tensor(&[1, 1, 3, 3], 1);
    let id = Tensor::full(&[1, 1, 1, 1], 1.0);
    assert_eq!(conv_value(&x, &id, &[0.0], 1, 0).data(), x.data());
    let ones = Tensor::full(&[1, 1, 2, 2], 1.0);
    let y = conv_value(&ones, &ones, &[0.0], 1, 0);
    assert_eq!(y.shape(), &[1, 1, 1, 1]);
    assert_eq!(y.data(), &[4.0]);
}

#[test]
fn conv_matches_nested_loops() {
    let x = rand_tensor(&[1, 2, 5, 7], 2);
    let k = rand_tensor(&[3, 2, 3, 3], 3);
    let b = [0.1, -0.2, 0.3];
    let y = conv_value(&x, &k, &b, 1, 1);
    assert_eq!(y.shape(), &[1, 3, 5, 7]);
    let o = conv_oracle(&x, &k, &b, 1, 1);
    for (a, e) in y.data().iter().zip(o.data()) {
        assert!((a - e).abs() <= 1e-12 * e.abs().max(1.0), "{a} vs {e}");
    }
}

#[test]
fn conv_exact_in_64_bit_on_representable_sums() {
    // Integer data makes every partial sum exact whatever the summation order.
    for seed in 0..5 {
        let x = int_tensor(&[2, 3, 6, 5], seed);
        let k = int_tensor(&[4, 3, 3, 3], seed + 100);
        let b = [1.0, -2.0, 0.0, 3.0];
        for (stride, pad) in [(1, 1), (2, 1), (1, 0), (2, 0)] {
            assert_eq!(
                conv_value(&x, &k, &b, stride, pad).data(),
                conv_oracle(&x, &k, &b, stride, pad).data()
            );
        }
    }
}

#[test]
fn conv_32_bit_within_1e4_relative() {
    let x = rand_tensor(&[2, 3, 8, 9], 7);
    let k = rand_tensor(&[5, 3, 3, 3], 8);
    let b = [0.0; 5];
    let o = conv_oracle(&x, &k, &b, 1, 1);
    let tape = Tape::<f32>::new();
    let y = tape
        .conv2d(tape.constant(x.cast()), tape.constant(k.cast()), None, 1, 1)
        .unwrap();
    for (a, e) in tape.value(y).data().iter().zip(o.data()) {
        assert!((*a as f64 - e).abs() <= 1e-4 * e.abs().max(1.0));
    }
}

#[test]
fn conv_channel_mismatch_is_dimension_error() {
    let tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::zeros(&[1, 2, 4, 4]));
    let k = tape.constant(Tensor::zeros(&[1, 3, 3, 3]));
    assert!(matches!(
        tape.conv2d(x, k, None, 1, 1),
        Err(linerec::Error::Dimension(_))
    ));
}

fn bn_train(x: &Tensor<f64>, gamma: &[f64], beta: &[f64], eps: f64) -> Tensor<f64> {
    let tape = Tape::new();
    let c = gamma.len();
    let g = tape.constant(Tensor::new(&[c], gamma.to_vec()).unwrap());
    let b = tape.constant(Tensor::new(&[c], beta.to_vec()).unwrap());
    let (y, stats) = tape
        .batch_norm(tape.constant(x.clone()), g, b, None, eps)
        .unwrap();
    assert!(stats.is_some());
    (*tape.value(y)).clone()
}

#[test]
fn batch_norm_examples() {
    // Already zero mean and unit (population) variance per channel.
    let x = Tensor::new(&[2, 1, 1, 2], vec![1.0, -1.0, 1.0, -1.0]).unwrap();
    let y = bn_train(&x, &[1.0], &[0.0], 1e-5);
    for (a, e) in y.data().iter().zip(x.data()) {
        assert!((a - e).abs() < 1e-5);
    }
    let r = rand_tensor(&[3, 2, 2, 2], 4);
    let y = bn_train(&r, &[0.0, 0.0], &[0.7, -0.3], 1e-5);
    for ni in 0..3 {
        for i in 0..4 {
            assert_eq!(y.data()[(ni * 2) * 4 + i], 0.7);
            assert_eq!(y.data()[(ni * 2 + 1) * 4 + i], -0.3);
        }
    }
}

#[test]
fn batch_norm_output_statistics() {
    let x = rand_tensor(&[4, 3, 5, 6], 5);
    let y = bn_train(&x, &[1.0; 3], &[0.0; 3], 1e-5);
    for c in 0..3 {
        let vals: Vec<f64> = (0..4)
            .flat_map(|n| (0..30).map(move |i| (n, i)))
            .map(|(n, i)| y.data()[(n * 3 + c) * 30 + i])
            .collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-3, "variance {var}");
    }
}

#[test]
fn batch_norm_rejects_zero_eps() {
    let tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::full(&[2, 1, 2, 2], 3.0));
    let g = tape.constant(Tensor::full(&[1], 1.0));
    let b = tape.constant(Tensor::full(&[1], 0.0));
    assert!(matches!(
        tape.batch_norm(x, g, b, None, 0.0),
        Err(linerec::Error::Numeric(_))
    ));
}

fn upsample_value(x: &Tensor<f64>, factor: usize) -> Tensor<f64> {
    let tape = Tape::new();
    let y = tape
        .upsample_bilinear(tape.constant(x.clone()), factor)
        .unwrap();
    (*tape.value(y)).clone()
}

#[test]
fn upsample_identity_and_constant() {
    let x = rand_tensor(&[1, 2, 3, 4], 6);
    assert_eq!(upsample_value(&x, 1).data(), x.data());
    let c = Tensor::full(&[1, 1, 3, 5], 0.37);
    let y = upsample_value(&c, 2);
    assert_eq!(y.shape(), &[1, 1, 6, 10]);
    assert!(y.data().iter().all(|&v| (v - 0.37).abs() < 1e-15));
}

#[test]
fn upsample_ramp_matches_hand_computation() {
    // v(y, x) = 2y + x. Half-pixel centres put output samples at source
    // coordinates 0, 0.25, 0.75, 1 (edges clamped) along each axis.
    let x = Tensor::new(&[1, 1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
    let expected = [
        0.0, 0.25, 0.75, 1.0, //
        0.5, 0.75, 1.25, 1.5, //
        1.5, 1.75, 2.25, 2.5, //
        2.0, 2.25, 2.75, 3.0,
    ];
    assert_eq!(upsample_value(&x, 2).data(), &expected);
}

#[test]
fn concat_examples_and_slices() {
    let tape = Tape::<f64>::new();
    let a = tape.constant(rand_tensor(&[1, 2, 4, 4], 10));
    let b = tape.constant(rand_tensor(&[1, 3, 4, 4], 11));
    let y = tape.concat_channels(a, b).unwrap();
    assert_eq!(tape.shape(y), vec![1, 5, 4, 4]);
    let back_a = tape.narrow(y, 1, 0, 2).unwrap();
    let back_b = tape.narrow(y, 1, 2, 3).unwrap();
    assert_eq!(tape.value(back_a).data(), tape.value(a).data());
    assert_eq!(tape.value(back_b).data(), tape.value(b).data());

    let empty = tape.constant(Tensor::zeros(&[1, 0, 4, 4]));
    let same = tape.concat_channels(a, empty).unwrap();
    assert_eq!(tape.value(same).data(), tape.value(a).data());

    let bad = tape.constant(Tensor::zeros(&[1, 1, 4, 3]));
    assert!(matches!(
        tape.concat_channels(a, bad),
        Err(linerec::Error::Dimension(_))
    ));
}

#[test]
fn mean_height_examples() {
    let tape = Tape::<f64>::new();
    let col = tape.constant(Tensor::new(&[1, 1, 3, 1], vec![1.0, 2.0, 3.0]).unwrap());
    assert_eq!(tape.value(tape.mean_height(col).unwrap()).data(), &[2.0]);
    let flat = rand_tensor(&[2, 3, 1, 5], 12);
    let y = tape.mean_height(tape.constant(flat.clone())).unwrap();
    assert_eq!(tape.value(y).data(), flat.data());

    let x = rand_tensor(&[2, 3, 4, 5], 13);
    let y = tape.value(tape.mean_height(tape.constant(x.clone())).unwrap());
    assert_eq!(y.shape(), &[2, 3, 1, 5]);
    for n in 0..2 {
        for c in 0..3 {
            for w in 0..5 {
                let m = (0..4).map(|h| x.at(&[n, c, h, w])).sum::<f64>() / 4.0;
                assert!((y.at(&[n, c, 0, w]) - m).abs() < 1e-15);
            }
        }
    }
}

#[test]
fn log_softmax_rows_have_zero_logsumexp() {
    for seed in 0..10 {
        let tape = Tape::<f64>::new();
        let x = rand_tensor(&[7, 9], seed)
            .data()
            .iter()
            .map(|v| v * 20.0)
            .collect();
        let y = tape
            .log_softmax(tape.constant(Tensor::new(&[7, 9], x).unwrap()))
            .unwrap();
        for row in tape.value(y).data().chunks(9) {
            let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
            assert!(lse.abs() < 1e-9);
        }
    }
}

const GRAD_TOL: f64 = 1e-6;
const H: f64 = 1e-5;

fn check(
    name: &str,
    shape: &[usize],
    seeds: std::ops::Range<u64>,
    f: impl Fn(&Tape<f64>, Var, u64) -> linerec::Result<Var>,
) {
    for seed in seeds {
        let x = rand_away_from_zero(shape, seed);
        let err = grad_check(|t, v| f(t, v, seed), &x, H).unwrap();
        assert!(err < GRAD_TOL, "{name} seed {seed}: relative error {err}");
    }
}

#[test]
fn gradcheck_elementwise_primitives() {
    check("relu", &[4, 5], 0..10, |t, x, s| {
        weighted_sum(t, t.relu(x)?, s)
    });
    check("sigmoid", &[4, 5], 0..10, |t, x, s| {
        weighted_sum(t, t.sigmoid(x)?, s)
    });
    check("tanh", &[4, 5], 0..10, |t, x, s| {
        weighted_sum(t, t.tanh(x)?, s)
    });
    check("add", &[3, 4], 0..10, |t, x, s| {
        let c = t.constant(rand_tensor(&[3, 4], s + 50));
        weighted_sum(t, t.add(x, c)?, s)
    });
    check("mul", &[3, 4], 0..10, |t, x, s| {
        let c = t.constant(rand_tensor(&[3, 4], s + 50));
        weighted_sum(t, t.mul(x, c)?, s)
    });
    check("mul-self", &[3, 4], 0..10, |t, x, s| {
        weighted_sum(t, t.mul(x, x)?, s)
    });
    check("sub-scale", &[3, 4], 0..10, |t, x, s| {
        let y = t.scale(x, 0.3)?;
        weighted_sum(t, t.sub(y, x)?, s)
    });
    check("dropout-mask", &[3, 4], 0..10, |t, x, s| {
        let mask = (0..12)
            .map(|i| if (i + s) % 2 == 0 { 2.0 } else { 0.0 })
            .collect();
        weighted_sum(t, t.mask_mul(x, mask)?, s)
    });
    check("log_softmax", &[4, 6], 0..10, |t, x, s| {
        weighted_sum(t, t.log_softmax(x)?, s)
    });
}

#[test]
fn gradcheck_matmul_both_sides() {
    check("matmul-left", &[3, 4], 0..10, |t, x, s| {
        let b = t.constant(rand_tensor(&[4, 5], s + 7));
        weighted_sum(t, t.matmul(x, b)?, s)
    });
    check("matmul-right", &[4, 5], 0..10, |t, x, s| {
        let a = t.constant(rand_tensor(&[3, 4], s + 7));
        weighted_sum(t, t.matmul(a, x)?, s)
    });
}

#[test]
fn gradcheck_conv_input_kernel_bias() {
    for (stride, pad) in [(1, 1), (2, 1), (1, 0)] {
        check("conv-input", &[1, 2, 5, 6], 0..10, |t, x, s| {
            let k = t.constant(rand_tensor(&[3, 2, 3, 3], s + 3));
            weighted_sum(t, t.conv2d(x, k, None, stride, pad)?, s)
        });
        check("conv-kernel", &[3, 2, 3, 3], 0..10, |t, k, s| {
            let x = t.constant(rand_tensor(&[2, 2, 4, 5], s + 3));
            weighted_sum(t, t.conv2d(x, k, None, stride, pad)?, s)
        });
        check("conv-bias", &[3], 0..10, |t, b, s| {
            let x = t.constant(rand_tensor(&[2, 2, 4, 5], s + 3));
            let k = t.constant(rand_tensor(&[3, 2, 3, 3], s + 4));
            weighted_sum(t, t.conv2d(x, k, Some(b), stride, pad)?, s)
        });
    }
}

#[test]
fn gradcheck_structural_primitives() {
    check("max_pool", &[1, 2, 4, 6], 0..10, |t, x, s| {
        weighted_sum(t, t.max_pool(x, 2, 2)?, s)
    });
    check("upsample", &[1, 2, 2, 3], 0..10, |t, x, s| {
        weighted_sum(t, t.upsample_bilinear(x, 2)?, s)
    });
    check("upsample-4", &[1, 1, 2, 2], 0..10, |t, x, s| {
        weighted_sum(t, t.upsample_bilinear(x, 4)?, s)
    });
    check("concat", &[1, 2, 3, 3], 0..10, |t, x, s| {
        let b = t.constant(rand_tensor(&[1, 1, 3, 3], s));
        let y = t.concat_channels(b, x)?;
        weighted_sum(t, y, s)
    });
    check("mean_height", &[2, 2, 3, 4], 0..10, |t, x, s| {
        weighted_sum(t, t.mean_height(x)?, s)
    });
    check("permute", &[2, 3, 4], 0..10, |t, x, s| {
        weighted_sum(t, t.permute(x, &[2, 0, 1])?, s)
    });
    check("narrow-stack-index", &[3, 2, 4], 0..10, |t, x, s| {
        let a = t.index0(x, 2)?;
        let b = t.narrow(t.index0(x, 0)?, 1, 0, 4)?;
        let y = t.stack(&[a, b, a])?;
        weighted_sum(t, y, s)
    });
    check("bias-add", &[3], 0..10, |t, b, s| {
        let x = t.constant(rand_tensor(&[2, 3, 2, 2], s));
        let y = t.add_bias_channel(x, b)?;
        let m = t.constant(rand_tensor(&[4, 3], s + 1));
        let z = t.add_bias_last(m, b)?;
        let l = weighted_sum(t, y, s)?;
        let r = weighted_sum(t, z, s + 2)?;
        t.add(l, r)
    });
}

#[test]
fn gradcheck_batch_norm_all_inputs() {
    check("bn-input", &[3, 2, 2, 2], 0..10, |t, x, s| {
        let g = t.constant(rand_tensor(&[2], s + 1));
        let b = t.constant(rand_tensor(&[2], s + 2));
        weighted_sum(t, t.batch_norm(x, g, b, None, 1e-5)?.0, s)
    });
    check("bn-gamma", &[2], 0..10, |t, g, s| {
        let x = t.constant(rand_tensor(&[3, 2, 2, 2], s + 1));
        let b = t.constant(rand_tensor(&[2], s + 2));
        weighted_sum(t, t.batch_norm(x, g, b, None, 1e-5)?.0, s)
    });
    check("bn-beta-eval", &[2], 0..10, |t, b, s| {
        let x = t.constant(rand_tensor(&[3, 2, 2, 2], s + 1));
        let g = t.constant(rand_tensor(&[2], s + 2));
        let (m, v) = (vec![0.1, -0.2], vec![0.5, 2.0]);
        weighted_sum(t, t.batch_norm(x, g, b, Some((&m, &v)), 1e-5)?.0, s)
    });
}

#[test]
fn gradcheck_ctc_through_log_softmax() {
    check("ctc", &[5, 2, 4], 0..10, |t, x, _| {
        let lp = t.log_softmax(x)?;
        t.ctc_loss(lp, &[vec![0, 1], vec![2]], &[5, 4])
    });
}

#[test]
fn gradcheck_reports_error_for_sum_and_squares() {
    let x = rand_tensor(&[4, 4], 1);
    assert!(grad_check(|t, v| t.sum(v), &x, 1e-3).unwrap() < 1e-12);
    let e = grad_check(|t, v| t.sum(t.mul(v, v)?), &x, 1e-3).unwrap();
    assert!(e < 1e-6);
}

#[test]
fn grad_check_rejects_out_of_range_step() {
    let x = rand_tensor(&[2], 1);
    assert!(grad_check(|t, v| t.sum(v), &x, 0.5).is_err());
}

#[test]
fn fan_out_gradient_is_sum_of_paths() {
    let x0 = rand_tensor(&[6], 3);
    let grad_of = |k: usize| {
        let tape = Tape::new();
        let x = tape.leaf(x0.clone().with_requires_grad(true));
        let mut acc = tape.tanh(x).unwrap();
        for i in 1..k {
            let path = tape.scale(tape.sigmoid(x).unwrap(), i as f64).unwrap();
            acc = tape.add(acc, path).unwrap();
        }
        let l = tape.sum(acc).unwrap();
        tape.backward(l).unwrap().get(x).unwrap().to_vec()
    };
    let single = |i: usize| {
        let tape = Tape::new();
        let x = tape.leaf(x0.clone().with_requires_grad(true));
        let y = if i == 0 {
            tape.tanh(x).unwrap()
        } else {
            tape.scale(tape.sigmoid(x).unwrap(), i as f64).unwrap()
        };
        let l = tape.sum(y).unwrap();
        tape.backward(l).unwrap().get(x).unwrap().to_vec()
    };
    let k = 4;
    let total = grad_of(k);
    let mut expect = vec![0.0; 6];
    for i in 0..k {
        for (e, g) in expect.iter_mut().zip(single(i)) {
            *e += g;
        }
    }
    for (a, e) in total.iter().zip(&expect) {
        assert!((a - e).abs() < 1e-14);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn prop_conv_shape_arithmetic(h in 3usize..9, w in 3usize..9, k in 1usize..4, stride in 1usize..3, pad in 0usize..2, seed in 0u64..1000) {
        let x = rand_tensor(&[1, 2, h, w], seed);
        let kern = rand_tensor(&[2, 2, k, k], seed + 1);
        let y = conv_value(&x, &kern, &[0.0, 0.0], stride, pad);
        prop_assert_eq!(y.shape(), &[1, 2, (h + 2 * pad - k) / stride + 1, (w + 2 * pad - k) / stride + 1]);
        let o = conv_oracle(&x, &kern, &[0.0, 0.0], stride, pad);
        for (a, e) in y.data().iter().zip(o.data()) {
            prop_assert!((a - e).abs() <= 1e-12);
        }
    }

    #[test]
    fn prop_log_softmax_normalised(v in proptest::collection::vec(-50.0f64..50.0, 1..40)) {
        let tape = Tape::new();
        let n = v.len();
        let y = tape.log_softmax(tape.constant(Tensor::new(&[n], v).unwrap())).unwrap();
        let lse = tape.value(y).data().iter().map(|x| x.exp()).sum::<f64>().ln();
        prop_assert!(lse.abs() < 1e-9);
    }
}
