use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use rcdn_core::tensor::{gradcheck, Norm, Tape, Tensor, Var, BN_EPS};
use rcdn_core::Error;

fn rng(seed: u64) -> Xoshiro256PlusPlus {
    Xoshiro256PlusPlus::seed_from_u64(seed)
}

fn uniform(r: &mut impl Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Uniform in [-1, 1] with every entry at least `gap` away from zero.
fn uniform_off_kink(r: &mut impl Rng, shape: &[usize], gap: f64) -> Tensor {
    let mut t = uniform(r, shape);
    for v in t.data_mut() {
        while v.abs() < gap {
            *v = r.gen_range(-1.0..1.0);
        }
    }
    t
}

/// Direct quadruple loop with explicit bounds checks.
fn conv_oracle(x: &Tensor, k: &Tensor, b: &[f64], stride: usize, pad: usize) -> Tensor {
    let [n, c, h, w] = x.shape().try_into().unwrap();
    let [o, _, kh, kw] = k.shape().try_into().unwrap();
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * o * oh * ow];
    for ni in 0..n {
        for oi in 0..o {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = b[oi];
                    for ci in 0..c {
                        for dy in 0..kh {
                            for dx in 0..kw {
                                let iy = (y * stride + dy) as isize - pad as isize;
                                let ix = (xx * stride + dx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let xv = x.data()[((ni * c + ci) * h + iy as usize) * w + ix as usize];
                                let kv = k.data()[((oi * c + ci) * kh + dy) * kw + dx];
                                acc += xv * kv;
                            }
                        }
                    }
                    out[((ni * o + oi) * oh + y) * ow + xx] = acc;
                }
            }
        }
    }
    Tensor::new([n, o, oh, ow], out).unwrap()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn run_conv(x: &Tensor, k: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Result<Tensor, Error> {
    let mut tape = Tape::new();
    let (xv, kv, bv) = (tape.leaf(x), tape.leaf(k), tape.leaf(b));
    let y = tape.conv2d(xv, kv, Some(bv), stride, pad)?;
    Ok(tape.to_tensor(y))
}

#[test]
fn conv2d_identity_kernel() {
    let x = uniform(&mut rng(1), &[2, 1, 5, 4]);
    let k = Tensor::full([1, 1, 1, 1], 1.0);
    let y = run_conv(&x, &k, &Tensor::zeros([1]), 1, 0).unwrap();
    assert_eq!(y.data(), x.data());
}

#[test]
fn conv2d_window_sum() {
    let x = Tensor::full([1, 1, 3, 3], 2.0);
    let k = Tensor::full([1, 1, 3, 3], 1.0);
    let y = run_conv(&x, &k, &Tensor::zeros([1]), 1, 0).unwrap();
    assert_eq!(y.shape(), &[1, 1, 1, 1]);
    assert_eq!(y.data(), &[18.0]);
}

#[test]
fn conv2d_matches_loop_oracle() {
    let mut r = rng(2);
    let x = uniform(&mut r, &[1, 2, 5, 5]);
    let k = uniform(&mut r, &[3, 2, 3, 3]);
    let b = uniform(&mut r, &[3]);
    let y = run_conv(&x, &k, &b, 2, 1).unwrap();
    let want = conv_oracle(&x, &k, b.data(), 2, 1);
    assert_eq!(y.shape(), &[1, 3, 3, 3]);
    assert!(max_abs_diff(y.data(), want.data()) < 1e-12);

    // odd geometry: stride 3, pad 2, batch of 2, 2x2 kernel
    let x = uniform(&mut r, &[2, 3, 7, 6]);
    let k = uniform(&mut r, &[2, 3, 2, 2]);
    let b = uniform(&mut r, &[2]);
    let y = run_conv(&x, &k, &b, 3, 2).unwrap();
    let want = conv_oracle(&x, &k, b.data(), 3, 2);
    assert_eq!(y.shape(), want.shape());
    assert!(max_abs_diff(y.data(), want.data()) < 1e-12);
}

#[test]
fn conv2d_shape_errors_name_the_axis() {
    let x = Tensor::zeros([1, 2, 4, 4]);
    let k = Tensor::zeros([1, 3, 3, 3]);
    match run_conv(&x, &k, &Tensor::zeros([1]), 1, 0) {
        Err(Error::Dimension { axis, .. }) => assert_eq!(axis, "channels"),
        other => panic!("expected channel error, got {other:?}"),
    }
    let x = Tensor::zeros([1, 1, 2, 2]);
    let k = Tensor::zeros([1, 1, 3, 3]);
    assert!(matches!(
        run_conv(&x, &k, &Tensor::zeros([1]), 1, 0),
        Err(Error::Dimension {
            axis: "height/width",
            ..
        })
    ));
    assert!(matches!(
        run_conv(&x, &Tensor::zeros([1, 1, 1, 1]), &Tensor::zeros([1]), 0, 0),
        Err(Error::Dimension { axis: "stride", .. })
    ));
}

#[test]
fn conv2d_is_linear_in_input() {
    let mut r = rng(3);
    let x = uniform(&mut r, &[2, 2, 6, 6]);
    let z = uniform(&mut r, &[2, 2, 6, 6]);
    let k = uniform(&mut r, &[3, 2, 3, 3]);
    let zero_b = Tensor::zeros([3]);
    let (a, b) = (0.7, -1.3);
    let mix = Tensor::new(
        x.shape().to_vec(),
        x.data().iter().zip(z.data()).map(|(p, q)| a * p + b * q).collect(),
    )
    .unwrap();
    let lhs = run_conv(&mix, &k, &zero_b, 1, 1).unwrap();
    let cx = run_conv(&x, &k, &zero_b, 1, 1).unwrap();
    let cz = run_conv(&z, &k, &zero_b, 1, 1).unwrap();
    let rhs: Vec<f64> = cx.data().iter().zip(cz.data()).map(|(p, q)| a * p + b * q).collect();
    assert!(max_abs_diff(lhs.data(), &rhs) < 1e-10);
}

fn run_depthwise(x: &Tensor, k: &Tensor, stride: usize, pad: usize) -> Result<Tensor, Error> {
    let mut tape = Tape::new();
    let (xv, kv) = (tape.leaf(x), tape.leaf(k));
    let y = tape.depthwise_conv2d(xv, kv, stride, pad)?;
    Ok(tape.to_tensor(y))
}

#[test]
fn depthwise_identity_and_channel_independence() {
    let mut r = rng(4);
    let x = uniform(&mut r, &[2, 3, 4, 4]);
    let k = Tensor::full([3, 1, 1, 1], 1.0);
    assert_eq!(run_depthwise(&x, &k, 1, 0).unwrap().data(), x.data());

    let mut x = uniform(&mut r, &[1, 2, 5, 5]);
    x.data_mut()[..25].fill(0.0);
    let k = uniform(&mut r, &[2, 1, 3, 3]);
    let y = run_depthwise(&x, &k, 1, 1).unwrap();
    assert!(y.data()[..25].iter().all(|&v| v == 0.0));
    assert!(y.data()[25..].iter().any(|&v| v != 0.0));
}

#[test]
fn depthwise_matches_per_channel_oracle() {
    let mut r = rng(5);
    let x = uniform(&mut r, &[1, 3, 6, 6]);
    let k = uniform(&mut r, &[3, 1, 3, 3]);
    for (stride, pad) in [(1, 1), (2, 1), (1, 0)] {
        let y = run_depthwise(&x, &k, stride, pad).unwrap();
        let mut want = Vec::new();
        for c in 0..3 {
            let xc = Tensor::new([1, 1, 6, 6], x.data()[c * 36..(c + 1) * 36].to_vec()).unwrap();
            let kc = Tensor::new([1, 1, 3, 3], k.data()[c * 9..(c + 1) * 9].to_vec()).unwrap();
            want.extend_from_slice(conv_oracle(&xc, &kc, &[0.0], stride, pad).data());
        }
        assert!(max_abs_diff(y.data(), &want) < 1e-12);
    }
}

#[test]
fn depthwise_channel_mismatch() {
    let x = Tensor::zeros([1, 2, 4, 4]);
    let k = Tensor::zeros([3, 1, 3, 3]);
    assert!(matches!(
        run_depthwise(&x, &k, 1, 1),
        Err(Error::Dimension { axis: "channels", .. })
    ));
}

#[test]
fn pointwise_cases() {
    let mut r = rng(6);
    let x = uniform(&mut r, &[2, 3, 4, 5]);
    let mut eye = Tensor::zeros([3, 3, 1, 1]);
    for i in 0..3 {
        eye.data_mut()[i * 3 + i] = 1.0;
    }
    let mut tape = Tape::new();
    let (xv, ev, zb) = (tape.leaf(&x), tape.leaf(&eye), tape.leaf(&Tensor::zeros([3])));
    let y = tape.pointwise_conv2d(xv, ev, Some(zb)).unwrap();
    assert_eq!(tape.value(y), x.data());

    let bias = Tensor::new([2], vec![0.25, -4.0]).unwrap();
    let (kz, bv) = (tape.leaf(&Tensor::zeros([2, 3, 1, 1])), tape.leaf(&bias));
    let y = tape.pointwise_conv2d(xv, kz, Some(bv)).unwrap();
    let out = tape.value(y);
    assert!(out[..20].iter().all(|&v| v == 0.25));
    assert!(out[20..40].iter().all(|&v| v == -4.0));

    // identical to conv2d with the same 1x1 kernel, bit for bit
    let k = uniform(&mut r, &[4, 3, 1, 1]);
    let b = uniform(&mut r, &[4]);
    let (kv, bv) = (tape.leaf(&k), tape.leaf(&b));
    let p = tape.pointwise_conv2d(xv, kv, Some(bv)).unwrap();
    let full = conv_oracle(&x, &k, b.data(), 1, 0);
    let c = tape.conv2d(xv, kv, Some(bv), 1, 0).unwrap();
    assert_eq!(tape.value(p), tape.value(c));
    assert!(max_abs_diff(tape.value(p), full.data()) < 1e-12);
}

#[test]
fn separable_equals_composed_full_conv() {
    let mut r = rng(7);
    let x = uniform(&mut r, &[1, 2, 4, 4]);
    let dw = uniform(&mut r, &[2, 1, 3, 3]);
    let pw = uniform(&mut r, &[3, 2, 1, 1]);
    let b = uniform(&mut r, &[3]);
    let mut full = vec![0.0; 3 * 2 * 9];
    for o in 0..3 {
        for c in 0..2 {
            for t in 0..9 {
                full[(o * 2 + c) * 9 + t] = pw.data()[o * 2 + c] * dw.data()[c * 9 + t];
            }
        }
    }
    let full = Tensor::new([3, 2, 3, 3], full).unwrap();
    let mut tape = Tape::new();
    let (xv, dv, pv, bv, fv) = (
        tape.leaf(&x),
        tape.leaf(&dw),
        tape.leaf(&pw),
        tape.leaf(&b),
        tape.leaf(&full),
    );
    let d = tape.depthwise_conv2d(xv, dv, 1, 1).unwrap();
    let sep = tape.pointwise_conv2d(d, pv, Some(bv)).unwrap();
    let direct = tape.conv2d(xv, fv, Some(bv), 1, 1).unwrap();
    assert!(max_abs_diff(tape.value(sep), tape.value(direct)) < 1e-10);
}

#[test]
fn relu_pool_and_gap_examples() {
    let mut tape = Tape::new();
    let v = tape.constant([3], vec![-1.0, 0.0, 3.0]).unwrap();
    let y = tape.relu(v);
    assert_eq!(tape.value(y), &[0.0, 0.0, 3.0]);

    let ramp = tape.constant([1, 1, 4, 4], (0..16).map(f64::from).collect()).unwrap();
    let p = tape.maxpool2(ramp).unwrap();
    assert_eq!(tape.shape(p), &[1, 1, 2, 2]);
    assert_eq!(tape.value(p), &[5.0, 7.0, 13.0, 15.0]);

    let c = tape.constant([2, 1, 3, 3], vec![1.75; 18]).unwrap();
    let g = tape.global_avg_pool(c).unwrap();
    assert_eq!(tape.shape(g), &[2, 1]);
    assert!(tape.value(g).iter().all(|&v| (v - 1.75).abs() < 1e-15));

    let odd = tape.constant([1, 1, 3, 4], vec![0.0; 12]).unwrap();
    assert!(matches!(
        tape.maxpool2(odd),
        Err(Error::Dimension { axis: "height", .. })
    ));
}

fn run_bn(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<Tensor, Error> {
    let mut tape = Tape::new();
    let (xv, g, b) = (tape.leaf(x), tape.leaf(gamma), tape.leaf(beta));
    let (y, stats) = tape.batchnorm2d(xv, g, b, Norm::Train)?;
    assert!(stats.is_some());
    Ok(tape.to_tensor(y))
}

#[test]
fn batchnorm_examples() {
    let ones = Tensor::full([2], 1.0);
    let zeros = Tensor::zeros([2]);
    let y = run_bn(&Tensor::full([3, 2, 2, 2], 0.8), &ones, &zeros).unwrap();
    assert!(y.data().iter().all(|&v| v == 0.0));

    let beta = Tensor::new([2], vec![0.3, -0.7]).unwrap();
    let x = uniform(&mut rng(8), &[3, 2, 2, 2]);
    let y = run_bn(&x, &zeros, &beta).unwrap();
    for i in 0..3 {
        assert!(y.data()[i * 8..i * 8 + 4].iter().all(|&v| v == 0.3));
        assert!(y.data()[i * 8 + 4..i * 8 + 8].iter().all(|&v| v == -0.7));
    }

    assert!(matches!(
        run_bn(&Tensor::zeros([1, 2, 2, 2]), &ones, &zeros),
        Err(Error::DegenerateBatch { batch: 1, .. })
    ));
}

#[test]
fn batchnorm_normalizes_per_channel() {
    let x = uniform(&mut rng(9), &[4, 2, 3, 3]);
    let y = run_bn(&x, &Tensor::full([2], 1.0), &Tensor::zeros([2])).unwrap();
    for c in 0..2 {
        let vals: Vec<f64> = (0..4)
            .flat_map(|n| y.data()[(n * 2 + c) * 9..(n * 2 + c + 1) * 9].to_vec())
            .collect();
        let xs: Vec<f64> = (0..4)
            .flat_map(|n| x.data()[(n * 2 + c) * 9..(n * 2 + c + 1) * 9].to_vec())
            .collect();
        let m = vals.iter().sum::<f64>() / 36.0;
        let v = vals.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / 36.0;
        // direct stats of the input predict the epsilon-shrunk variance exactly
        let xm = xs.iter().sum::<f64>() / 36.0;
        let xvar = xs.iter().map(|a| (a - xm) * (a - xm)).sum::<f64>() / 36.0;
        assert!(m.abs() < 1e-6);
        assert!((v - 1.0).abs() < 1e-6 + BN_EPS / xvar);
        assert!((v - xvar / (xvar + BN_EPS)).abs() < 1e-12);
    }
}

#[test]
fn batchnorm_infer_uses_running_stats() {
    let x = Tensor::new([1, 1, 1, 2], vec![1.0, 3.0]).unwrap();
    let mut tape = Tape::new();
    let (xv, g, b) = (
        tape.leaf(&x),
        tape.leaf(&Tensor::full([1], 2.0)),
        tape.leaf(&Tensor::full([1], 0.5)),
    );
    let (y, stats) = tape
        .batchnorm2d(
            xv,
            g,
            b,
            Norm::Infer {
                mean: &[1.0],
                var: &[4.0],
            },
        )
        .unwrap();
    assert!(stats.is_none());
    let s = (4.0 + BN_EPS).sqrt();
    assert_eq!(tape.value(y), &[0.5, 2.0 * 2.0 / s + 0.5]);
}

#[test]
fn linear_and_concat() {
    let mut r = rng(10);
    let x = uniform(&mut r, &[3, 4]);
    let mut eye = Tensor::zeros([4, 4]);
    for i in 0..4 {
        eye.data_mut()[i * 5] = 1.0;
    }
    let mut tape = Tape::new();
    let (xv, ev, zb) = (tape.leaf(&x), tape.leaf(&eye), tape.leaf(&Tensor::zeros([4])));
    let y = tape.linear(xv, ev, Some(zb)).unwrap();
    assert_eq!(tape.value(y), x.data());

    let w = uniform(&mut r, &[4, 5]);
    let b = uniform(&mut r, &[5]);
    let (wv, bv) = (tape.leaf(&w), tape.leaf(&b));
    let y = tape.linear(xv, wv, Some(bv)).unwrap();
    for n in 0..3 {
        for e in 0..5 {
            let mut want = b.data()[e];
            for d in 0..4 {
                want += x.data()[n * 4 + d] * w.data()[d * 5 + e];
            }
            assert!((tape.value(y)[n * 5 + e] - want).abs() < 1e-12);
        }
    }

    let a = tape.constant([1, 2], vec![1.0, 2.0]).unwrap();
    let b = tape.constant([1, 1], vec![3.0]).unwrap();
    let c = tape.concat_features(a, b).unwrap();
    assert_eq!(tape.value(c), &[1.0, 2.0, 3.0]);
    let bad = tape.constant([2, 1], vec![3.0, 4.0]).unwrap();
    assert!(matches!(
        tape.concat_features(a, bad),
        Err(Error::Dimension { axis: "batch", .. })
    ));
}

#[test]
fn l2_normalize_examples() {
    let mut tape = Tape::new();
    let v = tape.constant([1, 2], vec![3.0, 4.0]).unwrap();
    let y = tape.l2_normalize(v).unwrap();
    assert!(max_abs_diff(tape.value(y), &[0.6, 0.8]) < 1e-12);

    let u = tape.constant([1, 3], vec![0.0, 1.0, 0.0]).unwrap();
    let y = tape.l2_normalize(u).unwrap();
    // 1 / (1 + eps) rounds to just over 1e-12 below one
    assert!(max_abs_diff(tape.value(y), &[0.0, 1.0, 0.0]) <= 1.01e-12);

    let z = tape.constant([2, 2], vec![0.0, 0.0, 1.0, 1.0]).unwrap();
    let y = tape.l2_normalize(z).unwrap();
    assert_eq!(&tape.value(y)[..2], &[0.0, 0.0]);
    assert_eq!(tape.zero_norm_rows(), 1);
}

#[test]
fn softmax_cross_entropy_examples() {
    let mut tape = Tape::new();
    let l = tape.constant([2, 2], vec![0.0, 0.0, 0.0, 0.0]).unwrap();
    let ce = tape.softmax_cross_entropy(l, &[0, 1]).unwrap();
    assert!((tape.scalar(ce) - std::f64::consts::LN_2).abs() < 1e-15);

    let l = tape.constant([1, 2], vec![30.0, -30.0]).unwrap();
    let ce = tape.softmax_cross_entropy(l, &[0]).unwrap();
    assert!(tape.scalar(ce) < 1e-9);

    let l = tape.constant([1, 2], vec![0.0, 0.0]).unwrap();
    assert!(matches!(tape.softmax_cross_entropy(l, &[2]), Err(Error::Validation(_))));

    // oracle: log(1 + exp(other - own)) evaluated directly for moderate logits
    let mut r = rng(11);
    let logits = uniform(&mut r, &[6, 2]);
    let labels: Vec<usize> = (0..6).map(|i| i % 2).collect();
    let lv = tape.leaf(&logits);
    let ce = tape.softmax_cross_entropy(lv, &labels).unwrap();
    let want: f64 = (0..6)
        .map(|i| {
            let own = logits.data()[i * 2 + labels[i]];
            let other = logits.data()[i * 2 + 1 - labels[i]];
            (other - own).exp().ln_1p()
        })
        .sum::<f64>()
        / 6.0;
    assert!((tape.scalar(ce) - want).abs() < 1e-10);
}

#[test]
fn backward_basics() {
    let x = uniform(&mut rng(12), &[3, 2]).with_grad();
    let mut tape = Tape::new();
    let xv = tape.leaf(&x);
    let s = tape.sum(xv);
    tape.backward(s).unwrap();
    assert!(tape.grad(xv).unwrap().iter().all(|&g| g == 1.0));
    assert!(matches!(tape.backward(s), Err(Error::Usage(_))));

    let mut tape = Tape::new();
    let xv = tape.leaf(&x);
    let sq = tape.square(xv);
    let s = tape.sum(sq);
    let zero = tape.affine(s, 0.0, 0.0);
    tape.backward(zero).unwrap();
    assert!(tape.grad(xv).unwrap().iter().all(|&g| g == 0.0));

    let mut tape = Tape::new();
    let xv = tape.leaf(&x);
    assert!(matches!(tape.backward(xv), Err(Error::Usage(_))));
}

#[test]
fn reused_input_accumulates() {
    // d/dx sum(x * x + x) = 2x + 1
    let x = Tensor::new([3], vec![0.5, -2.0, 1.0]).unwrap().with_grad();
    let mut tape = Tape::new();
    let xv = tape.leaf(&x);
    let sq = tape.mul(xv, xv).unwrap();
    let s = tape.add(sq, xv).unwrap();
    let total = tape.sum(s);
    tape.backward(total).unwrap();
    assert_eq!(tape.grad(xv).unwrap(), &[2.0, -3.0, 3.0]);
}

// ---- finite-difference checks for every differentiable op ----

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn check(name: &str, f: impl Fn(&mut Tape, Var) -> Result<Var, Error>, x: &Tensor) {
    let report = gradcheck(f, x, H, TOL).unwrap();
    assert!(
        report.passed,
        "{name}: max rel error {} at {}",
        report.max_rel_error, report.worst_index
    );
}

/// Weighted sum with fixed random weights so every output element matters.
fn project(tape: &mut Tape, y: Var, seed: u64) -> Result<Var, Error> {
    let n = tape.value(y).len();
    let w = uniform(&mut rng(seed), &[n]);
    let shape = tape.shape(y).to_vec();
    let w = tape.constant(shape, w.into_data())?;
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

#[test]
fn gradcheck_norm_squared_and_constant() {
    let x = uniform(&mut rng(13), &[5]);
    let report = gradcheck(
        |t, v| {
            let s = t.square(v);
            Ok(t.sum(s))
        },
        &x,
        H,
        1e-8,
    )
    .unwrap();
    assert!(report.passed, "{}", report.max_rel_error);
    for (a, xi) in report.analytic.iter().zip(x.data()) {
        assert!((a - 2.0 * xi).abs() < 1e-15);
    }

    let report = gradcheck(|t, _| t.constant([], vec![4.0]), &x, H, TOL).unwrap();
    assert!(report.analytic.iter().chain(&report.numeric).all(|&g| g == 0.0));
    assert!(report.passed);
}

#[test]
fn gradcheck_detects_nondeterminism() {
    let calls = std::cell::Cell::new(0u32);
    let x = uniform(&mut rng(14), &[2]);
    let res = gradcheck(
        |t, v| {
            calls.set(calls.get() + 1);
            let s = t.sum(v);
            Ok(t.affine(s, 1.0, calls.get() as f64))
        },
        &x,
        H,
        TOL,
    );
    assert!(matches!(res, Err(Error::Determinism { .. })));
}

#[test]
fn gradcheck_conv_family() {
    let mut r = rng(15);
    let x = uniform(&mut r, &[2, 2, 5, 5]);
    let k = uniform(&mut r, &[3, 2, 3, 3]);
    let b = uniform(&mut r, &[3]);
    check(
        "conv2d wrt input",
        |t, v| {
            let (kv, bv) = (t.leaf(&k), t.leaf(&b));
            let y = t.conv2d(v, kv, Some(bv), 2, 1)?;
            project(t, y, 100)
        },
        &x,
    );
    check(
        "conv2d wrt kernel",
        |t, v| {
            let (xv, bv) = (t.leaf(&x), t.leaf(&b));
            let y = t.conv2d(xv, v, Some(bv), 1, 1)?;
            project(t, y, 101)
        },
        &k,
    );
    check(
        "conv2d wrt bias",
        |t, v| {
            let (xv, kv) = (t.leaf(&x), t.leaf(&k));
            let y = t.conv2d(xv, kv, Some(v), 1, 0)?;
            project(t, y, 102)
        },
        &b,
    );
    let dk = uniform(&mut r, &[2, 1, 3, 3]);
    check(
        "depthwise wrt input",
        |t, v| {
            let kv = t.leaf(&dk);
            let y = t.depthwise_conv2d(v, kv, 2, 1)?;
            project(t, y, 103)
        },
        &x,
    );
    check(
        "depthwise wrt kernel",
        |t, v| {
            let xv = t.leaf(&x);
            let y = t.depthwise_conv2d(xv, v, 1, 1)?;
            project(t, y, 104)
        },
        &dk,
    );
    let pk = uniform(&mut r, &[4, 2, 1, 1]);
    check(
        "pointwise wrt input",
        |t, v| {
            let kv = t.leaf(&pk);
            let y = t.pointwise_conv2d(v, kv, None)?;
            project(t, y, 105)
        },
        &x,
    );
    check(
        "pointwise wrt kernel",
        |t, v| {
            let xv = t.leaf(&x);
            let y = t.pointwise_conv2d(xv, v, None)?;
            project(t, y, 106)
        },
        &pk,
    );
}

#[test]
fn gradcheck_pointwise_nonlinearities() {
    let mut r = rng(16);
    let x = uniform_off_kink(&mut r, &[2, 3, 4], 1e-3);
    check(
        "relu",
        |t, v| {
            let y = t.relu(v);
            project(t, y, 110)
        },
        &x,
    );

    // resample until no pooling window has a near-tie among its top two values
    let x = loop {
        let cand = uniform(&mut r, &[2, 2, 4, 4]);
        let d = cand.data();
        let ok = (0..4).all(|p| {
            (0..2).all(|i| {
                (0..2).all(|j| {
                    let mut w: Vec<f64> = [(0, 0), (0, 1), (1, 0), (1, 1)]
                        .iter()
                        .map(|(a, b)| d[p * 16 + (2 * i + a) * 4 + 2 * j + b])
                        .collect();
                    w.sort_by(|a, b| b.partial_cmp(a).unwrap());
                    w[0] - w[1] > 1e-3
                })
            })
        });
        if ok {
            break cand;
        }
    };
    check(
        "maxpool2",
        |t, v| {
            let y = t.maxpool2(v)?;
            project(t, y, 111)
        },
        &x,
    );
    let x = uniform(&mut r, &[2, 3, 3, 2]);
    check(
        "global_avg_pool",
        |t, v| {
            let y = t.global_avg_pool(v)?;
            project(t, y, 112)
        },
        &x,
    );
}

#[test]
fn gradcheck_batchnorm_both_modes() {
    let mut r = rng(17);
    let x = uniform(&mut r, &[4, 2, 3, 3]);
    let gamma = uniform(&mut r, &[2]);
    let beta = uniform(&mut r, &[2]);
    for train in [true, false] {
        let norm = |train: bool| {
            if train {
                Norm::Train
            } else {
                Norm::Infer {
                    mean: &[0.1, -0.2],
                    var: &[0.5, 1.5],
                }
            }
        };
        check(
            "batchnorm wrt input",
            |t, v| {
                let (g, b) = (t.leaf(&gamma), t.leaf(&beta));
                let (y, _) = t.batchnorm2d(v, g, b, norm(train))?;
                project(t, y, 120)
            },
            &x,
        );
        check(
            "batchnorm wrt gamma",
            |t, v| {
                let (xv, b) = (t.leaf(&x), t.leaf(&beta));
                let (y, _) = t.batchnorm2d(xv, v, b, norm(train))?;
                project(t, y, 121)
            },
            &gamma,
        );
        check(
            "batchnorm wrt beta",
            |t, v| {
                let (xv, g) = (t.leaf(&x), t.leaf(&gamma));
                let (y, _) = t.batchnorm2d(xv, g, v, norm(train))?;
                project(t, y, 122)
            },
            &beta,
        );
    }
}

#[test]
fn gradcheck_dense_ops() {
    let mut r = rng(18);
    let x = uniform(&mut r, &[3, 4]);
    let w = uniform(&mut r, &[4, 5]);
    let b = uniform(&mut r, &[5]);
    check(
        "linear wrt input",
        |t, v| {
            let (wv, bv) = (t.leaf(&w), t.leaf(&b));
            let y = t.linear(v, wv, Some(bv))?;
            project(t, y, 130)
        },
        &x,
    );
    check(
        "linear wrt weight",
        |t, v| {
            let (xv, bv) = (t.leaf(&x), t.leaf(&b));
            let y = t.linear(xv, v, Some(bv))?;
            project(t, y, 131)
        },
        &w,
    );
    check(
        "linear wrt bias",
        |t, v| {
            let (xv, wv) = (t.leaf(&x), t.leaf(&w));
            let y = t.linear(xv, wv, Some(v))?;
            project(t, y, 132)
        },
        &b,
    );
    let other = uniform(&mut r, &[3, 2]);
    check(
        "concat",
        |t, v| {
            let o = t.leaf(&other);
            let y = t.concat_features(o, v)?;
            project(t, y, 133)
        },
        &x,
    );
    check(
        "l2_normalize (sum)",
        |t, v| {
            let y = t.l2_normalize(v)?;
            Ok(t.sum(y))
        },
        &x,
    );
    check(
        "l2_normalize (projected)",
        |t, v| {
            let y = t.l2_normalize(v)?;
            project(t, y, 134)
        },
        &x,
    );
    let logits = uniform(&mut r, &[5, 2]);
    check(
        "softmax_cross_entropy",
        |t, v| t.softmax_cross_entropy(v, &[0, 1, 1, 0, 1]),
        &logits,
    );
}

#[test]
fn gradcheck_elementwise_and_reductions() {
    let mut r = rng(19);
    let x = uniform(&mut r, &[6]);
    let other = uniform(&mut r, &[6]);
    check(
        "add",
        |t, v| {
            let o = t.leaf(&other);
            let y = t.add(v, o)?;
            project(t, y, 140)
        },
        &x,
    );
    check(
        "sub",
        |t, v| {
            let o = t.leaf(&other);
            let y = t.sub(o, v)?;
            project(t, y, 141)
        },
        &x,
    );
    check(
        "mul",
        |t, v| {
            let o = t.leaf(&other);
            let y = t.mul(v, o)?;
            project(t, y, 142)
        },
        &x,
    );
    check(
        "affine",
        |t, v| {
            let y = t.affine(v, -2.5, 0.75);
            project(t, y, 143)
        },
        &x,
    );
    check(
        "square",
        |t, v| {
            let y = t.square(v);
            project(t, y, 144)
        },
        &x,
    );
    check("mean", |t, v| Ok(t.mean(v)), &x);
    check(
        "gather",
        |t, v| {
            let y = t.gather(v, &[4, 1, 1, 5])?;
            project(t, y, 145)
        },
        &x,
    );

    let z = uniform(&mut r, &[4, 3]);
    let c = uniform(&mut r, &[3]);
    check(
        "row_distance wrt rows",
        |t, v| {
            let cv = t.leaf(&c);
            let y = t.row_distance(v, cv)?;
            project(t, y, 146)
        },
        &z,
    );
    check(
        "row_distance wrt center",
        |t, v| {
            let zv = t.leaf(&z);
            let y = t.row_distance(zv, v)?;
            project(t, y, 147)
        },
        &c,
    );
}

mod properties {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn l2_rows_are_unit_and_idempotent(vals in prop::collection::vec(-10.0f64..10.0, 12)) {
            prop_assume!(vals.chunks(4).all(|r| r.iter().map(|v| v * v).sum::<f64>() > 1e-6));
            let mut tape = Tape::new();
            let x = tape.constant([3, 4], vals).unwrap();
            let y = tape.l2_normalize(x).unwrap();
            let yy = tape.l2_normalize(y).unwrap();
            for row in tape.value(y).chunks(4) {
                let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                prop_assert!((n - 1.0).abs() < 1e-9);
            }
            prop_assert!(max_abs_diff(tape.value(y), tape.value(yy)) < 1e-9);
        }

        #[test]
        fn conv_linearity(seed in 0u64..1000, a in -2.0f64..2.0, b in -2.0f64..2.0) {
            let mut r = rng(seed);
            let x = uniform(&mut r, &[1, 2, 5, 5]);
            let z = uniform(&mut r, &[1, 2, 5, 5]);
            let k = uniform(&mut r, &[2, 2, 3, 3]);
            let zb = Tensor::zeros([2]);
            let mix = Tensor::new(x.shape().to_vec(), x.data().iter().zip(z.data()).map(|(p, q)| a * p + b * q).collect()).unwrap();
            let lhs = run_conv(&mix, &k, &zb, 2, 1).unwrap();
            let cx = run_conv(&x, &k, &zb, 2, 1).unwrap();
            let cz = run_conv(&z, &k, &zb, 2, 1).unwrap();
            let rhs: Vec<f64> = cx.data().iter().zip(cz.data()).map(|(p, q)| a * p + b * q).collect();
            prop_assert!(max_abs_diff(lhs.data(), &rhs) < 1e-10);
        }
    }
}
