//! Forward values against naive-loop oracles and gradients against central
//! finite differences for every primitive on the tape.

use flor_tensor::{grad_check, Grouping, Primitive, Scalar, Tape, Tensor, TensorError, Var, View3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::of(rng.random_range(-1.0..1.0))).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Contract the output with fixed random weights so every coordinate of the
/// gradient is generically non-zero.
fn project(tape: &mut Tape<f64>, y: Var, seed: u64) -> flor_tensor::Result<Var> {
    let w = random::<f64>(&mut rng(seed), tape.shape(y));
    let w = tape.constant(w);
    let prod = tape.mul(y, w)?;
    tape.sum_all(prod)
}

// ---- naive oracles -----------------------------------------------------

fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a[i * k + p] * b[p * n + j];
            }
            c[i * n + j] = s;
        }
    }
    c
}

#[allow(clippy::too_many_arguments)]
fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
    let (b, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (o, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; b * o * oh * ow];
    for bi in 0..b {
        for oi in 0..o {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut s = 0.0;
                    for ci in 0..c {
                        for i in 0..kh {
                            for j in 0..kw {
                                let iy = (y * stride + i) as isize - pad as isize;
                                let ix = (xx * stride + j) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                    s += x.data()[((bi * c + ci) * h + iy as usize) * wd + ix as usize]
                                        * w.data()[((oi * c + ci) * kh + i) * kw + j];
                                }
                            }
                        }
                    }
                    out[((bi * o + oi) * oh + y) * ow + xx] = s;
                }
            }
        }
    }
    Tensor::new([b, o, oh, ow], out).unwrap()
}

fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= tol, "index {i}: {x} vs {y}");
    }
}

// ---- forward examples ----------------------------------------------------

#[test]
fn relu_clamps_negatives() {
    let mut t = Tape::<f64>::inference();
    let x = t.constant(Tensor::from_f64([3], &[-1.0, 0.0, 2.0]).unwrap());
    let y = t.apply(&Primitive::Relu, &[x]).unwrap();
    assert_eq!(t.value(y).data(), &[0.0, 0.0, 2.0]);
}

#[test]
fn conv_of_ones_sums_the_window() {
    let mut t = Tape::<f64>::inference();
    let x = t.constant(Tensor::ones([1, 1, 3, 3]));
    let w = t.constant(Tensor::ones([1, 1, 3, 3]));
    let y = t.apply(&Primitive::Conv2d { stride: 1, pad: 0 }, &[x, w]).unwrap();
    assert_eq!(t.shape(y), &[1, 1, 1, 1]);
    assert_eq!(t.value(y).item(), 9.0);
}

#[test]
fn matmul_matches_triple_loop() {
    let mut r = rng(1);
    let a = random::<f64>(&mut r, &[3, 4]);
    let b = random::<f64>(&mut r, &[4, 2]);
    let mut t = Tape::inference();
    let (va, vb) = (t.constant(a.clone()), t.constant(b.clone()));
    let y = t.apply(&Primitive::MatMul, &[va, vb]).unwrap();
    assert_close(t.value(y).data(), &naive_matmul(a.data(), b.data(), 3, 4, 2), 1e-12);
}

#[test]
fn conv_matches_naive_loops_with_stride_and_padding() {
    let mut r = rng(2);
    for &(stride, pad) in &[(1, 0), (1, 1), (2, 1), (2, 0), (3, 2)] {
        let x = random::<f64>(&mut r, &[2, 3, 7, 6]);
        let w = random::<f64>(&mut r, &[4, 3, 3, 3]);
        let mut t = Tape::inference();
        let (vx, vw) = (t.constant(x.clone()), t.constant(w.clone()));
        let y = t.conv2d(vx, vw, stride, pad).unwrap();
        let oracle = naive_conv(&x, &w, stride, pad);
        assert_eq!(t.shape(y), oracle.shape());
        assert_close(t.value(y).data(), oracle.data(), 1e-10);
    }
}

#[test]
fn bmm_matches_per_batch_loops() {
    let mut r = rng(3);
    let a = random::<f64>(&mut r, &[3, 4, 5]);
    let b = random::<f64>(&mut r, &[3, 5, 2]);
    let bt = random::<f64>(&mut r, &[3, 2, 5]);
    let mut t = Tape::inference();
    let (va, vb, vbt) = (t.constant(a.clone()), t.constant(b.clone()), t.constant(bt.clone()));
    let y = t.bmm(va, vb, false).unwrap();
    let yt = t.bmm(va, vbt, true).unwrap();
    for n in 0..3 {
        let ai = &a.data()[n * 20..(n + 1) * 20];
        let expect = naive_matmul(ai, &b.data()[n * 10..(n + 1) * 10], 4, 5, 2);
        assert_close(&t.value(y).data()[n * 8..(n + 1) * 8], &expect, 1e-12);
        // transpose the stored [2, 5] block into [5, 2]
        let blk = &bt.data()[n * 10..(n + 1) * 10];
        let tr: Vec<f64> = (0..10).map(|i| blk[(i % 2) * 5 + i / 2]).collect();
        let expect = naive_matmul(ai, &tr, 4, 5, 2);
        assert_close(&t.value(yt).data()[n * 8..(n + 1) * 8], &expect, 1e-12);
    }
}

#[test]
fn reductions_and_pooling_match_direct_sums() {
    let mut r = rng(4);
    let x = random::<f64>(&mut r, &[2, 3, 4, 4]);
    let mut t = Tape::inference();
    let v = t.constant(x.clone());
    let m = t.apply(&Primitive::Mean { axis: 1 }, &[v]).unwrap();
    let s = t.apply(&Primitive::Var { axis: 1 }, &[v]).unwrap();
    let p = t.apply(&Primitive::AvgPool { kernel: 2 }, &[v]).unwrap();
    assert_eq!(t.shape(m), &[2, 4, 4]);
    assert_eq!(t.shape(p), &[2, 3, 2, 2]);
    let at = |b: usize, c: usize, h: usize, w: usize| x.data()[((b * 3 + c) * 4 + h) * 4 + w];
    for b in 0..2 {
        for h in 0..4 {
            for w in 0..4 {
                let vals: Vec<f64> = (0..3).map(|c| at(b, c, h, w)).collect();
                let mean = vals.iter().sum::<f64>() / 3.0;
                let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 3.0;
                let idx = (b * 4 + h) * 4 + w;
                assert!((t.value(m).data()[idx] - mean).abs() < 1e-12);
                assert!((t.value(s).data()[idx] - var).abs() < 1e-12);
            }
        }
        for c in 0..3 {
            for (i, j) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                let avg = (at(b, c, 2 * i, 2 * j)
                    + at(b, c, 2 * i + 1, 2 * j)
                    + at(b, c, 2 * i, 2 * j + 1)
                    + at(b, c, 2 * i + 1, 2 * j + 1))
                    / 4.0;
                assert!((t.value(p).data()[((b * 3 + c) * 2 + i) * 2 + j] - avg).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn interpolate_linear_is_exact_at_endpoints() {
    let mut r = rng(5);
    let a = random::<f64>(&mut r, &[2, 3]);
    let b = random::<f64>(&mut r, &[2, 3]);
    for (tv, expect) in [(0.0, &a), (1.0, &b)] {
        let mut t = Tape::inference();
        let (va, vb) = (t.constant(a.clone()), t.constant(b.clone()));
        let vt = t.constant(Tensor::scalar(tv));
        let y = t.apply(&Primitive::InterpolateLinear, &[va, vb, vt]).unwrap();
        assert_eq!(t.value(y), expect);
    }
}

// ---- softmax cross-entropy ---------------------------------------------------

#[test]
fn cross_entropy_of_uniform_logits_is_log_classes() {
    let mut t = Tape::<f64>::inference();
    let x = t.constant(Tensor::full([2, 5], 0.3));
    let l = t.softmax_cross_entropy(x, &[0, 4]).unwrap();
    assert!((t.value(l).item() - 5f64.ln()).abs() < 1e-12);
}

#[test]
fn cross_entropy_saturates_without_overflow() {
    let mut t = Tape::<f64>::inference();
    let x = t.constant(Tensor::from_f64([1, 2], &[1000.0, 0.0]).unwrap());
    let l = t.softmax_cross_entropy(x, &[0]).unwrap();
    assert!(t.value(l).item().abs() < 1e-12);
}

#[test]
fn cross_entropy_matches_log_sum_exp() {
    let mut r = rng(6);
    let logits = random::<f64>(&mut r, &[4, 3]).map(|v| 4.0 * v);
    let labels = [2, 0, 1, 1];
    let mut t = Tape::inference();
    let x = t.constant(logits.clone());
    let l = t.softmax_cross_entropy(x, &labels).unwrap();
    let mut expect = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let row = &logits.data()[i * 3..(i + 1) * 3];
        let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
        expect += lse - row[y];
    }
    expect /= 4.0;
    assert!((t.value(l).item() - expect).abs() < 1e-10);
}

#[test]
fn cross_entropy_rejects_out_of_range_label() {
    let mut t = Tape::<f64>::new();
    let x = t.leaf(Tensor::zeros([2, 3]), true);
    assert_eq!(
        t.softmax_cross_entropy(x, &[0, 3]).unwrap_err(),
        TensorError::LabelOutOfRange { label: 3, classes: 3 }
    );
}

// ---- gradient checks (64-bit) ------------------------------------------------

fn check(shape: &[usize], seed: u64, f: impl Fn(&mut Tape<f64>, Var) -> flor_tensor::Result<Var>) {
    let x = random::<f64>(&mut rng(seed), shape);
    let err = grad_check(&f, &x, 1e-5).unwrap();
    assert!(err < 1e-4, "relative error {err}");
}

#[test]
fn grad_sum_is_all_ones() {
    let mut t = Tape::<f64>::new();
    let x = t.leaf(random(&mut rng(7), &[2, 3, 2]), true);
    let l = t.sum_all(x).unwrap();
    let g = t.backward(l).unwrap();
    assert!(g.get(x).unwrap().data().iter().all(|&v| v == 1.0));
}

#[test]
fn grad_of_squares_is_twice_input() {
    let mut t = Tape::<f64>::new();
    let x = t.leaf(Tensor::from_f64([3], &[1.0, 2.0, 3.0]).unwrap(), true);
    let sq = t.mul(x, x).unwrap();
    let l = t.sum_all(sq).unwrap();
    let g = t.backward(l).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
}

#[test]
fn grad_check_polynomial_and_constant() {
    let x = random::<f64>(&mut rng(8), &[5]);
    let err = grad_check(
        |t, x| {
            let sq = t.mul(x, x)?;
            t.sum_all(sq)
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6);
    let err = grad_check(|t, _| Ok(t.constant(Tensor::scalar(3.0))), &x, 1e-5).unwrap();
    assert_eq!(err, 0.0);
}

#[test]
fn grad_check_rejects_non_finite() {
    let x = Tensor::from_f64([2], &[1.0, 2.0]).unwrap();
    let err = grad_check(|t, x| {
        let y = t.mul_scalar(x, f64::INFINITY)?;
        t.sum_all(y)
    }, &x, 1e-5);
    assert!(matches!(err, Err(TensorError::NonFinite { .. })));
}

#[test]
fn grad_matmul_both_sides() {
    let w = random::<f64>(&mut rng(9), &[4, 3]);
    check(&[2, 4], 10, |t, x| {
        let w = t.constant(w.clone());
        let y = t.matmul(x, w)?;
        project(t, y, 11)
    });
    let a = random::<f64>(&mut rng(12), &[2, 4]);
    check(&[4, 3], 13, |t, w| {
        let a = t.constant(a.clone());
        let y = t.matmul(a, w)?;
        project(t, y, 14)
    });
}

#[test]
fn grad_conv_input_and_kernel() {
    let w = random::<f64>(&mut rng(15), &[3, 2, 3, 3]);
    check(&[2, 2, 5, 5], 16, |t, x| {
        let w = t.constant(w.clone());
        let y = t.conv2d(x, w, 2, 1)?;
        project(t, y, 17)
    });
    let x = random::<f64>(&mut rng(18), &[2, 2, 5, 5]);
    check(&[3, 2, 3, 3], 19, |t, w| {
        let x = t.constant(x.clone());
        let y = t.conv2d(x, w, 1, 1)?;
        project(t, y, 20)
    });
}

#[test]
fn grad_bmm_variants() {
    let b = random::<f64>(&mut rng(21), &[2, 4, 3]);
    for trans_b in [false, true] {
        let bb = if trans_b { random::<f64>(&mut rng(22), &[2, 3, 4]) } else { b.clone() };
        check(&[2, 5, 4], 23, |t, a| {
            let bv = t.constant(bb.clone());
            let y = t.bmm(a, bv, trans_b)?;
            project(t, y, 24)
        });
        let a = random::<f64>(&mut rng(25), &[2, 5, 4]);
        let shape: &[usize] = if trans_b { &[2, 3, 4] } else { &[2, 4, 3] };
        check(shape, 26, |t, bv| {
            let av = t.constant(a.clone());
            let y = t.bmm(av, bv, trans_b)?;
            project(t, y, 27)
        });
    }
}

#[test]
fn grad_elementwise_and_layout() {
    check(&[2, 3, 4], 28, |t, x| {
        let y = t.relu(x)?;
        project(t, y, 29)
    });
    check(&[2, 3, 4], 30, |t, x| {
        let y = t.gelu(x)?;
        project(t, y, 31)
    });
    check(&[2, 3, 4], 32, |t, x| {
        let y = t.mul_scalar(x, -1.7)?;
        let z = t.mul(y, x)?;
        let w = t.sub(z, x)?;
        let v = t.add(w, y)?;
        project(t, v, 33)
    });
    check(&[2, 3, 4], 34, |t, x| {
        let y = t.permute(x, &[2, 0, 1])?;
        let y = t.reshape(y, [4, 6])?;
        project(t, y, 35)
    });
    check(&[2, 5, 3], 36, |t, x| {
        let head = t.narrow(x, 1, 0, 1)?;
        let tail = t.narrow(x, 1, 2, 3)?;
        let c = t.concat(&[tail, head], 1)?;
        project(t, c, 37)
    });
    check(&[1, 3, 2], 38, |t, x| {
        let y = t.expand_leading(x, 4)?;
        project(t, y, 39)
    });
    check(&[2, 3, 4, 4], 40, |t, x| {
        let y = t.avg_pool2d(x, 2, 4)?;
        project(t, y, 41)
    });
}

#[test]
fn grad_reductions() {
    for axis in 0..3 {
        check(&[3, 4, 2], 42 + axis as u64, |t, x| {
            let y = t.mean(x, axis)?;
            project(t, y, 50)
        });
        check(&[3, 4, 2], 45 + axis as u64, |t, x| {
            let y = t.var(x, axis)?;
            project(t, y, 51)
        });
    }
    check(&[3, 4], 52, |t, x| {
        let y = t.mul(x, x)?;
        t.mean_all(y)
    });
}

#[test]
fn grad_standardize_both_groupings() {
    let view = View3 { outer: 3, channels: 2, inner: 4 };
    for grouping in [Grouping::PerChannel, Grouping::PerSlab] {
        check(&[3, 2, 2, 2], 53, |t, x| {
            let (y, _) = t.standardize(x, view, grouping, 1e-5)?;
            project(t, y, 54)
        });
    }
}

#[test]
fn grad_channel_affine_and_lerp() {
    let view = View3 { outer: 2, channels: 3, inner: 4 };
    let x = random::<f64>(&mut rng(55), &[2, 3, 4]);
    check(&[3], 56, |t, s| {
        let xv = t.constant(x.clone());
        let y = t.mul_channel(xv, s, view)?;
        let y = t.add_channel(y, s, view)?;
        project(t, y, 57)
    });
    let a = random::<f64>(&mut rng(58), &[2, 3]);
    let b = random::<f64>(&mut rng(59), &[2, 3]);
    let ratio = Tensor::from_f64([1], &[0.37]).unwrap();
    let err = grad_check(
        |t, r| {
            let (av, bv) = (t.constant(a.clone()), t.constant(b.clone()));
            let y = t.lerp(av, bv, r)?;
            project(t, y, 60)
        },
        &ratio,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6);
    check(&[2, 3], 61, |t, av| {
        let bv = t.constant(b.clone());
        let r = t.constant(Tensor::scalar(0.37));
        let y = t.lerp(av, bv, r)?;
        project(t, y, 62)
    });
}

#[test]
fn grad_softmax_family() {
    check(&[3, 5], 63, |t, x| {
        let y = t.softmax_last(x)?;
        project(t, y, 64)
    });
    check(&[4, 3], 65, |t, x| t.softmax_cross_entropy(x, &[0, 2, 1, 2]));
    check(&[3, 4], 66, |t, x| {
        let y = t.l2_normalize_rows(x)?;
        project(t, y, 67)
    });
}

// ---- 32-bit gradients --------------------------------------------------------

/// Relative error of the f32 tape gradient against f32 central differences.
fn grad_error_f32(x: &Tensor<f32>, step: f32, f: impl Fn(&mut Tape<f32>, Var) -> flor_tensor::Result<Var>) -> f64 {
    let mut t = Tape::new();
    let v = t.leaf(x.clone(), true);
    let l = f(&mut t, v).unwrap();
    let g = t.backward(l).unwrap().take(v).unwrap();
    let eval = |p: Tensor<f32>| {
        let mut t = Tape::inference();
        let v = t.leaf(p, false);
        let l = f(&mut t, v).unwrap();
        t.value(l).item() as f64
    };
    let mut worst = 0.0f64;
    for i in 0..x.numel() {
        let (mut p, mut m) = (x.clone(), x.clone());
        p.data_mut()[i] += step;
        m.data_mut()[i] -= step;
        let fd = (eval(p) - eval(m)) / (2.0 * step as f64);
        worst = worst.max((g.data()[i] as f64 - fd).abs() / (fd.abs() + 1e-8));
    }
    worst
}

#[test]
fn grad_f32_within_loose_tolerance() {
    let x = random::<f32>(&mut rng(68), &[2, 2, 4, 4]);
    let w = random::<f32>(&mut rng(69), &[3, 2, 3, 3]);
    let proj = random::<f32>(&mut rng(70), &[2, 3, 4, 4]);
    let view = View3 { outer: 2, channels: 3, inner: 16 };
    let err = grad_error_f32(&x, 1e-2, |t, x| {
        let w = t.constant(w.clone());
        let y = t.conv2d(x, w, 1, 1)?;
        let (y, _) = t.standardize(y, view, Grouping::PerSlab, 1e-5)?;
        let y = t.gelu(y)?;
        let p = t.constant(proj.clone());
        let y = t.mul(y, p)?;
        t.sum_all(y)
    });
    assert!(err < 1e-2, "f32 relative error {err}");
}

// ---- tape contract ---------------------------------------------------------------

#[test]
fn backward_rejects_non_scalar_and_double_use() {
    let mut t = Tape::<f64>::new();
    let x = t.leaf(Tensor::ones([3]), true);
    let y = t.mul_scalar(x, 2.0).unwrap();
    assert!(matches!(t.backward(y), Err(TensorError::NonScalarLoss(_))));
    let l = t.sum_all(y).unwrap();
    t.backward(l).unwrap();
    assert_eq!(t.backward(l).unwrap_err(), TensorError::TapeConsumed);
}

#[test]
fn backward_visits_nodes_in_reverse_order_and_reaches_every_leaf() {
    let mut r = rng(71);
    let mut t = Tape::<f64>::new();
    let a = t.leaf(random(&mut r, &[2, 3]), true);
    let b = t.leaf(random(&mut r, &[3, 2]), true);
    let c = t.leaf(random(&mut r, &[2, 2]), true);
    let ab = t.matmul(a, b).unwrap();
    let s = t.add(ab, c).unwrap();
    let s = t.relu(s).unwrap();
    let l = t.mean_all(s).unwrap();
    let g = t.backward(l).unwrap();
    let order: Vec<usize> = g.visited().iter().map(|v| v.index()).collect();
    assert!(order.windows(2).all(|w| w[0] > w[1]), "{order:?}");
    for v in [a, b, c] {
        assert!(g.get(v).is_some());
    }
}

#[test]
fn detached_tensors_receive_no_gradient() {
    let mut t = Tape::<f64>::new();
    let x = t.leaf(Tensor::from_f64([2], &[1.0, -2.0]).unwrap(), true);
    let y = t.mul_scalar(x, 3.0).unwrap();
    let d = t.detach(y);
    let z = t.mul(d, x).unwrap();
    let l = t.sum_all(z).unwrap();
    let g = t.backward(l).unwrap();
    assert!(g.get(d).is_none());
    // only the direct path contributes: dz/dx = d
    assert_eq!(g.get(x).unwrap().data(), &[3.0, -6.0]);
}

#[test]
fn inference_tape_records_no_gradients() {
    let mut t = Tape::<f64>::inference();
    let x = t.leaf(Tensor::ones([2]), true);
    let l = t.sum_all(x).unwrap();
    assert!(!t.requires_grad(l));
    let g = t.backward(l).unwrap();
    assert!(g.get(x).is_none());
}

#[test]
fn shape_errors_name_the_op() {
    let mut t = Tape::<f64>::new();
    let a = t.leaf(Tensor::zeros([2, 3]), true);
    let b = t.leaf(Tensor::zeros([2, 3]), true);
    match t.matmul(a, b).unwrap_err() {
        TensorError::ShapeMismatch { op, detail } => {
            assert_eq!(op, "matmul");
            assert!(detail.contains("[2, 3]"));
        }
        e => panic!("unexpected {e:?}"),
    }
    let img = t.leaf(Tensor::zeros([1, 2, 4, 4]), true);
    let k = t.leaf(Tensor::zeros([1, 3, 3, 3]), true);
    assert!(matches!(t.conv2d(img, k, 1, 0), Err(TensorError::ShapeMismatch { op: "conv2d", .. })));
}

#[test]
fn non_finite_intermediate_is_an_error() {
    let mut t = Tape::<f64>::new();
    let x = t.leaf(Tensor::from_f64([2], &[1.0, 0.0]).unwrap(), true);
    let y = t.mul_scalar(x, f64::MAX).unwrap();
    assert!(matches!(t.mul_scalar(y, 10.0), Err(TensorError::NonFinite { op: "mul_scalar" })));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    /// Identical inputs give bit-identical outputs for conv, matmul and
    /// standardization.
    #[test]
    fn primitives_are_pure(seed in 0u64..10_000, b in 1usize..4, c in 1usize..4, hw in 3usize..8) {
        let mut r = rng(seed);
        let x = random::<f32>(&mut r, &[b, c, hw, hw]);
        let w = random::<f32>(&mut r, &[2, c, 3, 3]);
        let run = || {
            let mut t = Tape::<f32>::inference();
            let (vx, vw) = (t.constant(x.clone()), t.constant(w.clone()));
            let y = t.conv2d(vx, vw, 1, 1).unwrap();
            let view = View3 { outer: b, channels: 2, inner: hw * hw };
            let (z, _) = t.standardize(y, view, Grouping::PerChannel, 1e-5).unwrap();
            t.value(z).clone()
        };
        prop_assert_eq!(run(), run());
    }

    /// Conv forward equals the naive oracle on random geometry.
    #[test]
    fn conv_matches_oracle(seed in 0u64..10_000, b in 1usize..3, c in 1usize..4, o in 1usize..4,
                           h in 3usize..8, w in 3usize..8, stride in 1usize..3, pad in 0usize..2) {
        let mut r = rng(seed);
        let x = random::<f64>(&mut r, &[b, c, h, w]);
        let k = random::<f64>(&mut r, &[o, c, 3, 3]);
        let mut t = Tape::inference();
        let (vx, vk) = (t.constant(x.clone()), t.constant(k.clone()));
        let y = t.conv2d(vx, vk, stride, pad).unwrap();
        let oracle = naive_conv(&x, &k, stride, pad);
        prop_assert!(t.value(y).max_abs_diff(&oracle).unwrap() < 1e-10);
    }

    #[test]
    fn matmul_matches_oracle(seed in 0u64..10_000, m in 1usize..8, k in 1usize..8, n in 1usize..8) {
        let mut r = rng(seed);
        let a = random::<f64>(&mut r, &[m, k]);
        let b = random::<f64>(&mut r, &[k, n]);
        let mut t = Tape::inference();
        let (va, vb) = (t.constant(a.clone()), t.constant(b.clone()));
        let y = t.matmul(va, vb).unwrap();
        let oracle = naive_matmul(a.data(), b.data(), m, k, n);
        for (x, y) in t.value(y).data().iter().zip(&oracle) {
            prop_assert!((x - y).abs() < 1e-10);
        }
    }
}
