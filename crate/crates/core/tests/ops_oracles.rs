//! Kernel results against independent naive recomputations.

use proptest::prelude::*;
use videobooth::ops::{self, Conv3dSpec, Resample};
use videobooth::{Graph, RngStream, Tensor};

fn randn(rng: &mut RngStream, shape: &[usize]) -> Tensor<f64> {
    rng.normal_tensor::<f64>(shape.to_vec())
}

fn naive_matmul(a: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                out[i * n + j] += a.data()[i * k + p] * b.data()[p * n + j];
            }
        }
    }
    out
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = RngStream::new(1);
    let a = randn(&mut rng, &[4, 5]);
    let b = randn(&mut rng, &[5, 3]);
    let got = ops::matmul(&a, &b).unwrap();
    for (x, y) in got.data().iter().zip(naive_matmul(&a, &b)) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn softmax_matches_extended_precision() {
    let mut rng = RngStream::new(2);
    let x = randn(&mut rng, &[8]).scale(3.0);
    let got = ops::softmax_lastdim(&x, None).unwrap();
    // log-sum-exp in a compensated sum as the extended-precision reference
    let m = x.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.data().iter().map(|v| (v - m).exp()).collect();
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for e in &exps {
        let y = e - comp;
        let t = sum + y;
        comp = (t - sum) - y;
        sum = t;
    }
    for (g, e) in got.data().iter().zip(&exps) {
        assert!((g - e / sum).abs() < 1e-10);
    }
    let big = ops::softmax_lastdim(&Tensor::<f64>::from_f64([2], &[1000.0, 0.0]).unwrap(), None).unwrap();
    assert!((big.data()[0] - 1.0).abs() < 1e-12 && big.data()[1] < 1e-300 && big.all_finite());
}

#[allow(clippy::needless_range_loop)]
fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, bias: &[f64], spec: &Conv3dSpec) -> Tensor<f64> {
    let (xs, ws) = (x.shape(), w.shape());
    let out_ext: Vec<usize> = (0..3)
        .map(|d| (xs[2 + d] + 2 * spec.pad[d] - ws[2 + d]) / spec.stride[d] + 1)
        .collect();
    let mut out = vec![0.0; xs[0] * ws[0] * out_ext.iter().product::<usize>()];
    let mut idx = 0;
    for b in 0..xs[0] {
        for co in 0..ws[0] {
            for of in 0..out_ext[0] {
                for oh in 0..out_ext[1] {
                    for ow in 0..out_ext[2] {
                        let mut acc = bias[co];
                        for ci in 0..xs[1] {
                            for kf in 0..ws[2] {
                                for kh in 0..ws[3] {
                                    for kw in 0..ws[4] {
                                        let f = (of * spec.stride[0] + kf) as isize - spec.pad[0] as isize;
                                        let h = (oh * spec.stride[1] + kh) as isize - spec.pad[1] as isize;
                                        let ww = (ow * spec.stride[2] + kw) as isize - spec.pad[2] as isize;
                                        if f < 0 || h < 0 || ww < 0 || f >= xs[2] as isize || h >= xs[3] as isize || ww >= xs[4] as isize {
                                            continue;
                                        }
                                        acc += x.at(&[b, ci, f as usize, h as usize, ww as usize]) * w.at(&[co, ci, kf, kh, kw]);
                                    }
                                }
                            }
                        }
                        out[idx] = acc;
                        idx += 1;
                    }
                }
            }
        }
    }
    Tensor::new(vec![xs[0], ws[0], out_ext[0], out_ext[1], out_ext[2]], out).unwrap()
}

#[test]
fn conv3d_matches_seven_loop_oracle() {
    let mut rng = RngStream::new(3);
    let x = randn(&mut rng, &[1, 2, 4, 6, 6]);
    let w = randn(&mut rng, &[3, 2, 3, 3, 3]);
    let b = randn(&mut rng, &[3]);
    for spec in [Conv3dSpec::same([3, 3, 3]), Conv3dSpec { stride: [1, 2, 2], pad: [0, 1, 1] }] {
        let got = ops::conv3d(&x, &w, Some(&b), &spec).unwrap();
        let want = naive_conv(&x, &w, b.data(), &spec);
        assert!(got.max_abs_diff(&want).unwrap() < 1e-10);
    }
}

#[test]
fn conv3d_backward_is_the_adjoint() {
    // <conv(x), g> is bilinear, so its gradients are exact under the naive oracle
    let mut rng = RngStream::new(4);
    let x = randn(&mut rng, &[2, 3, 3, 5, 4]);
    let w = randn(&mut rng, &[2, 3, 1, 3, 3]);
    for spec in [Conv3dSpec::same([1, 3, 3]), Conv3dSpec { stride: [1, 2, 2], pad: [0, 1, 1] }] {
        let y = ops::conv3d(&x, &w, None, &spec).unwrap();
        let gout = randn(&mut rng, y.shape());
        let (dx, dw, db) = ops::conv3d_backward(&x, &w, gout.data(), &spec, true, true);
        let (dx, dw) = (dx.unwrap(), dw.unwrap());
        let dot = |a: &Tensor<f64>| a.data().iter().zip(gout.data()).map(|(p, q)| p * q).sum::<f64>();
        let zero = vec![0.0; 2];
        for i in 0..x.numel() {
            let mut e = vec![0.0; x.numel()];
            e[i] = 1.0;
            let want = dot(&naive_conv(&Tensor::new(x.shape().to_vec(), e).unwrap(), &w, &zero, &spec));
            assert!((dx[i] - want).abs() < 1e-10);
        }
        for i in 0..w.numel() {
            let mut e = vec![0.0; w.numel()];
            e[i] = 1.0;
            let want = dot(&naive_conv(&x, &Tensor::new(w.shape().to_vec(), e).unwrap(), &zero, &spec));
            assert!((dw[i] - want).abs() < 1e-10);
        }
        let per = gout.numel() / (2 * 2);
        for co in 0..2 {
            let want: f64 = (0..2).map(|b| gout.data()[(b * 2 + co) * per..(b * 2 + co + 1) * per].iter().sum::<f64>()).sum();
            assert!((db[co] - want).abs() < 1e-10);
        }
    }
}

#[test]
fn downsample_matches_block_mean() {
    let mut rng = RngStream::new(5);
    let x = randn(&mut rng, &[8, 8]);
    let got = ops::resample2x(&x, Resample::Down).unwrap();
    for i in 0..4 {
        for j in 0..4 {
            let m = (x.at(&[2 * i, 2 * j]) + x.at(&[2 * i + 1, 2 * j]) + x.at(&[2 * i, 2 * j + 1]) + x.at(&[2 * i + 1, 2 * j + 1])) / 4.0;
            assert!((got.at(&[i, j]) - m).abs() < 1e-12);
        }
    }
    let c = Tensor::<f64>::full([4, 4], 2.5);
    assert!(ops::resample2x(&c, Resample::Down).unwrap().bitwise_eq(&Tensor::full([2, 2], 2.5)));
    let up = ops::resample2x(&Tensor::<f64>::from_f64([2, 2], &[1., 2., 3., 4.]).unwrap(), Resample::Up).unwrap();
    let want = [1., 1., 2., 2., 1., 1., 2., 2., 3., 3., 4., 4., 3., 3., 4., 4.];
    assert_eq!(up.to_vec(), want);
}

/// Central differences of a scalar function of one parameter tensor.
fn finite_diff(f: &dyn Fn(&Tensor<f64>) -> f64, p: &Tensor<f64>, i: usize, h: f64) -> f64 {
    let mut plus = p.to_vec();
    let mut minus = p.to_vec();
    plus[i] += h;
    minus[i] -= h;
    let sh = p.shape().to_vec();
    (f(&Tensor::new(sh.clone(), plus).unwrap()) - f(&Tensor::new(sh, minus).unwrap())) / (2.0 * h)
}

#[test]
fn mlp_softmax_gradients_match_finite_differences() {
    let mut rng = RngStream::new(6);
    let x = randn(&mut rng, &[5, 6]);
    let w1 = randn(&mut rng, &[6, 7]).scale(0.5);
    let w2 = randn(&mut rng, &[7, 4]).scale(0.5);
    let target = randn(&mut rng, &[5, 4]);
    let loss = |w1: &Tensor<f64>, w2: &Tensor<f64>, with_grad: bool| {
        let g = Graph::<f64>::new();
        let (xv, a, b, t) = (g.constant(x.clone()), g.param(w1.clone()), g.param(w2.clone()), g.constant(target.clone()));
        let h = g.silu(g.linear(xv, a, None).unwrap()).unwrap();
        let s = g.softmax_lastdim(g.linear(h, b, None).unwrap(), None).unwrap();
        let l = g.mse(s, t).unwrap();
        let value = g.value(l).item().unwrap();
        let grads = with_grad.then(|| {
            let gr = g.backward(l).unwrap();
            (gr.get(a).unwrap().clone(), gr.get(b).unwrap().clone())
        });
        (value, grads)
    };
    let (_, grads) = loss(&w1, &w2, true);
    let (g1, g2) = grads.unwrap();
    let mut checked = 0;
    for _ in 0..50 {
        let i = rng.below(w1.numel());
        let fd = finite_diff(&|p| loss(p, &w2, false).0, &w1, i, 1e-3);
        assert!((fd - g1.data()[i]).abs() <= 1e-4 * fd.abs().max(1e-3), "w1[{i}] {fd} vs {}", g1.data()[i]);
        let j = rng.below(w2.numel());
        let fd = finite_diff(&|p| loss(&w1, p, false).0, &w2, j, 1e-3);
        assert!((fd - g2.data()[j]).abs() <= 1e-4 * fd.abs().max(1e-3), "w2[{j}] {fd} vs {}", g2.data()[j]);
        checked += 2;
    }
    assert!(checked >= 100);
}

proptest! {
    #[test]
    fn matmul_is_bilinear(seed in 0u64..1000, m in 1usize..5, k in 1usize..5, n in 1usize..5) {
        let mut rng = RngStream::new(seed);
        let a = randn(&mut rng, &[m, k]);
        let b = randn(&mut rng, &[k, n]);
        let c = randn(&mut rng, &[k, n]);
        let lhs = ops::matmul(&a, &b.add(&c).unwrap()).unwrap();
        let rhs = ops::matmul(&a, &b).unwrap().add(&ops::matmul(&a, &c).unwrap()).unwrap();
        prop_assert!(lhs.max_abs_diff(&rhs).unwrap() < 1e-10);
    }

    #[test]
    fn softmax_rows_are_distributions(seed in 0u64..1000, rows in 1usize..5, cols in 1usize..9) {
        let x = RngStream::new(seed).normal_tensor::<f64>(vec![rows, cols]).scale(10.0);
        let y = ops::softmax_lastdim(&x, None).unwrap();
        for r in 0..rows {
            let row = &y.data()[r * cols..(r + 1) * cols];
            prop_assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn up_then_down_is_identity(seed in 0u64..1000, h in 1usize..5, w in 1usize..5) {
        let x = RngStream::new(seed).normal_tensor::<f64>(vec![2, h, w]);
        let back = ops::resample2x(&ops::resample2x(&x, Resample::Up).unwrap(), Resample::Down).unwrap();
        prop_assert!(back.max_abs_diff(&x).unwrap() < 1e-12);
    }
}
