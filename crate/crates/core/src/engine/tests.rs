use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn rand_t(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, rng)
}

/// Central finite-difference check of `f` (which must end in a scalar) on 20
/// random coordinates spread over all `inputs`.
fn fd_check(
    inputs: &[Tensor<f64>],
    seed: u64,
    f: impl Fn(&mut Graph<f64>, &[Var]) -> Var,
) {
    let eval = |xs: &[Tensor<f64>]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.leaf(t.clone(), true)).collect();
        let out = f(&mut g, &vars);
        g.value(out).data()[0]
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = f(&mut g, &vars);
    g.backward(out).unwrap();
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|v| g.grad_or_zeros(*v)).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = 1e-5;
    for _ in 0..20 {
        let which = rng.random_range(0..inputs.len());
        let idx = rng.random_range(0..inputs[which].len());
        let mut plus = inputs.to_vec();
        plus[which].data_mut()[idx] += h;
        let mut minus = inputs.to_vec();
        minus[which].data_mut()[idx] -= h;
        let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
        let a = analytic[which].data()[idx];
        let err = (a - numeric).abs() / numeric.abs().max(1.0);
        assert!(
            err < 1e-4,
            "input {which} coord {idx}: analytic {a} numeric {numeric} err {err}"
        );
    }
}

/// `sum(y ⊙ r)` for a fixed random `r`, so every output element matters.
fn probe(g: &mut Graph<f64>, y: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = g.leaf(rand_t(g.value(y).shape(), &mut rng), false);
    let prod = g.mul(y, r).unwrap();
    g.sum(prod)
}

/// Six-nested-loop direct convolution with explicit zero padding.
fn naive_conv(x: &Tensor<f64>, k: &Tensor<f64>, dil: usize) -> Tensor<f64> {
    let [n, ci, h, w] = x.shape();
    let [co, _, kh, kw] = k.shape();
    let (pt, pl) = ((dil * (kh - 1) / 2) as isize, (dil * (kw - 1) / 2) as isize);
    let mut out = Tensor::zeros([n, co, h, w]);
    for b in 0..n {
        for o in 0..co {
            for y in 0..h {
                for xx in 0..w {
                    let mut acc = 0.0;
                    for c in 0..ci {
                        for i in 0..kh {
                            for j in 0..kw {
                                let sy = y as isize + (dil * i) as isize - pt;
                                let sx = xx as isize + (dil * j) as isize - pl;
                                if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                                    acc += x.at(b, c, sy as usize, sx as usize) * k.at(o, c, i, j);
                                }
                            }
                        }
                    }
                    out.data_mut()[((b * co + o) * h + y) * w + xx] = acc;
                }
            }
        }
    }
    out
}

fn assert_close(a: &[f64], b: &[f64], rel: f64) {
    assert_eq!(a.len(), b.len());
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!(
            (x - y).abs() <= rel * y.abs().max(1.0),
            "index {i}: {x} vs {y}"
        );
    }
}

#[test]
fn conv_zero_input_gives_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut g = Graph::new();
    let x = g.leaf(Tensor::<f64>::zeros([2, 3, 5, 6]), false);
    let k = g.leaf(rand_t([4, 3, 3, 5], &mut rng), false);
    let y = g.conv2d(x, k, 1).unwrap();
    assert!(g.value(y).data().iter().all(|v| *v == 0.0));
}

#[test]
fn conv_single_pixel_sees_only_centre_tap() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::<f64>::scalar(1.0), false);
    let k = g.leaf(Tensor::full([1, 1, 3, 3], 1.0), false);
    let y = g.conv2d(x, k, 1).unwrap();
    assert_eq!(g.value(y).data(), &[1.0]);
}

#[test]
fn conv_matches_naive_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for (kh, kw, dil) in [(3, 3, 1), (3, 5, 1), (3, 3, 2), (3, 5, 2)] {
        let x = rand_t([1, 4, 8, 8], &mut rng);
        let k = rand_t([4, 4, kh, kw], &mut rng);
        let mut g = Graph::new();
        let xv = g.leaf(x.clone(), false);
        let kv = g.leaf(k.clone(), false);
        let y = g.conv2d(xv, kv, dil).unwrap();
        assert_close(g.value(y).data(), naive_conv(&x, &k, dil).data(), 1e-6);
    }
}

#[test]
fn conv_channel_mismatch_is_error() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::zeros([1, 3, 4, 4]), false);
    let k = g.leaf(Tensor::zeros([2, 4, 3, 3]), false);
    assert!(matches!(g.conv2d(x, k, 1), Err(crate::Error::Shape(_))));
}

#[test]
fn pool_constant_image_is_fixed_point() {
    for kind in [PoolKind::Max, PoolKind::Avg] {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::<f64>::full([1, 2, 4, 5], 3.5), false);
        let y = g.pool2d(x, kind, 2).unwrap();
        assert!(g.value(y).data().iter().all(|v| *v == 3.5));
    }
}

#[test]
fn maxpool_two_by_two_example() {
    let mut g = Graph::new();
    let x = g.leaf(
        Tensor::<f64>::from_vec([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
        false,
    );
    let y = g.pool2d(x, PoolKind::Max, 2).unwrap();
    assert_eq!(g.value(y).data(), &[4.0, 4.0, 4.0, 4.0]);
}

#[test]
fn avgpool_matches_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_t([2, 3, 5, 7], &mut rng);
    let mut g = Graph::new();
    let xv = g.leaf(x.clone(), false);
    let y = g.pool2d(xv, PoolKind::Avg, 2).unwrap();
    let [n, c, h, w] = x.shape();
    let mut expect = Vec::new();
    for b in 0..n {
        for ch in 0..c {
            for yy in 0..h {
                for xx in 0..w {
                    let mut s = 0.0;
                    let mut cnt = 0.0;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            if yy + dy < h && xx + dx < w {
                                s += x.at(b, ch, yy + dy, xx + dx);
                                cnt += 1.0;
                            }
                        }
                    }
                    expect.push(s / cnt);
                }
            }
        }
    }
    assert_close(g.value(y).data(), &expect, 1e-6);
}

#[test]
fn maxpool_tie_sends_gradient_to_first_index() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::<f64>::full([1, 1, 1, 2], 1.0), true);
    let y = g.pool2d(x, PoolKind::Max, 2).unwrap();
    let s = g.sum(y);
    g.backward(s).unwrap();
    // out[0] window {0,1} → index 0; out[1] window {1} → index 1
    assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0]);
    let mut g = Graph::new();
    let x = g.leaf(Tensor::<f64>::full([1, 1, 1, 3], 1.0), true);
    let y = g.pool2d(x, PoolKind::Max, 2).unwrap();
    let s = g.sum(y);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
}

#[test]
fn batchnorm_constant_input_is_zero() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::<f64>::full([3, 2, 4, 4], 7.0), false);
    let gm = g.leaf(Tensor::full([1, 2, 1, 1], 1.0), false);
    let bt = g.leaf(Tensor::zeros([1, 2, 1, 1]), false);
    let (y, _) = g.batchnorm_train(x, gm, bt, BN_EPS).unwrap();
    assert!(g.value(y).data().iter().all(|v| *v == 0.0));
}

#[test]
fn batchnorm_zero_gamma_outputs_beta() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut g = Graph::new();
    let x = g.leaf(rand_t([2, 2, 3, 3], &mut rng), false);
    let gm = g.leaf(Tensor::zeros([1, 2, 1, 1]), false);
    let bt = g.leaf(Tensor::vector(&[0.25, -1.5]), false);
    let (y, _) = g.batchnorm_train(x, gm, bt, BN_EPS).unwrap();
    let out = g.value(y);
    for b in 0..2 {
        for y in 0..3 {
            for xx in 0..3 {
                assert_eq!(out.at(b, 0, y, xx), 0.25);
                assert_eq!(out.at(b, 1, y, xx), -1.5);
            }
        }
    }
}

#[test]
fn batchnorm_channel_means_match_beta() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut g = Graph::new();
    let x = g.leaf(Tensor::randn([4, 3, 5, 5], 3.0, &mut rng), false);
    let gm = g.leaf(Tensor::vector(&[0.5, 2.0, 1.0]), false);
    let beta = [0.1, -0.7, 3.0];
    let bt = g.leaf(Tensor::vector(&beta), false);
    let (y, stats) = g.batchnorm_train(x, gm, bt, BN_EPS).unwrap();
    let out = g.value(y);
    for (c, b) in beta.iter().enumerate() {
        let mut s: f64 = 0.0;
        for n in 0..4 {
            for yy in 0..5 {
                for xx in 0..5 {
                    s += out.at(n, c, yy, xx);
                }
            }
        }
        assert!((s / 100.0 - b).abs() < 1e-5_f64);
    }
    // independent recomputation of the input statistics
    let xin = g.value(x);
    for c in 0..3 {
        let vals: Vec<f64> = (0..4)
            .flat_map(|n| (0..25).map(move |i| (n, i)))
            .map(|(n, i)| xin.at(n, c, i / 5, i % 5))
            .collect();
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        assert!((m - stats.mean[c]).abs() < 1e-12);
    }
}

#[test]
fn identity_and_zero_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x0 = rand_t([2, 2, 3, 3], &mut rng);
    let mut g = Graph::new();
    let x = g.leaf(x0.clone(), true);
    let id = g.identity(x);
    let z = g.zero(x);
    assert_eq!(g.value(id).data(), x0.data());
    assert!(g.value(z).data().iter().all(|v| *v == 0.0));
    let s = probe(&mut g, z, 7);
    g.backward(s).unwrap();
    assert!(g.grad(x).unwrap().iter().all(|v| *v == 0.0));
}

#[test]
fn linear_identity_and_loop_oracle() {
    let mut g = Graph::new();
    let x0 = Tensor::<f64>::from_vec([2, 3, 1, 1], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
    let x = g.leaf(x0.clone(), false);
    let mut eye = Tensor::zeros([3, 3, 1, 1]);
    for i in 0..3 {
        eye.data_mut()[i * 3 + i] = 1.0;
    }
    let w = g.leaf(eye, false);
    let b = g.leaf(Tensor::zeros([1, 3, 1, 1]), false);
    let y = g.linear(x, w, b).unwrap();
    assert_eq!(g.value(y).data(), x0.data());

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x0 = rand_t([3, 2, 2, 2], &mut rng);
    let w0 = rand_t([5, 8, 1, 1], &mut rng);
    let b0 = rand_t([1, 5, 1, 1], &mut rng);
    let mut g = Graph::new();
    let (x, w, b) = (g.leaf(x0.clone(), false), g.leaf(w0.clone(), false), g.leaf(b0.clone(), false));
    let y = g.linear(x, w, b).unwrap();
    let mut expect = Vec::new();
    for n in 0..3 {
        for o in 0..5 {
            let mut acc = b0.data()[o];
            for i in 0..8 {
                acc += w0.data()[o * 8 + i] * x0.data()[n * 8 + i];
            }
            expect.push(acc);
        }
    }
    assert_close(g.value(y).data(), &expect, 1e-6);

    let bad = g.leaf(Tensor::zeros([5, 7, 1, 1]), false);
    assert!(g.linear(x, bad, b).is_err());
}

#[test]
fn global_avg_pool_of_constant() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::<f64>::full([2, 3, 4, 5], -2.25), false);
    let y = g.global_avg_pool(x);
    assert_eq!(g.value(y).shape(), [2, 3, 1, 1]);
    assert!(g.value(y).data().iter().all(|v| (*v + 2.25).abs() < 1e-15));
}

#[test]
fn cross_entropy_examples() {
    let mut g = Graph::new();
    let logits = g.leaf(Tensor::<f64>::zeros([2, 7, 1, 1]), false);
    let l = g.cross_entropy(logits, &[0, 6]).unwrap();
    assert!((g.value(l).data()[0] - 7f64.ln()).abs() < 1e-12);

    let mut v = vec![0.0; 4];
    v[2] = 1000.0;
    let logits = g.leaf(Tensor::<f64>::from_vec([1, 4, 1, 1], v).unwrap(), false);
    let l = g.cross_entropy(logits, &[2]).unwrap();
    assert!(g.value(l).data()[0] < 1e-6);

    assert!(matches!(
        g.cross_entropy(logits, &[4]),
        Err(crate::Error::Contract(_))
    ));
}

#[test]
fn triplet_examples_and_formula_oracle() {
    let mut g = Graph::new();
    let a = g.leaf(Tensor::<f64>::from_vec([1, 2, 1, 1], vec![0.0, 0.0]).unwrap(), false);
    let n = g.leaf(Tensor::<f64>::from_vec([1, 2, 1, 1], vec![2.0, 0.0]).unwrap(), false);
    // d(a,p)=0, d(a,n)=4=margin+1
    let l = g.triplet_loss(a, a, n, 3.0).unwrap();
    assert_eq!(g.value(l).data()[0], 0.0);
    let l = g.triplet_loss(a, a, a, 0.7).unwrap();
    assert!((g.value(l).data()[0] - 0.7).abs() < 1e-15);

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (a0, p0, n0) = (
        rand_t([6, 4, 1, 1], &mut rng),
        rand_t([6, 4, 1, 1], &mut rng),
        rand_t([6, 4, 1, 1], &mut rng),
    );
    let mut g = Graph::new();
    let (a, p, n) = (g.leaf(a0.clone(), false), g.leaf(p0.clone(), false), g.leaf(n0.clone(), false));
    let l = g.triplet_loss(a, p, n, 0.5).unwrap();
    let mut expect = 0.0;
    for s in 0..6 {
        let mut dap = 0.0;
        let mut dan = 0.0;
        for i in 0..4 {
            dap += (a0.data()[s * 4 + i] - p0.data()[s * 4 + i]).powi(2);
            dan += (a0.data()[s * 4 + i] - n0.data()[s * 4 + i]).powi(2);
        }
        expect += f64::max(0.0, dap - dan + 0.5);
    }
    assert!((g.value(l).data()[0] - expect / 6.0).abs() < 1e-6);

    let short = g.leaf(Tensor::<f64>::zeros([6, 3, 1, 1]), false);
    assert!(g.triplet_loss(a, p, short, 0.5).is_err());
}

#[test]
fn backward_simple_sums() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let x0 = rand_t([1, 2, 2, 3], &mut rng);
    let mut g = Graph::new();
    let x = g.leaf(x0.clone(), true);
    let s = g.sum(x);
    g.backward(s).unwrap();
    assert!(g.grad(x).unwrap().iter().all(|v| *v == 1.0));

    let mut g = Graph::new();
    let x = g.leaf(x0.clone(), true);
    let sq = g.square(x);
    let s = g.sum(sq);
    let half = g.scale(s, 0.5);
    g.backward(half).unwrap();
    assert_close(g.grad(x).unwrap(), x0.data(), 1e-15);

    let err = g.backward(x);
    assert!(matches!(err, Err(crate::Error::Contract(_))));
}

#[test]
fn finite_differences_per_op() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for (kh, kw, dil) in [(3, 3, 1), (3, 5, 1), (3, 3, 2), (3, 5, 2)] {
        let x = rand_t([2, 3, 5, 6], &mut rng);
        let k = rand_t([2, 3, kh, kw], &mut rng);
        fd_check(&[x, k], 100 + kh as u64 * 10 + kw as u64 + dil as u64, |g, v| {
            let y = g.conv2d(v[0], v[1], dil).unwrap();
            probe(g, y, 1)
        });
    }
    for (i, kind) in [PoolKind::Max, PoolKind::Avg].into_iter().enumerate() {
        let x = rand_t([2, 2, 4, 5], &mut rng);
        fd_check(&[x], 200 + i as u64, |g, v| {
            let y = g.pool2d(v[0], kind, 2).unwrap();
            probe(g, y, 2)
        });
    }
    let x = rand_t([3, 2, 3, 4], &mut rng);
    let gm = rand_t([1, 2, 1, 1], &mut rng);
    let bt = rand_t([1, 2, 1, 1], &mut rng);
    fd_check(&[x.clone(), gm.clone(), bt.clone()], 300, |g, v| {
        let (y, _) = g.batchnorm_train(v[0], v[1], v[2], BN_EPS).unwrap();
        probe(g, y, 3)
    });
    fd_check(&[x, gm, bt], 301, |g, v| {
        let y = g
            .batchnorm_eval(v[0], v[1], v[2], &[0.3, -0.2], &[1.5, 0.7], BN_EPS)
            .unwrap();
        probe(g, y, 4)
    });
    let x = rand_t([2, 6, 1, 1], &mut rng);
    let w = rand_t([4, 6, 1, 1], &mut rng);
    let b = rand_t([1, 4, 1, 1], &mut rng);
    fd_check(&[x, w, b], 400, |g, v| {
        let y = g.linear(v[0], v[1], v[2]).unwrap();
        probe(g, y, 5)
    });
    let logits = rand_t([4, 5, 1, 1], &mut rng);
    fd_check(&[logits], 500, |g, v| g.cross_entropy(v[0], &[0, 3, 4, 1]).unwrap());
    let trip: Vec<Tensor<f64>> = (0..3).map(|_| rand_t([5, 3, 1, 1], &mut rng)).collect();
    fd_check(&trip, 600, |g, v| g.triplet_loss(v[0], v[1], v[2], 1.0).unwrap());
    let z = rand_t([1, 1, 1, 6], &mut rng);
    let xs = rand_t([1, 6, 2, 2], &mut rng);
    fd_check(&[z, xs], 700, |g, v| {
        let w = g.softmax(v[0]);
        let y = g.global_avg_pool(v[1]);
        let r = g.relu(v[1]);
        let s1 = probe(g, y, 6);
        let s2 = probe(g, r, 7);
        let wsum = g.weighted_sum(&[(v[1], 0), (v[1], 3)], w).unwrap();
        let s3 = probe(g, wsum, 8);
        let t = g.add(s1, s2).unwrap();
        g.add(t, s3).unwrap()
    });
}

#[test]
fn small_network_finite_differences() {
    // conv → bn → maxpool → gap → linear → cross-entropy
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let inputs = vec![
        rand_t([3, 1, 4, 6], &mut rng),
        rand_t([4, 1, 3, 3], &mut rng),
        rand_t([1, 4, 1, 1], &mut rng),
        rand_t([1, 4, 1, 1], &mut rng),
        rand_t([3, 4, 1, 1], &mut rng),
        rand_t([1, 3, 1, 1], &mut rng),
    ];
    fd_check(&inputs, 800, |g, v| {
        let c = g.conv2d(v[0], v[1], 1).unwrap();
        let (b, _) = g.batchnorm_train(c, v[2], v[3], BN_EPS).unwrap();
        let p = g.pool2d(b, PoolKind::Max, 2).unwrap();
        let r = g.relu(p);
        let gp = g.global_avg_pool(r);
        let l = g.linear(gp, v[4], v[5]).unwrap();
        g.cross_entropy(l, &[0, 2, 1]).unwrap()
    });
}

#[test]
fn outputs_stay_finite() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut g = Graph::new();
    let x = g.leaf(Tensor::<f32>::randn([2, 2, 6, 6], 100.0, &mut rng), true);
    let k = g.leaf(Tensor::<f32>::randn([2, 2, 3, 5], 1.0, &mut rng), true);
    let c = g.conv2d(x, k, 2).unwrap();
    let p = g.pool2d(c, PoolKind::Avg, 2).unwrap();
    let gm = g.leaf(Tensor::full([1, 2, 1, 1], 1.0), true);
    let bt = g.leaf(Tensor::zeros([1, 2, 1, 1]), true);
    let (b, _) = g.batchnorm_train(p, gm, bt, BN_EPS).unwrap();
    let gp = g.global_avg_pool(b);
    let w = g.leaf(Tensor::<f32>::randn([3, 2, 1, 1], 1.0, &mut rng), true);
    let bias = g.leaf(Tensor::zeros([1, 3, 1, 1]), true);
    let l = g.linear(gp, w, bias).unwrap();
    let loss = g.cross_entropy(l, &[0, 2]).unwrap();
    g.backward(loss).unwrap();
    for v in [x, k, gm, bt, w, bias] {
        assert!(g.grad(v).unwrap().iter().all(|x| x.is_finite()));
    }
}
