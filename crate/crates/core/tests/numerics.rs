use frn_core::numerics::gradcheck::{grad_check, InputSpec, REGISTERED_OPS};
use frn_core::{Graph, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rand_t(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor<f64> {
    Tensor::uniform(shape.to_vec(), lo, hi, &mut ChaCha8Rng::seed_from_u64(seed))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn matmul_matches_triple_loop(m in 1usize..=16, k in 1usize..=16, n in 1usize..=16, seed in any::<u64>()) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let a = Tensor::<f32>::uniform([m, k], -1.0, 1.0, &mut r);
        let b = Tensor::<f32>::uniform([k, n], -1.0, 1.0, &mut r);
        let mut g = Graph::new();
        let (av, bv) = (g.input(a.clone()), g.input(b.clone()));
        let c = g.matmul(av, bv).unwrap();
        for i in 0..m {
            for j in 0..n {
                let want: f64 = (0..k).map(|p| a.at(&[i, p]) as f64 * b.at(&[p, j]) as f64).sum();
                prop_assert!((g.value(c).at(&[i, j]) as f64 - want).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn layer_norm_standardizes_each_position(c in 2usize..12, h in 1usize..5, w in 1usize..5, seed in any::<u64>()) {
        let x = rand_t(&[c, h, w], -3.0, 3.0, seed);
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let gamma = g.input(Tensor::full([c], 1.0));
        let beta = g.input(Tensor::zeros([c]));
        let y = g.layer_norm(xv, gamma, beta, 1e-12).unwrap();
        for px in 0..h * w {
            let col: Vec<f64> = (0..c).map(|ch| x.data()[ch * h * w + px]).collect();
            let mu = col.iter().sum::<f64>() / c as f64;
            let var = col.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / c as f64;
            if var < 1e-2 {
                continue;
            }
            let out: Vec<f64> = (0..c).map(|ch| g.value(y).data()[ch * h * w + px]).collect();
            let om = out.iter().sum::<f64>() / c as f64;
            let ov = out.iter().map(|v| (v - om).powi(2)).sum::<f64>() / c as f64;
            prop_assert!(om.abs() < 1e-6);
            prop_assert!((ov - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn conv2d_matches_direct_loops(
        cin in 1usize..4, cout in 1usize..4, h in 3usize..8, w in 3usize..8,
        k in prop::sample::select(vec![1usize, 3]), stride in 1usize..3, seed in any::<u64>(),
    ) {
        let pad = k / 2;
        let x = rand_t(&[cin, h, w], -1.0, 1.0, seed);
        let wt = rand_t(&[cout, cin, k, k], -1.0, 1.0, seed ^ 1);
        let b = rand_t(&[cout], -1.0, 1.0, seed ^ 2);
        let mut g = Graph::new();
        let (xv, wv, bv) = (g.input(x.clone()), g.input(wt.clone()), g.input(b.clone()));
        let y = g.conv2d(xv, wv, Some(bv), stride, pad).unwrap();
        let (ho, wo) = ((h + 2 * pad - k) / stride + 1, (w + 2 * pad - k) / stride + 1);
        prop_assert_eq!(g.shape(y), &[cout, ho, wo][..]);
        for o in 0..cout {
            for yy in 0..ho {
                for xx in 0..wo {
                    let mut acc = b.data()[o];
                    for i in 0..cin {
                        for dy in 0..k {
                            for dx in 0..k {
                                let (sy, sx) = ((yy * stride + dy) as isize - pad as isize, (xx * stride + dx) as isize - pad as isize);
                                if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                    continue;
                                }
                                acc += wt.at(&[o, i, dy, dx]) * x.at(&[i, sy as usize, sx as usize]);
                            }
                        }
                    }
                    prop_assert!((g.value(y).at(&[o, yy, xx]) - acc).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn dwconv_matches_direct_loops() {
    let x = rand_t(&[2, 5, 5], -1.0, 1.0, 3);
    let wt = rand_t(&[2, 3, 3], -1.0, 1.0, 4);
    let mut g = Graph::new();
    let (xv, wv) = (g.input(x.clone()), g.input(wt.clone()));
    let y = g.dwconv2d(xv, wv, None, 1).unwrap();
    for c in 0..2 {
        for yy in 0..5isize {
            for xx in 0..5isize {
                let mut acc = 0.0;
                for dy in 0..3isize {
                    for dx in 0..3isize {
                        let (sy, sx) = (yy + dy - 1, xx + dx - 1);
                        if (0..5).contains(&sy) && (0..5).contains(&sx) {
                            acc += wt.at(&[c, dy as usize, dx as usize]) * x.at(&[c, sy as usize, sx as usize]);
                        }
                    }
                }
                assert!((g.value(y).at(&[c, yy as usize, xx as usize]) - acc).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn all_ones_kernel_sums_the_neighbourhood() {
    let mut g = Graph::<f64>::new();
    let x = g.input(Tensor::full([1, 5, 5], 1.0));
    let w = g.input(Tensor::full([1, 1, 3, 3], 1.0));
    let y = g.conv2d(x, w, None, 1, 1).unwrap();
    assert_eq!(g.value(y).at(&[0, 2, 2]), 9.0);
    assert_eq!(g.value(y).at(&[0, 0, 0]), 4.0);
}

#[test]
fn square_sum_gradient_is_twice_the_input() {
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::new([2], vec![1.0, 2.0]).unwrap());
    let sq = g.mul(x, x).unwrap();
    let s = g.sum(sq).unwrap();
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(x).unwrap(), &[2.0, 4.0][..]);
}

#[test]
fn activation_values() {
    let mut g = Graph::<f64>::new();
    let x = g.input(Tensor::new([2], vec![0.0, 1.0]).unwrap());
    let sp = g.softplus(x).unwrap();
    let si = g.silu(x).unwrap();
    assert!((g.value(sp).data()[0] - std::f64::consts::LN_2).abs() < 1e-12);
    assert!((g.value(si).data()[1] - 1.0 / (1.0 + (-1.0f64).exp())).abs() < 1e-12);
    assert!((g.value(si).data()[1] - 0.7311).abs() < 1e-4);
}

#[test]
fn forward_passes_are_bit_identical() {
    let build = || {
        let mut g = Graph::<f32>::new();
        let mut r = ChaCha8Rng::seed_from_u64(8);
        let x = g.input(Tensor::uniform([4, 6, 6], -1.0, 1.0, &mut r));
        let w = g.param(Tensor::uniform([5, 4, 3, 3], -0.5, 0.5, &mut r));
        let y = g.conv2d(x, w, None, 1, 1).unwrap();
        let y = g.silu(y).unwrap();
        let gamma = g.param(Tensor::full([5], 1.0));
        let beta = g.param(Tensor::zeros([5]));
        let y = g.layer_norm(y, gamma, beta, 1e-5).unwrap();
        let loss = g.mean(y).unwrap();
        let grads = g.backward(loss).unwrap();
        (g.value(y).clone(), grads.get(w).unwrap().to_vec())
    };
    let (a, ga) = build();
    let (b, gb) = build();
    assert_eq!(a.data(), b.data());
    assert_eq!(ga, gb);
}

#[test]
fn every_op_passes_gradient_checks_over_several_draws() {
    for seed in 1..4 {
        let spec = InputSpec {
            seed,
            ..Default::default()
        };
        for op in REGISTERED_OPS {
            let r = grad_check(op, &spec, 1e-4).unwrap();
            assert!(r.passed(), "{op} seed {seed}: {:e}", r.worst());
        }
    }
}
