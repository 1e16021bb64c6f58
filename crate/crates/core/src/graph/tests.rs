use super::*;
use crate::gradcheck::finite_difference_check;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Direct nested-loop convolution over `[h, w, cin]`, zero padded.
fn naive_conv(x: &Tensor, k: &Tensor, b: &[f64], same: bool) -> Tensor {
    let (h, w, cin) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (ks, cout) = (k.shape()[0], k.shape()[3]);
    let pad = if same { ks / 2 } else { 0 };
    let (oh, ow) = if same { (h, w) } else { (h - ks + 1, w - ks + 1) };
    let mut out = Tensor::zeros(&[oh, ow, cout]);
    for oy in 0..oh {
        for ox in 0..ow {
            for co in 0..cout {
                let mut acc = b[co];
                for ky in 0..ks {
                    for kx in 0..ks {
                        let iy = oy as isize + ky as isize - pad as isize;
                        let ix = ox as isize + kx as isize - pad as isize;
                        if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                            continue;
                        }
                        for ci in 0..cin {
                            acc += x.get(&[iy as usize, ix as usize, ci]) * k.get(&[ky, kx, ci, co]);
                        }
                    }
                }
                out.set(&[oy, ox, co], acc);
            }
        }
    }
    out
}

#[test]
fn identity_kernel_same() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::ones(&[3, 3, 1]));
    let k = g.constant(Tensor::ones(&[1, 1, 1, 1]));
    let b = g.constant(Tensor::zeros(&[1]));
    let y = g.conv2d(x, k, Some(b), Padding::Same).unwrap();
    assert_eq!(g.value(y), &Tensor::ones(&[3, 3, 1]));
}

#[test]
fn sum_kernel_valid() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::ones(&[3, 3, 1]));
    let k = g.constant(Tensor::ones(&[3, 3, 1, 1]));
    let y = g.conv2d(x, k, None, Padding::Valid).unwrap();
    assert_eq!(g.shape(y), &[1, 1, 1]);
    assert_eq!(g.value(y).data(), &[9.0]);
}

#[test]
fn random_conv_matches_loops() {
    let mut r = rng(3);
    let x = Tensor::uniform(&[5, 5, 2], -1.0, 1.0, &mut r);
    let k = Tensor::uniform(&[3, 3, 2, 4], -1.0, 1.0, &mut r);
    let b = Tensor::uniform(&[4], -1.0, 1.0, &mut r);
    let mut g = Graph::new();
    let (xi, ki, bi) = (g.constant(x.clone()), g.constant(k.clone()), g.constant(b.clone()));
    let y = g.conv2d(xi, ki, Some(bi), Padding::Same).unwrap();
    let want = naive_conv(&x, &k, b.data(), true);
    for (a, e) in g.value(y).data().iter().zip(want.data()) {
        assert!((a - e).abs() <= 1e-12 * e.abs().max(1.0));
    }
}

#[test]
fn conv_errors() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::ones(&[4, 4, 2]));
    let even = g.constant(Tensor::ones(&[2, 2, 2, 1]));
    assert!(matches!(g.conv2d(x, even, None, Padding::Same), Err(Error::Config(_))));
    let wrong_cin = g.constant(Tensor::ones(&[3, 3, 3, 1]));
    match g.conv2d(x, wrong_cin, None, Padding::Same) {
        Err(Error::Dimension { detail, .. }) => assert!(detail.contains("axis 2")),
        other => panic!("{other:?}"),
    }
}

#[test]
fn activations_at_known_points() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(&[2], vec![0.0, 2.0]).unwrap());
    let s = g.sigmoid(x);
    let t = g.tanh(x);
    assert_eq!(g.value(s).data()[0], 0.5);
    assert!((g.value(s).data()[1] - 0.880797).abs() < 5e-7);
    assert_eq!(g.value(t).data()[0], 0.0);
}

#[test]
fn binary_examples() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::new(&[2], vec![1.0, 2.0]).unwrap());
    let b = g.constant(Tensor::new(&[2], vec![3.0, 4.0]).unwrap());
    let z = g.constant(Tensor::zeros(&[2]));
    let s = g.add(a, b).unwrap();
    let m = g.mul(a, z).unwrap();
    assert_eq!(g.value(s).data(), &[4.0, 6.0]);
    assert_eq!(g.value(m).data(), &[0.0, 0.0]);
    let c = g.constant(Tensor::zeros(&[3]));
    assert!(matches!(g.add(a, c), Err(Error::Dimension { .. })));
}

#[test]
fn pool_examples() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(&[2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let p = g.max_pool2(x).unwrap();
    assert_eq!(g.value(p).data(), &[4.0]);
    let c = g.constant(Tensor::full(&[4, 6, 2], 1.5));
    let p = g.max_pool2(c).unwrap();
    assert_eq!(g.value(p), &Tensor::full(&[2, 3, 2], 1.5));
    let odd = g.constant(Tensor::ones(&[3, 4, 1]));
    assert!(g.max_pool2(odd).is_err());
}

#[test]
fn pool_gradient_hits_argmax_only() {
    let mut r = rng(11);
    let x = Tensor::uniform(&[4, 4, 2], -1.0, 1.0, &mut r);
    let mut g = Graph::new();
    let xi = g.param(x.clone());
    let p = g.max_pool2(xi).unwrap();
    let l = g.sum(p);
    let grads = g.backward(l).unwrap();
    let d = grads.tensor(xi);
    for oy in 0..2 {
        for ox in 0..2 {
            for c in 0..2 {
                let cells = [(0, 0), (0, 1), (1, 0), (1, 1)].map(|(dy, dx)| (2 * oy + dy, 2 * ox + dx));
                let best = cells
                    .iter()
                    .copied()
                    .max_by(|a, b| x.get(&[a.0, a.1, c]).partial_cmp(&x.get(&[b.0, b.1, c])).unwrap())
                    .unwrap();
                for cell in cells {
                    let want = if cell == best { 1.0 } else { 0.0 };
                    assert_eq!(d.get(&[cell.0, cell.1, c]), want);
                }
            }
        }
    }
    let rep = finite_difference_check(
        |g, p| {
            let q = g.max_pool2(p[0])?;
            Ok(g.sum(q))
        },
        &[x],
        1e-6,
    )
    .unwrap();
    assert!(rep.max_rel_error < 1e-6);
}

#[test]
fn pool_tie_goes_to_first() {
    let mut g = Graph::new();
    let x = g.param(Tensor::full(&[2, 2, 1], 7.0));
    let p = g.max_pool2(x).unwrap();
    let l = g.sum(p);
    let grads = g.backward(l).unwrap();
    assert_eq!(grads.get(x).unwrap(), &[1.0, 0.0, 0.0, 0.0]);
}

#[test]
fn backward_basics() {
    let mut r = rng(5);
    let xv = Tensor::uniform(&[6], -2.0, 2.0, &mut r);
    let mut g = Graph::new();
    let x = g.param(xv.clone());
    let s = g.sum(x);
    assert!(g.backward(s).unwrap().get(x).unwrap().iter().all(|&v| v == 1.0));

    let sq = g.mul(x, x).unwrap();
    let l = g.sum(sq);
    let d = g.backward(l).unwrap();
    for (a, b) in d.get(x).unwrap().iter().zip(xv.data()) {
        assert_eq!(*a, 2.0 * b);
    }

    // Two uses of the same leaf accumulate.
    let s2 = g.sum(x);
    let both = g.add(s, s2).unwrap();
    assert!(g.backward(both).unwrap().get(x).unwrap().iter().all(|&v| v == 2.0));

    assert!(matches!(g.backward(x), Err(Error::Usage(_))));
}

#[test]
fn backward_is_deterministic() {
    let mut r = rng(9);
    let x = Tensor::uniform(&[4, 4, 3], -1.0, 1.0, &mut r);
    let k = Tensor::uniform(&[3, 3, 3, 2], -1.0, 1.0, &mut r);
    let run = || {
        let mut g = Graph::new();
        let (xi, ki) = (g.param(x.clone()), g.param(k.clone()));
        let y = g.conv2d(xi, ki, None, Padding::Same).unwrap();
        let t = g.tanh(y);
        let l = g.sum(t);
        let d = g.backward(l).unwrap();
        (d.tensor(xi), d.tensor(ki))
    };
    assert_eq!(run(), run());
}

fn check(f: impl Fn(&mut Graph, &[NodeId]) -> Result<NodeId>, params: Vec<Tensor>) {
    let rep = finite_difference_check(f, &params, 1e-6).unwrap();
    assert!(rep.max_rel_error < 1e-4, "{rep:?}");
}

#[test]
fn fd_conv_same_and_valid() {
    let mut r = rng(21);
    let x = Tensor::uniform(&[2, 5, 4, 2], -1.0, 1.0, &mut r);
    let k = Tensor::uniform(&[3, 3, 2, 3], -1.0, 1.0, &mut r);
    let b = Tensor::uniform(&[3], -1.0, 1.0, &mut r);
    let w = Tensor::uniform(&[2, 5, 4, 3], -1.0, 1.0, &mut r);
    for pad in [Padding::Same, Padding::Valid] {
        let w = w.clone();
        check(
            move |g, p| {
                let y = g.conv2d(p[0], p[1], Some(p[2]), pad)?;
                let t = g.tanh(y);
                let s = g.shape(t).to_vec();
                let wt: Vec<f64> = w.data()[..s.iter().product::<usize>()].to_vec();
                let wc = g.constant(Tensor::new(&s, wt)?);
                let m = g.mul(t, wc)?;
                Ok(g.sum(m))
            },
            vec![x.clone(), k.clone(), b.clone()],
        );
    }
}

#[test]
fn fd_unary_binary() {
    let mut r = rng(22);
    let a = Tensor::uniform(&[3, 4], -2.0, 2.0, &mut r);
    let b = Tensor::uniform(&[3, 4], -2.0, 2.0, &mut r);
    for kind in [UnaryKind::Sigmoid, UnaryKind::Tanh, UnaryKind::Relu] {
        check(
            move |g, p| {
                let u = g.unary(kind, p[0]);
                let m = g.mul(u, p[1])?;
                Ok(g.sum(m))
            },
            vec![a.clone(), b.clone()],
        );
    }
    for kind in [BinaryKind::Add, BinaryKind::Sub, BinaryKind::Mul] {
        check(
            move |g, p| {
                let y = g.binary(kind, p[0], p[1])?;
                let t = g.tanh(y);
                Ok(g.sum(t))
            },
            vec![a.clone(), b.clone()],
        );
    }
}

#[test]
fn fd_mul_gradient_is_other_operand() {
    let mut r = rng(23);
    let a = Tensor::uniform(&[5], -1.0, 1.0, &mut r);
    let b = Tensor::uniform(&[5], -1.0, 1.0, &mut r);
    let mut g = Graph::new();
    let (ai, bi) = (g.param(a.clone()), g.param(b.clone()));
    let m = g.mul(ai, bi).unwrap();
    let l = g.sum(m);
    let d = g.backward(l).unwrap();
    assert_eq!(d.get(ai).unwrap(), b.data());
    check(
        |g, p| {
            let m = g.mul(p[0], p[1])?;
            Ok(g.sum(m))
        },
        vec![a, b],
    );
}

#[test]
fn fd_batch_norm_both_modes() {
    let mut r = rng(24);
    let x = Tensor::uniform(&[3, 2, 2, 3], -1.0, 2.0, &mut r);
    let gamma = Tensor::uniform(&[3], 0.5, 1.5, &mut r);
    let beta = Tensor::uniform(&[3], -0.5, 0.5, &mut r);
    let w = Tensor::uniform(&[3, 2, 2, 3], -1.0, 1.0, &mut r);
    let w2 = w.clone();
    check(
        move |g, p| {
            let (y, _) = g.batch_norm_train(p[0], p[1], p[2], 1e-3)?;
            let wc = g.constant(w.clone());
            let m = g.mul(y, wc)?;
            let t = g.tanh(m);
            Ok(g.sum(t))
        },
        vec![x.clone(), gamma.clone(), beta.clone()],
    );
    check(
        move |g, p| {
            let y = g.batch_norm_infer(p[0], p[1], p[2], &[0.1, -0.2, 0.3], &[1.0, 0.5, 2.0], 1e-3)?;
            let wc = g.constant(w2.clone());
            let m = g.mul(y, wc)?;
            let t = g.tanh(m);
            Ok(g.sum(t))
        },
        vec![x, gamma, beta],
    );
}

#[test]
fn fd_matmul_bias_reshape_pick() {
    let mut r = rng(25);
    let a = Tensor::uniform(&[3, 4], -1.0, 1.0, &mut r);
    let b = Tensor::uniform(&[4, 2], -1.0, 1.0, &mut r);
    let c = Tensor::uniform(&[2], -1.0, 1.0, &mut r);
    check(
        |g, p| {
            let m = g.matmul(p[0], p[1])?;
            let y = g.add_bias(m, p[2])?;
            let s = g.sigmoid(y);
            let r = g.reshape(s, &[6])?;
            let q = g.pick(r, 4)?;
            let t = g.sum(r);
            g.add(q, t)
        },
        vec![a, b, c],
    );
}

#[test]
fn fd_concat_slice_stack_select() {
    let mut r = rng(26);
    let a = Tensor::uniform(&[2, 3, 2], -1.0, 1.0, &mut r);
    let b = Tensor::uniform(&[2, 3, 3], -1.0, 1.0, &mut r);
    check(
        |g, p| {
            let c = g.concat(&[p[0], p[1]], 2)?;
            let s = g.slice(c, 2, 1, 3)?;
            let a2 = g.slice(p[0], 1, 0, 2)?;
            let b2 = g.slice(p[1], 1, 1, 2)?;
            let b2 = g.slice(b2, 2, 0, 2)?;
            let st = g.stack(&[a2, b2], 1)?;
            let se = g.select(st, 1, 1)?;
            let t1 = g.tanh(s);
            let t2 = g.sigmoid(se);
            let (x, y) = (g.sum(t1), g.sum(t2));
            let xy = g.mul(x, y)?;
            Ok(g.scale(xy, 0.5))
        },
        vec![a, b],
    );
}

#[test]
fn fd_lstm_gates_and_bce() {
    let mut r = rng(27);
    let z = Tensor::uniform(&[3, 8], -2.0, 2.0, &mut r);
    let c = Tensor::uniform(&[3, 2], -1.0, 1.0, &mut r);
    let target = Tensor::uniform(&[3, 4], 0.0, 1.0, &mut r);
    check(
        move |g, p| {
            let o = g.lstm_gates(p[0], Some(p[1]), 2)?;
            let s = g.sigmoid(o);
            g.bce(s, &target, 1e-7)
        },
        vec![z, c],
    );
}

#[test]
fn concat_errors() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::ones(&[2, 3]));
    let b = g.constant(Tensor::ones(&[3, 3]));
    assert!(g.concat(&[a, b], 1).is_err());
    assert!(g.concat(&[a, b], 0).is_ok());
}

#[test]
fn bce_values() {
    let mut g = Graph::new();
    let p = g.constant(Tensor::full(&[2, 3, 2], 0.5));
    let l = g.bce(p, &Tensor::ones(&[2, 3, 2]), 1e-7).unwrap();
    assert!((g.value(l).data()[0] - std::f64::consts::LN_2).abs() < 1e-12);
    let p = g.constant(Tensor::new(&[1], vec![0.8]).unwrap());
    let l = g.bce(p, &Tensor::ones(&[1]), 1e-7).unwrap();
    assert!((g.value(l).data()[0] - 0.223144).abs() < 1e-6);
    let y = Tensor::new(&[2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
    let p = g.constant(y.clone());
    let l = g.bce(p, &y, 1e-7).unwrap();
    assert!(g.value(l).data()[0] <= 1.6e-5);
    let bad = g.constant(Tensor::ones(&[3]));
    assert!(g.bce(bad, &y, 1e-7).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn conv_matches_loops_on_random_instances(
        h in 1usize..10, w in 1usize..10, cin in 1usize..4, cout in 1usize..4,
        khalf in 0usize..3, same in any::<bool>(), seed in any::<u64>()
    ) {
        let k = 2 * khalf + 1;
        prop_assume!(same || (h >= k && w >= k));
        let mut r = rng(seed);
        let x = Tensor::uniform(&[h, w, cin], -1.0, 1.0, &mut r);
        let kt = Tensor::uniform(&[k, k, cin, cout], -1.0, 1.0, &mut r);
        let b = Tensor::uniform(&[cout], -1.0, 1.0, &mut r);
        let mut g = Graph::new();
        let (xi, ki, bi) = (g.constant(x.clone()), g.constant(kt.clone()), g.constant(b.clone()));
        let pad = if same { Padding::Same } else { Padding::Valid };
        let y = g.conv2d(xi, ki, Some(bi), pad).unwrap();
        let want = naive_conv(&x, &kt, b.data(), same);
        prop_assert_eq!(g.shape(y), want.shape());
        for (a, e) in g.value(y).data().iter().zip(want.data()) {
            prop_assert!((a - e).abs() <= 1e-12 * e.abs().max(1.0));
        }
    }
}
