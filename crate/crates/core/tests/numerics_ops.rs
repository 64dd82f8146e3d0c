use std::rc::Rc;

use proptest::prelude::*;
use vlfuse::error::Error;
use vlfuse::numerics::*;

const EPS: f64 = 1e-5;

fn rand_tensor(rng: &mut RngState, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.uniform() * 4.0 - 2.0).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

#[test]
fn matmul_identity_and_hand_case() {
    let mut g = Graph::new();
    let b = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0]]);
    let i3 = g.constant(Tensor::eye(3));
    let bv = g.constant(b.clone());
    let out = g.matmul(i3, bv).unwrap();
    assert!(g.value(out).bit_eq(&b));

    let a = g.constant(Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]));
    let ones = g.constant(Tensor::from_rows(&[&[1.0], &[1.0]]));
    let out = g.matmul(a, ones).unwrap();
    assert_eq!(g.value(out).data(), &[3.0, 7.0]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    let msg = g.matmul(a, b).unwrap_err().to_string();
    assert!(msg.contains("[2, 3]"), "{msg}");
}

#[test]
fn matmul_gradients_match_finite_differences() {
    for seed in 0..5 {
        let mut rng = RngState::new(seed);
        let b = rand_tensor(&mut rng, &[7, 3]);
        let a = rand_tensor(&mut rng, &[5, 7]);
        let w = rand_tensor(&mut rng, &[5, 3]);
        let (bb, ww) = (b.clone(), w.clone());
        let rep = finite_diff_check(
            move |g, x| {
                let bv = g.constant(bb.clone());
                let y = g.matmul(x, bv)?;
                let wv = g.constant(ww.clone());
                let p = g.mul(y, wv)?;
                g.sum(p)
            },
            &a,
            EPS,
            1e-6,
        )
        .unwrap();
        assert!(rep.pass, "dA seed {seed}: {rep:?}");
        let rep = finite_diff_check(
            move |g, x| {
                let av = g.constant(a.clone());
                let y = g.matmul(av, x)?;
                let wv = g.constant(w.clone());
                let p = g.mul(y, wv)?;
                g.sum(p)
            },
            &b,
            EPS,
            1e-6,
        )
        .unwrap();
        assert!(rep.pass, "dB seed {seed}: {rep:?}");
    }
}

#[test]
fn softmax_examples() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::from_rows(&[&[0.0, 0.0, 0.0, 0.0], &[1000.0, 0.0, 0.0, 0.0]]));
    let y = g.softmax_rows(x).unwrap();
    let y = g.value(y);
    assert_eq!(&y.data()[..4], &[0.25; 4]);
    assert_eq!(y.get(1, 0), 1.0);
    assert!(y.get(1, 1) < 1e-300 && y.get(1, 1) >= 0.0);
}

#[test]
fn softmax_gradient() {
    for seed in 0..5 {
        let mut rng = RngState::new(100 + seed);
        let x = rand_tensor(&mut rng, &[4, 6]);
        let w = rand_tensor(&mut rng, &[4, 6]);
        let rep = finite_diff_check(
            |g, x| {
                let y = g.softmax_rows(x)?;
                let wv = g.constant(w.clone());
                let p = g.mul(y, wv)?;
                g.sum(p)
            },
            &x,
            EPS,
            1e-6,
        )
        .unwrap();
        assert!(rep.pass, "seed {seed}: {rep:?}");
    }
}

#[test]
fn softmax_rejects_non_finite() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::from_rows(&[&[f64::NAN, 0.0]]));
    assert!(matches!(g.softmax_rows(x), Err(Error::NonFinite(_))));
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions_and_shift_invariant(
        row in proptest::collection::vec(-30.0f64..30.0, 1..12),
        shift in -50.0f64..50.0,
    ) {
        let mut g = Graph::new();
        let n = row.len();
        let x = g.constant(Tensor::new(vec![1, n], row.clone()).unwrap());
        let shifted = g.constant(Tensor::new(vec![1, n], row.iter().map(|v| v + shift).collect()).unwrap());
        let y = g.softmax_rows(x).unwrap();
        let ys = g.softmax_rows(shifted).unwrap();
        let s: f64 = g.value(y).data().iter().sum();
        prop_assert!((s - 1.0).abs() < 1e-9);
        prop_assert!(g.value(y).data().iter().all(|&v| v >= 0.0));
        prop_assert!(g.value(y).max_abs_diff(g.value(ys)) < 1e-9);
    }
}

fn ln_params(g: &mut Graph, d: usize) -> (Var, Var) {
    (
        g.constant(Tensor::full(&[d], 1.0)),
        g.constant(Tensor::zeros(&[d])),
    )
}

#[test]
fn layer_norm_examples() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::from_rows(&[&[3.0, 3.0, 3.0], &[-1.0, 2.0, 5.0]]));
    let (ga, be) = ln_params(&mut g, 3);
    let y = g.layer_norm(x, ga, be, 1e-8).unwrap();
    let y = g.value(y);
    assert!(y.row(0).iter().all(|&v| v == 0.0));
    let mean: f64 = y.row(1).iter().sum::<f64>() / 3.0;
    let var: f64 = y.row(1).iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 3.0;
    assert!(mean.abs() < 1e-9);
    assert!((var - 1.0).abs() < 1e-6);

    let mut g = Graph::new();
    let x = g.constant(Tensor::from_rows(&[&[1.0, -1.0]]));
    let (ga, be) = ln_params(&mut g, 2);
    let y = g.layer_norm(x, ga, be, 1e-12).unwrap();
    assert!(g.value(y).max_abs_diff(&Tensor::from_rows(&[&[1.0, -1.0]])) < 1e-9);
}

#[test]
fn layer_norm_rejects_nonpositive_eps() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[1, 2]));
    let (ga, be) = ln_params(&mut g, 2);
    assert!(g.layer_norm(x, ga, be, 0.0).is_err());
}

#[test]
fn layer_norm_gradient_all_inputs() {
    for seed in 0..5 {
        let mut rng = RngState::new(200 + seed);
        let x = rand_tensor(&mut rng, &[3, 5]);
        let gamma = rand_tensor(&mut rng, &[5]);
        let beta = rand_tensor(&mut rng, &[5]);
        let w = rand_tensor(&mut rng, &[3, 5]);
        let (gm, bt, ww) = (gamma.clone(), beta.clone(), w.clone());
        let rep = finite_diff_check(
            move |g, x| {
                let ga = g.constant(gm.clone());
                let be = g.constant(bt.clone());
                let y = g.layer_norm(x, ga, be, 1e-5)?;
                let wv = g.constant(ww.clone());
                let p = g.mul(y, wv)?;
                g.sum(p)
            },
            &x,
            EPS,
            1e-5,
        )
        .unwrap();
        assert!(rep.pass, "dx seed {seed}: {rep:?}");
        let (xx, bt, ww) = (x.clone(), beta.clone(), w.clone());
        let rep = finite_diff_check(
            move |g, gm| {
                let xv = g.constant(xx.clone());
                let be = g.constant(bt.clone());
                let y = g.layer_norm(xv, gm, be, 1e-5)?;
                let wv = g.constant(ww.clone());
                let p = g.mul(y, wv)?;
                g.sum(p)
            },
            &gamma,
            EPS,
            1e-5,
        )
        .unwrap();
        assert!(rep.pass, "dgamma seed {seed}: {rep:?}");
    }
}

#[test]
fn gelu_examples_and_monotonicity() {
    let mut g = Graph::new();
    let grid: Vec<f64> = (0..=400).map(|i| -0.7 + i as f64 * 0.05).collect();
    let x = g.constant(Tensor::new(vec![grid.len()], grid.clone()).unwrap());
    let y = g.gelu(x).unwrap();
    let y = g.value(y).data().to_vec();
    assert!(y.windows(2).all(|w| w[1] > w[0]), "monotone above the minimum");
    let z = g.constant(Tensor::new(vec![2], vec![0.0, 10.0]).unwrap());
    let zy = g.gelu(z).unwrap();
    assert_eq!(g.value(zy).data()[0], 0.0);
    assert!((g.value(zy).data()[1] - 10.0).abs() < 1e-6);
}

#[test]
fn gelu_gradient() {
    for seed in 0..5 {
        let mut rng = RngState::new(300 + seed);
        let x = rand_tensor(&mut rng, &[4, 4]);
        let w = rand_tensor(&mut rng, &[4, 4]);
        let rep = finite_diff_check(
            |g, x| {
                let y = g.gelu(x)?;
                let wv = g.constant(w.clone());
                let p = g.mul(y, wv)?;
                g.sum(p)
            },
            &x,
            EPS,
            1e-6,
        )
        .unwrap();
        assert!(rep.pass, "seed {seed}: {rep:?}");
    }
}

#[test]
fn cross_entropy_uniform_and_saturated() {
    let mut g = Graph::new();
    let logits = g.constant(Tensor::zeros(&[3, 48]));
    let l = g.cross_entropy(logits, &[0, 5, 47], &[true; 3]).unwrap();
    assert!((g.value(l).item() - 48f64.ln()).abs() < 1e-12);
    assert!((g.value(l).item() - 3.8712).abs() < 1e-4);

    let mut sat = Tensor::zeros(&[2, 48]);
    sat.data_mut()[7] = 1000.0;
    sat.data_mut()[48 + 11] = 1000.0;
    let logits = g.constant(sat);
    let l = g.cross_entropy(logits, &[7, 11], &[true, true]).unwrap();
    assert!(g.value(l).item() < 1e-6);
}

#[test]
fn cross_entropy_masked_rows_get_zero_gradient() {
    let mut rng = RngState::new(4);
    let mut g = Graph::new();
    let logits = g.variable(rand_tensor(&mut rng, &[4, 6]));
    let l = g
        .cross_entropy(logits, &[1, 2, 3, 4], &[true, false, true, false])
        .unwrap();
    let grads = g.backward(l).unwrap();
    let d = grads.get(logits).unwrap();
    assert!(d[6..12].iter().all(|&v| v == 0.0));
    assert!(d[18..24].iter().all(|&v| v == 0.0));
    assert!(d[0..6].iter().any(|&v| v != 0.0));
}

#[test]
fn cross_entropy_errors() {
    let mut g = Graph::new();
    let logits = g.constant(Tensor::zeros(&[2, 4]));
    assert!(matches!(
        g.cross_entropy(logits, &[0, 1], &[false, false]),
        Err(Error::EmptyLoss)
    ));
    assert!(g.cross_entropy(logits, &[0, 4], &[true, true]).is_err());
}

#[test]
fn cross_entropy_gradient() {
    for seed in 0..5 {
        let mut rng = RngState::new(400 + seed);
        let x = rand_tensor(&mut rng, &[5, 7]);
        let rep = finite_diff_check(
            |g, x| g.cross_entropy(x, &[0, 6, 3, 3, 1], &[true, true, false, true, true]),
            &x,
            EPS,
            1e-6,
        )
        .unwrap();
        assert!(rep.pass, "seed {seed}: {rep:?}");
    }
}

#[test]
fn attention_gradient_with_mask_and_heads() {
    let shape = AttnShape {
        batch: 2,
        tq: 3,
        tk: 4,
        heads: 2,
    };
    let mask = Rc::new(BatchMask::per_sample(vec![
        AttentionMask::from_keys(3, &[true, false, true, true]),
        AttentionMask::new(3, 4, vec![
            true, false, false, false, true, true, false, false, true, true, true, false,
        ])
        .unwrap(),
    ]));
    for seed in 0..5 {
        let mut rng = RngState::new(500 + seed);
        let q = rand_tensor(&mut rng, &[6, 4]);
        let k = rand_tensor(&mut rng, &[8, 4]);
        let v = rand_tensor(&mut rng, &[8, 4]);
        let w = rand_tensor(&mut rng, &[6, 4]);
        for which in 0..3 {
            let (q, k, v, w, m) = (q.clone(), k.clone(), v.clone(), w.clone(), mask.clone());
            let x = [&q, &k, &v][which].clone();
            let rep = finite_diff_check(
                move |g, x| {
                    let mut ins = [q.clone(), k.clone(), v.clone()].map(|t| g.constant(t));
                    ins[which] = x;
                    let y = g.attention(ins[0], ins[1], ins[2], shape, Some(m.clone()))?;
                    let wv = g.constant(w.clone());
                    let p = g.mul(y, wv)?;
                    g.sum(p)
                },
                &x,
                EPS,
                1e-6,
            )
            .unwrap();
            assert!(rep.pass, "input {which} seed {seed}: {rep:?}");
        }
    }
}

#[test]
fn attention_fully_masked_row_is_an_error() {
    let mut g = Graph::new();
    let q = g.constant(Tensor::zeros(&[2, 2]));
    let k = g.constant(Tensor::zeros(&[2, 2]));
    let mask = AttentionMask::new(2, 2, vec![true, false, false, false]).unwrap();
    let shape = AttnShape {
        batch: 1,
        tq: 2,
        tk: 2,
        heads: 1,
    };
    let err = g
        .attention(q, k, k, shape, Some(Rc::new(BatchMask::shared(mask))))
        .unwrap_err();
    assert!(matches!(err, Error::FullyMasked { row: 1 }));
}

#[test]
fn structural_ops_gradients() {
    let mut rng = RngState::new(9);
    let a = rand_tensor(&mut rng, &[4, 3]);
    let b = rand_tensor(&mut rng, &[6, 3]);
    let w = rand_tensor(&mut rng, &[10, 3]);
    let rep = finite_diff_check(
        |g, x| {
            let bv = g.constant(b.clone());
            let c = g.concat_blocks(&[x, bv], &[2, 3], 2)?;
            let s = g.slice_blocks(c, 5, 1, 3, 2)?;
            let t = g.tile(s, 2)?;
            let t = g.slice_blocks(t, 12, 0, 10, 1)?;
            let r = g.row_scale(t, &[1.0, 0.0, 2.0, -1.0, 0.5, 1.0, 1.0, 3.0, 0.0, 1.0])?;
            let wv = g.constant(w.clone());
            let p = g.mul(r, wv)?;
            g.sum(p)
        },
        &a,
        EPS,
        1e-6,
    )
    .unwrap();
    assert!(rep.pass, "{rep:?}");

    let table = rand_tensor(&mut rng, &[5, 3]);
    let w2 = rand_tensor(&mut rng, &[4, 3]);
    let rep = finite_diff_check(
        |g, x| {
            let e = g.embedding(x, &[4, 0, 4, 2])?;
            let bias = g.constant(Tensor::new(vec![3], vec![0.1, 0.2, 0.3]).unwrap());
            let e = g.add_row(e, bias)?;
            let e = g.scale(e, -1.5)?;
            let e2 = g.add(e, e)?;
            let wv = g.constant(w2.clone());
            let p = g.mul(e2, wv)?;
            g.sum(p)
        },
        &table,
        EPS,
        1e-6,
    )
    .unwrap();
    assert!(rep.pass, "{rep:?}");
}

#[test]
fn finite_diff_check_linear_sum_is_exact() {
    let x = Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.0, 4.0, 0.0, 7.0]).unwrap();
    let rep = finite_diff_check(|g, x| g.sum(x), &x, 1.0 / 1024.0, 1e-12).unwrap();
    assert_eq!(rep.max_rel_error, 0.0);
    assert!(rep.pass);
    assert_eq!(rep.checked, 6);
}

#[test]
fn finite_diff_check_rejects_zero_eps() {
    let x = Tensor::zeros(&[2]);
    assert!(matches!(
        finite_diff_check(|g, x| g.sum(x), &x, 0.0, 1e-4),
        Err(Error::InvalidArgument(_))
    ));
}

#[test]
fn backward_requires_scalar() {
    let mut g = Graph::new();
    let x = g.variable(Tensor::zeros(&[2]));
    assert!(g.backward(x).is_err());
}

#[test]
fn same_seed_same_bits() {
    let run = || {
        let mut rng = RngState::new(77);
        let a = rand_tensor(&mut rng, &[6, 5]);
        let b = rand_tensor(&mut rng, &[5, 4]);
        let mut g = Graph::new();
        let (av, bv) = (g.variable(a), g.constant(b));
        let y = g.matmul(av, bv).unwrap();
        let y = g.gelu(y).unwrap();
        let y = g.softmax_rows(y).unwrap();
        g.value(y).clone()
    };
    assert!(run().bit_eq(&run()));
}
