use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xmodal_kws::numerics::*;
use xmodal_kws::Error;

fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

fn full_check() -> GradCheckOptions {
    GradCheckOptions::default()
}

fn train_check() -> GradCheckOptions {
    GradCheckOptions {
        mode: Mode::Train {
            dropout_p: 0.0,
            seed: 0,
        },
        ..GradCheckOptions::default()
    }
}

/// `sum(out ⊙ R)` for a fixed random `R`, so every output coordinate matters.
fn project(g: &mut Graph<'_>, out: NodeId, seed: u64) -> Result<NodeId, Error> {
    let r = rand_tensor(g.value(out).shape(), seed);
    let r = g.constant(r);
    let prod = g.mul(out, r)?;
    Ok(g.sum(prod))
}

#[test]
fn dense_examples() {
    let eye = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let y = dense_forward(&Tensor::vector(vec![5.0, -3.0]), &eye, &Tensor::zeros(&[2])).unwrap();
    assert_eq!(y.data(), &[5.0, -3.0]);

    let w = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let y = dense_forward(&Tensor::vector(vec![1.0, 1.0]), &w, &Tensor::zeros(&[2])).unwrap();
    assert_eq!(y.data(), &[3.0, 7.0]);

    let w0 = Tensor::zeros(&[1, 3]);
    let y = dense_forward(
        &Tensor::vector(vec![9.0, -2.0, 4.0]),
        &w0,
        &Tensor::vector(vec![0.5]),
    )
    .unwrap();
    assert_eq!(y.data(), &[0.5]);

    let bad = dense_forward(&Tensor::vector(vec![1.0; 3]), &w, &Tensor::zeros(&[2]));
    assert!(matches!(bad, Err(Error::Shape(_))));
}

#[test]
fn conv_examples() {
    let x = rand_tensor(&[1, 10, 4], 1);
    let k = rand_tensor(&[2, 1, 3, 3], 2);
    let y = conv2d_forward(&x, &k, &Tensor::zeros(&[2]), 2).unwrap();
    assert_eq!(y.shape(), &[2, 5, 4]);

    let y = conv2d_forward(
        &x,
        &Tensor::zeros(&[3, 1, 3, 3]),
        &Tensor::vector(vec![0.3, -1.0, 2.0]),
        1,
    )
    .unwrap();
    for (c, plane) in y.data().chunks(40).enumerate() {
        let beta = [0.3, -1.0, 2.0][c];
        assert!(plane.iter().all(|v| *v == beta));
    }

    let v = 1.7;
    let k = rand_tensor(&[1, 1, 3, 3], 3);
    let center = k.data()[4];
    let y = conv2d_forward(
        &Tensor::new(vec![1, 1, 1], vec![v]).unwrap(),
        &k,
        &Tensor::vector(vec![0.25]),
        1,
    )
    .unwrap();
    assert!((y.data()[0] - (center * v + 0.25)).abs() < 1e-15);

    let empty = Tensor::new(vec![1, 0, 4], vec![]).unwrap();
    assert!(matches!(
        conv2d_forward(&empty, &k, &Tensor::vector(vec![0.0]), 1),
        Err(Error::InvalidArgument(_))
    ));
    assert!(conv2d_forward(
        &x,
        &rand_tensor(&[1, 1, 3, 3], 4),
        &Tensor::vector(vec![0.0]),
        3
    )
    .is_err());
}

#[test]
fn stride_two_halves_time_rounding_up() {
    let k = rand_tensor(&[1, 1, 3, 3], 5);
    for t in 1..=100 {
        let x = rand_tensor(&[1, t, 3], t as u64);
        let y = conv2d_forward(&x, &k, &Tensor::zeros(&[1]), 2).unwrap();
        assert_eq!(y.shape()[1], t.div_ceil(2), "T={t}");
        assert_eq!(conv_out_len(t, 2), t.div_ceil(2));
    }
}

#[test]
fn batchnorm_examples() {
    let constant: Vec<Tensor> = (0..3).map(|_| Tensor::filled(&[2, 3, 4], 5.0)).collect();
    let out = batchnorm_forward(
        &constant,
        &[1.0, 1.0],
        &[0.7, 0.7],
        &BatchNormMode::Train,
        1e-5,
    )
    .unwrap();
    for t in &out {
        assert!(t.data().iter().all(|v| (v - 0.7).abs() < 1e-12));
    }

    // inputs with large spread so eps barely shifts the normalized variance
    let xs: Vec<Tensor> = (0..4)
        .map(|i| {
            let t = rand_tensor(&[2, 5, 3], 10 + i);
            Tensor::new(
                t.shape().to_vec(),
                t.data().iter().map(|v| 40.0 * v + 3.0).collect(),
            )
            .unwrap()
        })
        .collect();
    let out =
        batchnorm_forward(&xs, &[1.0, 1.0], &[0.0, 0.0], &BatchNormMode::Train, 1e-5).unwrap();
    for c in 0..2 {
        let vals: Vec<f64> = out
            .iter()
            .flat_map(|t| t.data()[c * 15..(c + 1) * 15].to_vec())
            .collect();
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 1e-9, "mean {mean}");
        assert!((var - 1.0).abs() < 1e-6, "var {var}");
    }

    let out =
        batchnorm_forward(&xs, &[0.0, 0.0], &[0.4, -0.2], &BatchNormMode::Train, 1e-5).unwrap();
    for t in &out {
        assert!(t.data()[..15].iter().all(|v| *v == 0.4));
        assert!(t.data()[15..].iter().all(|v| *v == -0.2));
    }

    assert!(matches!(
        batchnorm_forward(
            &xs[..1],
            &[1.0, 1.0],
            &[0.0, 0.0],
            &BatchNormMode::Train,
            1e-5
        ),
        Err(Error::InvalidArgument(_))
    ));

    let eval = BatchNormMode::Eval {
        running_mean: vec![1.0, -1.0],
        running_var: vec![4.0, 1.0],
    };
    let out = batchnorm_forward(&xs[..1], &[2.0, 1.0], &[0.5, 0.0], &eval, 0.0).unwrap();
    let x = xs[0].data();
    assert!((out[0].data()[0] - (2.0 * (x[0] - 1.0) / 2.0 + 0.5)).abs() < 1e-12);
    assert!((out[0].data()[20] - (x[20] + 1.0)).abs() < 1e-12);
}

fn rand_gru(input: usize, hidden: usize, seed: u64) -> GruParams {
    let mut p = GruParams::zeros(input, hidden);
    let ts = [
        &mut p.w_z, &mut p.w_r, &mut p.w_h, &mut p.u_z, &mut p.u_r, &mut p.u_h, &mut p.b_z,
        &mut p.b_r, &mut p.b_h,
    ];
    for (i, t) in ts.into_iter().enumerate() {
        *t = rand_tensor(t.shape(), seed * 31 + i as u64);
    }
    p
}

#[test]
fn bigru_examples() {
    let zero = GruParams::zeros(3, 4);
    let xs: Vec<Tensor> = (0..5).map(|i| rand_tensor(&[3], i)).collect();
    let out = bigru_forward(&xs, &zero, &zero, &[true; 5]).unwrap();
    assert!(out
        .iter()
        .all(|t| t.len() == 8 && t.data().iter().all(|v| *v == 0.0)));

    let p = rand_gru(3, 4, 7);
    let out = bigru_forward(&xs[..1], &p, &p, &[true]).unwrap();
    assert_eq!(&out[0].data()[..4], &out[0].data()[4..]);

    let q = rand_gru(3, 4, 8);
    let base = bigru_forward(&xs[..3], &p, &q, &[true; 3]).unwrap();
    for pad in 1..4 {
        let mut padded = xs[..3].to_vec();
        let mut mask = vec![true; 3];
        for j in 0..pad {
            padded.push(rand_tensor(&[3], 100 + j));
            mask.push(false);
        }
        let out = bigru_forward(&padded, &p, &q, &mask).unwrap();
        assert_eq!(&out[..3], &base[..]);
        assert!(out[3..].iter().all(|t| t.data().iter().all(|v| *v == 0.0)));
    }

    assert!(matches!(
        bigru_forward(&xs[..3], &p, &q, &[true, false, true]),
        Err(Error::InvalidArgument(_))
    ));
    assert!(bigru_forward(&xs[..3], &p, &q, &[true, true]).is_err());
}

#[test]
fn activation_examples() {
    let s = activation(&Tensor::vector(vec![0.0]), Activation::Sigmoid);
    assert_eq!(s.data()[0], 0.5);
    let l = activation(
        &Tensor::vector(vec![-1.0, 2.0]),
        Activation::LeakyRelu { alpha: 0.01 },
    );
    assert_eq!(l.data(), &[-0.01, 2.0]);
    let l = activation(
        &Tensor::vector(vec![2.0]),
        Activation::LeakyRelu { alpha: 0.3 },
    );
    assert_eq!(l.data(), &[2.0]);
    let t = activation(&Tensor::vector(vec![0.0]), Activation::Tanh);
    assert_eq!(t.data()[0], 0.0);
}

#[test]
fn masked_softmax_examples() {
    let w = masked_softmax(&Tensor::vector(vec![0.3; 4]), &[true, true, false, true]).unwrap();
    for (j, v) in w.data().iter().enumerate() {
        if j == 2 {
            assert_eq!(*v, 0.0);
        } else {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }
    let w = masked_softmax(&Tensor::vector(vec![5.0, -2.0, 1.0]), &[false, true, false]).unwrap();
    assert_eq!(w.data(), &[0.0, 1.0, 0.0]);
    let w = masked_softmax(&Tensor::vector(vec![0.0, 2f64.ln()]), &[true, true]).unwrap();
    assert!((w.data()[0] - 1.0 / 3.0).abs() < 1e-15);
    assert!((w.data()[1] - 2.0 / 3.0).abs() < 1e-15);
    assert!(matches!(
        masked_softmax(&Tensor::vector(vec![1.0, 2.0]), &[false, false]),
        Err(Error::InvalidArgument(_))
    ));
}

proptest! {
    #[test]
    fn masked_softmax_normalizes_and_ignores_shifts(
        logits in prop::collection::vec(-30.0f64..30.0, 1..20),
        mask_bits in prop::collection::vec(any::<bool>(), 20),
        shift in -50.0f64..50.0,
    ) {
        let n = logits.len();
        let mut mask = mask_bits[..n].to_vec();
        mask[0] = true;
        let w = masked_softmax(&Tensor::vector(logits.clone()), &mask).unwrap();
        let total: f64 = w.data().iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
        for (v, m) in w.data().iter().zip(&mask) {
            if *m { prop_assert!(*v >= 0.0) } else { prop_assert_eq!(*v, 0.0) }
        }
        let shifted: Vec<f64> = logits.iter().map(|l| l + shift).collect();
        let w2 = masked_softmax(&Tensor::vector(shifted), &mask).unwrap();
        for (a, b) in w.data().iter().zip(w2.data()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn bce_examples() {
    let eps = BCE_CLAMP_EPS;
    assert!((bce_loss(&[0.5], &[1.0], eps).unwrap() - 2f64.ln()).abs() < 1e-15);
    assert!((bce_loss(&[0.5, 0.5], &[0.0, 1.0], eps).unwrap() - 2f64.ln()).abs() < 1e-15);
    let perfect = bce_loss(&[1.0, 0.0, 1.0], &[1.0, 0.0, 1.0], eps).unwrap();
    assert!(perfect <= -(1.0 - eps).ln() + 1e-18);
    assert!(matches!(
        bce_loss(&[], &[], eps),
        Err(Error::InvalidArgument(_))
    ));
}

#[test]
fn backward_examples() {
    let store = ParamStore::new();
    let mut g = Graph::new(&store, Mode::Eval);
    let x = g.variable(Tensor::vector(vec![1.0, -2.0, 3.5]));
    let s = g.sum(x);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.node(x).unwrap().data(), &[1.0, 1.0, 1.0]);

    let mut store = ParamStore::new();
    let wid = store.add("w", Tensor::zeros(&[1, 3]), true);
    let xs = [0.4, -1.2, 2.0];
    let mut g = Graph::new(&store, Mode::Eval);
    let x = g.constant(Tensor::vector(xs.to_vec()));
    let w = g.param(wid);
    let z = g.linear(x, w, None).unwrap();
    let y = g.sigmoid(z);
    let grads = g.backward(y).unwrap();
    for (gw, xv) in grads.param(wid).unwrap().data().iter().zip(xs) {
        assert!((gw - 0.25 * xv).abs() < 1e-15);
    }

    // non-scalar
    assert!(matches!(g.backward(x), Err(Error::InvalidArgument(_))));

    // accumulation without reset
    store.accumulate(&grads);
    store.accumulate(&grads);
    for (gw, xv) in store.get(wid).grad.data().iter().zip(xs) {
        assert!((gw - 0.5 * xv).abs() < 1e-15);
    }
    store.zero_grad();
    assert!(store.get(wid).grad.data().iter().all(|v| *v == 0.0));
}

#[test]
fn gradcheck_dense() {
    let mut store = ParamStore::new();
    let w = store.add("w", xavier_init(6, 4, 1).unwrap(), true);
    let b = store.add("b", rand_tensor(&[4], 2), true);
    let x = rand_tensor(&[3, 6], 3);
    let report = grad_check(
        &mut store,
        |g| {
            let xn = g.constant(x.clone());
            let (wn, bn) = (g.param(w), g.param(b));
            let y = g.linear(xn, wn, Some(bn))?;
            project(g, y, 4)
        },
        &full_check(),
    )
    .unwrap();
    assert!(report.passed(), "{report:?}");
    assert_eq!(report.params.len(), 2);
}

#[test]
fn gradcheck_conv2d_both_strides() {
    for stride in [1, 2] {
        let mut store = ParamStore::new();
        let k = store.add("k", rand_tensor(&[3, 2, 3, 3], 5), true);
        let b = store.add("b", rand_tensor(&[3], 6), true);
        let xin = store.add("x", rand_tensor(&[2, 5, 4], 7), true);
        let report = grad_check(
            &mut store,
            |g| {
                let (xn, kn, bn) = (g.param(xin), g.param(k), g.param(b));
                let y = g.conv2d(xn, kn, bn, stride)?;
                project(g, y, 8)
            },
            &full_check(),
        )
        .unwrap();
        assert!(report.passed(), "stride {stride}: {report:?}");
    }
}

#[test]
fn gradcheck_batchnorm_train_and_eval() {
    for opts in [train_check(), full_check()] {
        let mut store = ParamStore::new();
        let bn = BatchNormParams {
            gamma: store.add("gamma", rand_tensor(&[2], 9), true),
            beta: store.add("beta", rand_tensor(&[2], 10), true),
            running_mean: store.add("rm", rand_tensor(&[2], 11), false),
            running_var: store.add("rv", Tensor::vector(vec![0.5, 2.0]), false),
            eps: 1e-5,
            momentum: 0.1,
        };
        let a = store.add("a", rand_tensor(&[2, 3, 2], 12), true);
        let c = store.add("c", rand_tensor(&[2, 4, 2], 13), true);
        let report = grad_check(
            &mut store,
            |g| {
                let (an, cn) = (g.param(a), g.param(c));
                let outs = g.batch_norm(&[an, cn], &bn)?;
                let l0 = project(g, outs[0], 14)?;
                let l1 = project(g, outs[1], 15)?;
                g.add(l0, l1)
            },
            &opts,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
        // running statistics are frozen and stay out of the report
        assert!(report
            .params
            .iter()
            .all(|p| p.name != "rm" && p.name != "rv"));
    }
}

#[test]
fn gradcheck_bigru_length_four() {
    let mut store = ParamStore::new();
    let fwd = rand_gru(3, 5, 20).register(&mut store, "fwd");
    let bwd = rand_gru(3, 5, 21).register(&mut store, "bwd");
    let x = store.add("x", rand_tensor(&[6, 3], 22), true);
    let report = grad_check(
        &mut store,
        |g| {
            let xn = g.param(x);
            let (y, _, _) = g.bigru(xn, &fwd, &bwd, 4)?;
            project(g, y, 23)
        },
        &full_check(),
    )
    .unwrap();
    assert!(report.passed(), "{report:?}");
    assert_eq!(report.params.len(), 7);
}

#[test]
fn gradcheck_activations_softmax_and_bce() {
    let mut store = ParamStore::new();
    let x = store.add("x", rand_tensor(&[3, 5], 30), true);
    let mask = [true, true, false, true, false];
    let report = grad_check(
        &mut store,
        |g| {
            let xn = g.param(x);
            let a = g.leaky_relu(xn, LEAKY_RELU_ALPHA);
            let t = g.tanh(a);
            let s = g.sigmoid(t);
            let sm = g.masked_softmax(s, &mask)?;
            let l1 = project(g, sm, 31)?;
            let direct = g.masked_softmax(xn, &mask)?;
            let l2 = project(g, direct, 32)?;
            g.add(l1, l2)
        },
        &full_check(),
    )
    .unwrap();
    assert!(report.passed(), "{report:?}");

    let mut store = ParamStore::new();
    let p = store.add("p", Tensor::vector(vec![0.2, 0.7, 0.55, 0.9]), true);
    let labels = [0.0, 1.0, 0.0, 1.0];
    let report = grad_check(
        &mut store,
        |g| {
            let pn = g.param(p);
            g.bce(pn, &labels, BCE_CLAMP_EPS)
        },
        &full_check(),
    )
    .unwrap();
    assert!(report.passed(), "{report:?}");
}

#[test]
fn gradcheck_structural_ops() {
    let mut store = ParamStore::new();
    let a = store.add("a", rand_tensor(&[2, 3, 4], 40), true);
    let m = store.add("m", rand_tensor(&[5, 3], 41), true);
    let report = grad_check(
        &mut store,
        |g| {
            let an = g.param(a);
            let frames = g.channels_to_frames(an)?;
            let mn = g.param(m);
            let prod = g.matmul(mn, frames, false, false)?; // [5, 8]
            let t = g.matmul(prod, prod, true, false)?; // [8, 8]
            let row = g.select_row(t, 2)?;
            let padded = g.pad_rows(frames, 6)?;
            let scaled = g.scale(row, 0.5);
            let cat = g.concat(&[scaled, scaled])?;
            let l1 = project(g, cat, 42)?;
            let l2 = project(g, padded, 43)?;
            let sl = g.slice(prod, 3, vec![4])?;
            let l3 = project(g, sl, 44)?;
            let s = g.add(l1, l2)?;
            g.add(s, l3)
        },
        &full_check(),
    )
    .unwrap();
    assert!(report.passed(), "{report:?}");
}

#[test]
fn dropout_is_inverted_and_eval_identity() {
    let store = ParamStore::new();
    let mut g = Graph::new(&store, Mode::Eval);
    let x = g.constant(Tensor::filled(&[1000], 1.0));
    assert_eq!(g.dropout(x), x);

    let mut g = Graph::new(
        &store,
        Mode::Train {
            dropout_p: 0.2,
            seed: 3,
        },
    );
    let x = g.constant(Tensor::filled(&[10000], 1.0));
    let y = g.dropout(x);
    let v = g.value(y).data();
    assert!(v.iter().all(|e| *e == 0.0 || (*e - 1.25).abs() < 1e-15));
    let kept = v.iter().filter(|e| **e > 0.0).count() as f64 / 10000.0;
    assert!((kept - 0.8).abs() < 0.03);
}

#[test]
fn frozen_parameter_is_not_reported() {
    let mut store = ParamStore::new();
    let w = store.add("w", rand_tensor(&[2, 2], 50), true);
    let f = store.add("frozen", rand_tensor(&[2, 2], 51), false);
    let report = grad_check(
        &mut store,
        |g| {
            let (wn, fnode) = (g.param(w), g.param(f));
            let y = g.matmul(wn, fnode, false, false)?;
            project(g, y, 52)
        },
        &full_check(),
    )
    .unwrap();
    assert_eq!(report.params.len(), 1);
    assert_eq!(report.params[0].name, "w");
}
