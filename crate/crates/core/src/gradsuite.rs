//! The standard finite-difference suite: each layer on a small random instance, then the full
//! scorer on a 4-frame, 3-character pair.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::embeddings::EmbeddingLayerTag;
use crate::error::Result;
use crate::model::{KwsModel, ModelConfig, PairInput};
use crate::numerics::{
    derive_seed, grad_check, BatchNormParams, GradCheckOptions, GradCheckReport, Graph, GruParams,
    Mode, NodeId, ParamStore, Tensor, BCE_CLAMP_EPS, LEAKY_RELU_ALPHA,
};

/// Coordinates sampled per parameter in the full-model check.
pub const MODEL_COORDS: usize = 16;

#[derive(Debug, Clone)]
pub struct SuiteEntry {
    pub name: &'static str,
    pub report: GradCheckReport,
}

fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .expect("shape matches data")
}

/// `sum(out ⊙ R)` for a fixed random `R`.
fn project(g: &mut Graph<'_>, out: NodeId, seed: u64) -> Result<NodeId> {
    let r = g.constant(rand_tensor(g.value(out).shape(), seed));
    let prod = g.mul(out, r)?;
    Ok(g.sum(prod))
}

fn rand_gru(input: usize, hidden: usize, seed: u64) -> GruParams {
    let mut p = GruParams::zeros(input, hidden);
    let ts = [
        &mut p.w_z, &mut p.w_r, &mut p.w_h, &mut p.u_z, &mut p.u_r, &mut p.u_h, &mut p.b_z,
        &mut p.b_r, &mut p.b_h,
    ];
    for (i, t) in ts.into_iter().enumerate() {
        *t = rand_tensor(t.shape(), seed.wrapping_add(i as u64));
    }
    p
}

const TRAIN: Mode = Mode::Train {
    dropout_p: 0.0,
    seed: 0,
};

fn check<F>(store: &mut ParamStore, mode: Mode, forward: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_>) -> Result<NodeId>,
{
    grad_check(
        store,
        forward,
        &GradCheckOptions {
            mode,
            ..GradCheckOptions::default()
        },
    )
}

fn dense(s: u64) -> Result<GradCheckReport> {
    let mut store = ParamStore::new();
    let w = store.add("w", rand_tensor(&[4, 6], s), true);
    let b = store.add("b", rand_tensor(&[4], s + 1), true);
    let x = store.add("x", rand_tensor(&[3, 6], s + 2), true);
    check(&mut store, Mode::Eval, |g| {
        let (xn, wn, bn) = (g.param(x), g.param(w), g.param(b));
        let y = g.linear(xn, wn, Some(bn))?;
        project(g, y, s + 3)
    })
}

fn conv(s: u64, stride: usize) -> Result<GradCheckReport> {
    let mut store = ParamStore::new();
    let k = store.add("kernel", rand_tensor(&[3, 2, 3, 3], s), true);
    let b = store.add("bias", rand_tensor(&[3], s + 1), true);
    let x = store.add("x", rand_tensor(&[2, 5, 4], s + 2), true);
    check(&mut store, Mode::Eval, |g| {
        let (xn, kn, bn) = (g.param(x), g.param(k), g.param(b));
        let y = g.conv2d(xn, kn, bn, stride)?;
        project(g, y, s + 3)
    })
}

fn batchnorm(s: u64, mode: Mode) -> Result<GradCheckReport> {
    let mut store = ParamStore::new();
    let bn = BatchNormParams {
        gamma: store.add("gamma", rand_tensor(&[2], s), true),
        beta: store.add("beta", rand_tensor(&[2], s + 1), true),
        running_mean: store.add("running_mean", rand_tensor(&[2], s + 2), false),
        running_var: store.add("running_var", Tensor::vector(vec![0.5, 2.0]), false),
        eps: 1e-5,
        momentum: 0.1,
    };
    let a = store.add("a", rand_tensor(&[2, 3, 2], s + 3), true);
    let c = store.add("c", rand_tensor(&[2, 4, 2], s + 4), true);
    check(&mut store, mode, |g| {
        let (an, cn) = (g.param(a), g.param(c));
        let outs = g.batch_norm(&[an, cn], &bn)?;
        let l0 = project(g, outs[0], s + 5)?;
        let l1 = project(g, outs[1], s + 6)?;
        g.add(l0, l1)
    })
}

fn bigru(s: u64) -> Result<GradCheckReport> {
    let mut store = ParamStore::new();
    let fwd = rand_gru(3, 5, s).register(&mut store, "fwd");
    let bwd = rand_gru(3, 5, s + 10).register(&mut store, "bwd");
    let x = store.add("x", rand_tensor(&[6, 3], s + 20), true);
    check(&mut store, Mode::Eval, |g| {
        let xn = g.param(x);
        let (y, _, _) = g.bigru(xn, &fwd, &bwd, 4)?;
        project(g, y, s + 21)
    })
}

fn softmax(s: u64) -> Result<GradCheckReport> {
    let mut store = ParamStore::new();
    let x = store.add("x", rand_tensor(&[3, 5], s), true);
    let mask = [true, true, false, true, false];
    check(&mut store, Mode::Eval, |g| {
        let xn = g.param(x);
        let a = g.leaky_relu(xn, LEAKY_RELU_ALPHA);
        let t = g.tanh(a);
        let sm = g.masked_softmax(t, &mask)?;
        project(g, sm, s + 1)
    })
}

fn bce(_s: u64) -> Result<GradCheckReport> {
    let mut store = ParamStore::new();
    let p = store.add("p", Tensor::vector(vec![0.2, 0.7, 0.55, 0.9]), true);
    let labels = [0.0, 1.0, 0.0, 1.0];
    check(&mut store, Mode::Eval, |g| {
        let pn = g.param(p);
        g.bce(pn, &labels, BCE_CLAMP_EPS)
    })
}

/// Eval-mode score of one 4-frame mel against a 3-character E1 embedding. Batch-norm running
/// statistics get a narrow random spread so no pre-activation sits near the leaky-ReLU kink
/// at initialization scale.
fn score_pair(s: u64) -> Result<GradCheckReport> {
    let mut model = KwsModel::new(ModelConfig::for_tag(EmbeddingLayerTag::E1), s)?;
    let cfg = model.config().clone();
    for (bn, c) in [
        ("audio.bn1", cfg.conv1_channels),
        ("audio.bn2", cfg.conv2_channels),
    ] {
        let store = model.store_mut();
        let mean = store
            .find(&format!("{bn}.running_mean"))
            .expect("bn mean registered");
        let var = store
            .find(&format!("{bn}.running_var"))
            .expect("bn var registered");
        store.get_mut(mean).value = rand_tensor(&[c], s + 1);
        store.get_mut(var).value = Tensor::filled(&[c], 0.01);
    }
    let mel = rand_tensor(&[4, cfg.n_mels], s + 2);
    let text = rand_tensor(&[3, cfg.text_input_width], s + 3);
    let frozen = model.clone();
    let opts = GradCheckOptions {
        max_coords: Some(MODEL_COORDS),
        seed: s,
        ..GradCheckOptions::default()
    };
    grad_check(
        model.store_mut(),
        |g| {
            let p = frozen.forward_batch(
                g,
                &[PairInput {
                    mel: &mel,
                    text: &text,
                }],
            )?;
            Ok(g.sum(p))
        },
        &opts,
    )
}

/// Runs every check. Each entry reports its own maximum relative error.
pub fn gradient_suite(seed: u64) -> Result<Vec<SuiteEntry>> {
    let s = |i: u64| derive_seed(seed, &[i]);
    Ok(vec![
        SuiteEntry {
            name: "dense",
            report: dense(s(1))?,
        },
        SuiteEntry {
            name: "conv2d stride 1",
            report: conv(s(2), 1)?,
        },
        SuiteEntry {
            name: "conv2d stride 2",
            report: conv(s(3), 2)?,
        },
        SuiteEntry {
            name: "batchnorm train",
            report: batchnorm(s(4), TRAIN)?,
        },
        SuiteEntry {
            name: "batchnorm eval",
            report: batchnorm(s(5), Mode::Eval)?,
        },
        SuiteEntry {
            name: "bigru",
            report: bigru(s(6))?,
        },
        SuiteEntry {
            name: "masked_softmax",
            report: softmax(s(7))?,
        },
        SuiteEntry {
            name: "bce_loss",
            report: bce(s(8))?,
        },
        SuiteEntry {
            name: "score_pair",
            report: score_pair(s(9))?,
        },
    ])
}
