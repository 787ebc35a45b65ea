//! Stand-alone forward functions for single layers.
//!
//! Each one runs the same tape operation the model uses, over a throwaway parameter store,
//! so these are convenient for tests and tooling but not for hot loops.

use super::graph::{prefix_len, BatchNormParams, Graph, GruHandles, Mode};
use super::kernels;
use super::param::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Weights of one GRU direction, one matrix per gate.
#[derive(Debug, Clone)]
pub struct GruParams {
    pub hidden_size: usize,
    pub w_z: Tensor,
    pub w_r: Tensor,
    pub w_h: Tensor,
    pub u_z: Tensor,
    pub u_r: Tensor,
    pub u_h: Tensor,
    pub b_z: Tensor,
    pub b_r: Tensor,
    pub b_h: Tensor,
}

impl GruParams {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        let w = || Tensor::zeros(&[hidden, input]);
        let u = || Tensor::zeros(&[hidden, hidden]);
        let b = || Tensor::zeros(&[hidden]);
        GruParams {
            hidden_size: hidden,
            w_z: w(),
            w_r: w(),
            w_h: w(),
            u_z: u(),
            u_r: u(),
            u_h: u(),
            b_z: b(),
            b_r: b(),
            b_h: b(),
        }
    }

    pub fn input_size(&self) -> usize {
        self.w_z.cols()
    }

    fn check(&self) -> Result<()> {
        let (h, i) = (self.hidden_size, self.input_size());
        let ok = [&self.w_z, &self.w_r, &self.w_h]
            .iter()
            .all(|t| t.shape() == [h, i])
            && [&self.u_z, &self.u_r, &self.u_h]
                .iter()
                .all(|t| t.shape() == [h, h])
            && [&self.b_z, &self.b_r, &self.b_h]
                .iter()
                .all(|t| t.shape() == [h]);
        if ok {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "GRU parameters inconsistent with hidden {h}, input {i}"
            )))
        }
    }

    /// Row-stacked `(W, U, b)` in update, reset, candidate order.
    pub fn stacked(&self) -> (Tensor, Tensor, Tensor) {
        let cat = |parts: [&Tensor; 3], cols: usize| {
            let data: Vec<f64> = parts
                .iter()
                .flat_map(|t| t.data().iter().copied())
                .collect();
            let rows = data.len() / cols.max(1);
            if cols == 1 && parts[0].shape().len() == 1 {
                Tensor::vector(data)
            } else {
                Tensor::new(vec![rows, cols], data).expect("stacked shape")
            }
        };
        (
            cat([&self.w_z, &self.w_r, &self.w_h], self.input_size()),
            cat([&self.u_z, &self.u_r, &self.u_h], self.hidden_size),
            Tensor::vector(
                [&self.b_z, &self.b_r, &self.b_h]
                    .iter()
                    .flat_map(|t| t.data().iter().copied())
                    .collect(),
            ),
        )
    }

    /// Registers the stacked weights under `prefix`.
    pub fn register(&self, store: &mut ParamStore, prefix: &str) -> GruHandles {
        let (w, u, b) = self.stacked();
        GruHandles {
            w: store.add(format!("{prefix}.w"), w, true),
            u: store.add(format!("{prefix}.u"), u, true),
            b: store.add(format!("{prefix}.b"), b, true),
            hidden: self.hidden_size,
        }
    }
}

/// `y = W x + b`.
pub fn dense_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mut store = ParamStore::new();
    let wid = store.add("w", w.clone(), false);
    let bid = store.add("b", b.clone(), false);
    let mut g = Graph::new(&store, Mode::Eval);
    let xn = g.constant(x.clone());
    let (wn, bn) = (g.param(wid), g.param(bid));
    let y = g.linear(xn, wn, Some(bn))?;
    Ok(g.value(y).clone())
}

/// 3x3 "same" convolution of `[c_in, time, freq]`; `stride_time` applies to time only.
pub fn conv2d_forward(
    x: &Tensor,
    kernels: &Tensor,
    bias: &Tensor,
    stride_time: usize,
) -> Result<Tensor> {
    let mut store = ParamStore::new();
    let kid = store.add("k", kernels.clone(), false);
    let bid = store.add("b", bias.clone(), false);
    let mut g = Graph::new(&store, Mode::Eval);
    let xn = g.constant(x.clone());
    let (kn, bn) = (g.param(kid), g.param(bid));
    let y = g.conv2d(xn, kn, bn, stride_time)?;
    Ok(g.value(y).clone())
}

/// Which statistics batch norm normalizes with.
#[derive(Debug, Clone)]
pub enum BatchNormMode {
    Train,
    Eval {
        running_mean: Vec<f64>,
        running_var: Vec<f64>,
    },
}

/// Batch norm over `[channels, time, freq]` tensors with per-channel statistics.
pub fn batchnorm_forward(
    xs: &[Tensor],
    gamma: &[f64],
    beta: &[f64],
    mode: &BatchNormMode,
    eps: f64,
) -> Result<Vec<Tensor>> {
    let c = gamma.len();
    let (rm, rv, graph_mode) = match mode {
        BatchNormMode::Train => (
            vec![0.0; c],
            vec![1.0; c],
            Mode::Train {
                dropout_p: 0.0,
                seed: 0,
            },
        ),
        BatchNormMode::Eval {
            running_mean,
            running_var,
        } => (running_mean.clone(), running_var.clone(), Mode::Eval),
    };
    let mut store = ParamStore::new();
    let bn = BatchNormParams {
        gamma: store.add("gamma", Tensor::vector(gamma.to_vec()), false),
        beta: store.add("beta", Tensor::vector(beta.to_vec()), false),
        running_mean: store.add("running_mean", Tensor::vector(rm), false),
        running_var: store.add("running_var", Tensor::vector(rv), false),
        eps,
        momentum: 0.1,
    };
    let mut g = Graph::new(&store, graph_mode);
    let inputs: Vec<_> = xs.iter().map(|x| g.constant(x.clone())).collect();
    let outs = g.batch_norm(&inputs, &bn)?;
    Ok(outs.into_iter().map(|o| g.value(o).clone()).collect())
}

/// Bidirectional GRU over a sequence of vectors. Each output is `[forward ‖ backward]`;
/// masked (right-padded) positions produce zero vectors.
pub fn bigru_forward(
    x: &[Tensor],
    fwd: &GruParams,
    bwd: &GruParams,
    mask: &[bool],
) -> Result<Vec<Tensor>> {
    if mask.len() != x.len() {
        return Err(Error::InvalidArgument(format!(
            "mask length {} differs from sequence length {}",
            mask.len(),
            x.len()
        )));
    }
    fwd.check()?;
    bwd.check()?;
    let len = prefix_len(mask)?;
    if x.is_empty() {
        return Ok(Vec::new());
    }
    let input = fwd.input_size();
    if x.iter().any(|v| v.len() != input) || bwd.input_size() != input {
        return Err(Error::Shape(format!(
            "sequence vectors must have width {input}"
        )));
    }
    let mut store = ParamStore::new();
    let fh = fwd.register(&mut store, "fwd");
    let bh = bwd.register(&mut store, "bwd");
    let mut g = Graph::new(&store, Mode::Eval);
    let data: Vec<f64> = x.iter().flat_map(|v| v.data().iter().copied()).collect();
    let xn = g.constant(Tensor::matrix(x.len(), input, data)?);
    let (out, _, _) = g.bigru(xn, &fh, &bh, len)?;
    let v = g.value(out);
    Ok((0..x.len())
        .map(|t| Tensor::vector(v.row(t).to_vec()))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    LeakyRelu { alpha: f64 },
    Sigmoid,
    Tanh,
}

pub fn activation(x: &Tensor, kind: Activation) -> Tensor {
    let f = |v: f64| match kind {
        Activation::LeakyRelu { alpha } => kernels::leaky_relu(v, alpha),
        Activation::Sigmoid => kernels::sigmoid(v),
        Activation::Tanh => v.tanh(),
    };
    Tensor::new(x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect()).expect("same shape")
}

/// Softmax over unmasked positions; masked positions get exactly 0.
pub fn masked_softmax(logits: &Tensor, mask: &[bool]) -> Result<Tensor> {
    if logits.cols() != mask.len() {
        return Err(Error::Shape(format!(
            "{} logits vs mask of {}",
            logits.cols(),
            mask.len()
        )));
    }
    Tensor::new(
        logits.shape().to_vec(),
        super::graph::softmax_rows(logits, mask)?,
    )
}

/// Mean binary cross-entropy with probabilities clamped to `[eps, 1 - eps]`.
pub fn bce_loss(p: &[f64], y: &[f64], clamp_eps: f64) -> Result<f64> {
    if p.is_empty() {
        return Err(Error::InvalidArgument("bce_loss: empty batch".into()));
    }
    if p.len() != y.len() {
        return Err(Error::Shape(format!(
            "{} probabilities vs {} labels",
            p.len(),
            y.len()
        )));
    }
    Ok(super::graph::bce_value(p, y, clamp_eps))
}
