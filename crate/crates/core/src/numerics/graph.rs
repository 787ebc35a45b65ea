//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation of one forward pass together with the values it
//! produced. [`Graph::backward`] replays the tape in reverse and returns the gradients of the
//! trainable parameters that were read. Operations are coarse (whole layers) so the tape for
//! a full model stays a few hundred nodes long.

use std::borrow::Cow;
use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::kernels::{self, ConvGeom, GruCache, GruGeom, GruGrads};
use super::param::{Gradients, ParamId, ParamStore};
use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

/// Index of a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

/// Forward-pass behaviour of dropout and batch normalization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Mode {
    /// Dropout with probability `dropout_p`, batch statistics in batch norm.
    Train { dropout_p: f64, seed: u64 },
    /// No dropout, running statistics in batch norm.
    Eval,
}

impl Mode {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train { .. })
    }
}

/// Parameter handles of one batch-norm layer.
#[derive(Debug, Clone, Copy)]
pub struct BatchNormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub eps: f64,
    pub momentum: f64,
}

/// Parameter handles of one GRU direction (stacked update/reset/candidate blocks).
#[derive(Debug, Clone, Copy)]
pub struct GruHandles {
    pub w: ParamId,
    pub u: ParamId,
    pub b: ParamId,
    pub hidden: usize,
}

#[derive(Debug)]
enum Op {
    Constant,
    Variable,
    Param(ParamId),
    Linear {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
    },
    MatMul {
        a: NodeId,
        b: NodeId,
        trans_a: bool,
        trans_b: bool,
    },
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Sum(NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    LeakyRelu(NodeId, f64),
    Dropout {
        x: NodeId,
        mask: Vec<f64>,
    },
    Conv2d {
        x: NodeId,
        kernel: NodeId,
        bias: NodeId,
        geom: ConvGeom,
    },
    BatchNorm {
        inputs: Vec<NodeId>,
        gamma: NodeId,
        beta: NodeId,
        channels: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    Slice {
        src: NodeId,
        offset: usize,
    },
    Gru {
        x: NodeId,
        w: NodeId,
        u: NodeId,
        b: NodeId,
        geom: GruGeom,
        cache: GruCache,
    },
    Concat(Vec<NodeId>),
    MaskedSoftmax {
        logits: NodeId,
    },
    Bce {
        p: NodeId,
        labels: Vec<f64>,
        eps: f64,
    },
    ChannelsToFrames {
        x: NodeId,
        channels: usize,
        steps: usize,
        freq: usize,
    },
    SelectRow {
        src: NodeId,
        row: usize,
    },
    PadRows {
        src: NodeId,
    },
}

#[derive(Debug)]
struct Node<'s> {
    value: Cow<'s, Tensor>,
    op: Op,
    needs_grad: bool,
}

/// One forward computation over a borrowed parameter store.
pub struct Graph<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node<'s>>,
    param_nodes: HashMap<ParamId, NodeId>,
    mode: Mode,
    rng: ChaCha8Rng,
    buffer_updates: Vec<(ParamId, Tensor)>,
}

fn shape_err(what: &str, detail: String) -> Error {
    Error::Shape(format!("{what}: {detail}"))
}

/// Length of the unmasked prefix; masked positions must form a suffix.
pub fn prefix_len(mask: &[bool]) -> Result<usize> {
    let len = mask.iter().take_while(|m| **m).count();
    if mask[len..].iter().any(|m| *m) {
        return Err(Error::InvalidArgument(
            "mask has an interior gap; only right padding is supported".into(),
        ));
    }
    Ok(len)
}

impl<'s> Graph<'s> {
    pub fn new(store: &'s ParamStore, mode: Mode) -> Self {
        let seed = match mode {
            Mode::Train { seed, .. } => seed,
            Mode::Eval => 0,
        };
        Graph {
            store,
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
            mode,
            rng: ChaCha8Rng::seed_from_u64(seed),
            buffer_updates: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Running-statistic updates recorded by train-mode batch norm, to be applied by the
    /// owner of the store after the step.
    pub fn take_buffer_updates(&mut self) -> Vec<(ParamId, Tensor)> {
        std::mem::take(&mut self.buffer_updates)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[NodeId]) -> NodeId {
        self.push_cow(Cow::Owned(value), op, inputs)
    }

    fn push_cow(&mut self, value: Cow<'s, Tensor>, op: Op, inputs: &[NodeId]) -> NodeId {
        let needs_grad = match op {
            Op::Constant => false,
            Op::Variable => true,
            Op::Param(id) => self.store.get(id).requires_grad,
            _ => inputs.iter().any(|i| self.nodes[i.0].needs_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// A leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Constant, &[])
    }

    /// A leaf whose gradient is reported by [`Gradients::node`].
    pub fn variable(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Variable, &[])
    }

    /// The node for a stored parameter; repeated reads share one node.
    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(n) = self.param_nodes.get(&id) {
            return *n;
        }
        let store: &'s ParamStore = self.store;
        let n = self.push_cow(Cow::Borrowed(store.value(id)), Op::Param(id), &[]);
        self.param_nodes.insert(id, n);
        n
    }

    /// `y = x Wᵀ + b` applied to each row of `x` (`[rows, in]` or a single `[in]` vector).
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let (xv, wv) = (self.value(x), self.value(w));
        if wv.shape().len() != 2 || xv.cols() != wv.shape()[1] {
            return Err(shape_err(
                "linear",
                format!("input {:?} vs weight {:?}", xv.shape(), wv.shape()),
            ));
        }
        let (rows, din, dout) = (xv.rows(), wv.shape()[1], wv.shape()[0]);
        let mut out = vec![0.0; rows * dout];
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.len() != dout {
                return Err(shape_err(
                    "linear",
                    format!("bias {:?} vs {dout} outputs", bv.shape()),
                ));
            }
            for r in out.chunks_mut(dout) {
                r.copy_from_slice(bv.data());
            }
        }
        gemm(
            rows,
            din,
            dout,
            1.0,
            xv.data(),
            false,
            wv.data(),
            true,
            1.0,
            &mut out,
        );
        let shape = if xv.shape().len() == 1 {
            vec![dout]
        } else {
            vec![rows, dout]
        };
        let value = Tensor::new(shape, out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(value, Op::Linear { x, w, b }, &inputs))
    }

    /// Matrix product of two 2-D nodes with optional transposition of either operand.
    pub fn matmul(&mut self, a: NodeId, b: NodeId, trans_a: bool, trans_b: bool) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape().len() != 2 || bv.shape().len() != 2 {
            return Err(shape_err("matmul", "operands must be 2-D".into()));
        }
        let (m, k) = if trans_a {
            (av.shape()[1], av.shape()[0])
        } else {
            (av.shape()[0], av.shape()[1])
        };
        let (k2, n) = if trans_b {
            (bv.shape()[1], bv.shape()[0])
        } else {
            (bv.shape()[0], bv.shape()[1])
        };
        if k != k2 {
            return Err(shape_err(
                "matmul",
                format!("inner dimensions {k} and {k2} differ"),
            ));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            1.0,
            av.data(),
            trans_a,
            bv.data(),
            trans_b,
            0.0,
            &mut out,
        );
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(
            value,
            Op::MatMul {
                a,
                b,
                trans_a,
                trans_b,
            },
            &[a, b],
        ))
    }

    fn same_shape(&self, a: NodeId, b: NodeId, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(shape_err(
                what,
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        Ok(())
    }

    fn map(&self, x: NodeId, f: impl Fn(f64) -> f64) -> Tensor {
        let v = self.value(x);
        Tensor::new(v.shape().to_vec(), v.data().iter().map(|&e| f(e)).collect())
            .expect("same shape")
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "add")?;
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "mul")?;
        let bv = self.value(b).data().to_vec();
        let mut v = self.value(a).clone();
        v.data_mut().iter_mut().zip(&bv).for_each(|(x, y)| *x *= y);
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let v = self.map(x, |e| e * c);
        self.push(v, Op::Scale(x, c), &[x])
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let v = self.map(x, kernels::sigmoid);
        self.push(v, Op::Sigmoid(x), &[x])
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let v = self.map(x, f64::tanh);
        self.push(v, Op::Tanh(x), &[x])
    }

    pub fn leaky_relu(&mut self, x: NodeId, alpha: f64) -> NodeId {
        let v = self.map(x, |e| kernels::leaky_relu(e, alpha));
        self.push(v, Op::LeakyRelu(x, alpha), &[x])
    }

    /// Inverted dropout in train mode; the identity (same node) otherwise.
    pub fn dropout(&mut self, x: NodeId) -> NodeId {
        let p = match self.mode {
            Mode::Train { dropout_p, .. } if dropout_p > 0.0 => dropout_p,
            _ => return x,
        };
        let keep = 1.0 / (1.0 - p);
        let n = self.value(x).len();
        let mask: Vec<f64> = (0..n)
            .map(|_| if self.rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let mut v = self.value(x).clone();
        v.data_mut()
            .iter_mut()
            .zip(&mask)
            .for_each(|(e, m)| *e *= m);
        self.push(v, Op::Dropout { x, mask }, &[x])
    }

    /// 3x3 "same" convolution of a `[c_in, time, freq]` node; `stride` applies to time only.
    pub fn conv2d(
        &mut self,
        x: NodeId,
        kernel: NodeId,
        bias: NodeId,
        stride: usize,
    ) -> Result<NodeId> {
        let (xv, kv, bv) = (self.value(x), self.value(kernel), self.value(bias));
        if xv.is_empty() {
            return Err(Error::InvalidArgument("conv2d: empty input".into()));
        }
        if !(1..=2).contains(&stride) {
            return Err(Error::InvalidArgument(format!(
                "conv2d: stride {stride} not in {{1, 2}}"
            )));
        }
        let (xs, ks) = (xv.shape(), kv.shape());
        if xs.len() != 3 || ks.len() != 4 || ks[2] != 3 || ks[3] != 3 || ks[1] != xs[0] {
            return Err(shape_err(
                "conv2d",
                format!("input {xs:?} vs kernel {ks:?}"),
            ));
        }
        if bv.len() != ks[0] {
            return Err(shape_err(
                "conv2d",
                format!("bias {:?} vs {} filters", bv.shape(), ks[0]),
            ));
        }
        let geom = ConvGeom {
            c_in: xs[0],
            c_out: ks[0],
            t_in: xs[1],
            freq: xs[2],
            stride,
        };
        let out = kernels::conv2d_forward(&geom, xv.data(), kv.data(), bv.data());
        let value = Tensor::new(vec![geom.c_out, geom.t_out(), geom.freq], out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                x,
                kernel,
                bias,
                geom,
            },
            &[x, kernel, bias],
        ))
    }

    /// Batch normalization over a batch of `[channels, time, freq]` nodes with per-channel
    /// statistics pooled over batch, time and frequency. Returns one output per input.
    pub fn batch_norm(&mut self, inputs: &[NodeId], bn: &BatchNormParams) -> Result<Vec<NodeId>> {
        if inputs.is_empty() {
            return Err(Error::InvalidArgument("batch_norm: empty batch".into()));
        }
        let batch_stats = self.mode.is_train();
        if batch_stats && inputs.len() < 2 {
            return Err(Error::InvalidArgument(
                "batch_norm: train mode needs a batch of at least 2".into(),
            ));
        }
        let channels = self.store.value(bn.gamma).len();
        for &i in inputs {
            let s = self.value(i).shape();
            if s.len() != 3 || s[0] != channels {
                return Err(shape_err(
                    "batch_norm",
                    format!("input {s:?} vs {channels} channels"),
                ));
            }
        }
        let blocks: Vec<(usize, usize)> = inputs
            .iter()
            .map(|&i| {
                let s = self.value(i).shape();
                (s[1] * s[2], self.value(i).len())
            })
            .collect();

        let (mean, var) = if batch_stats {
            let mut sum = vec![0.0; channels];
            let mut count = 0usize;
            for (&i, &(plane, _)) in inputs.iter().zip(&blocks) {
                for (c, ch) in self.value(i).data().chunks(plane).enumerate() {
                    sum[c] += ch.iter().sum::<f64>();
                }
                count += plane;
            }
            let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
            let mut sq = vec![0.0; channels];
            for (&i, &(plane, _)) in inputs.iter().zip(&blocks) {
                for (c, ch) in self.value(i).data().chunks(plane).enumerate() {
                    sq[c] += ch.iter().map(|v| (v - mean[c]).powi(2)).sum::<f64>();
                }
            }
            let var: Vec<f64> = sq.iter().map(|s| s / count as f64).collect();
            let n = count as f64;
            let unbiased = if count > 1 { n / (n - 1.0) } else { 1.0 };
            let m = bn.momentum;
            let rm = self.store.value(bn.running_mean);
            let rv = self.store.value(bn.running_var);
            let new_mean: Vec<f64> = rm
                .data()
                .iter()
                .zip(&mean)
                .map(|(r, b)| (1.0 - m) * r + m * b)
                .collect();
            let new_var: Vec<f64> = rv
                .data()
                .iter()
                .zip(&var)
                .map(|(r, b)| (1.0 - m) * r + m * b * unbiased)
                .collect();
            self.buffer_updates
                .push((bn.running_mean, Tensor::vector(new_mean)));
            self.buffer_updates
                .push((bn.running_var, Tensor::vector(new_var)));
            (mean, var)
        } else {
            (
                self.store.value(bn.running_mean).data().to_vec(),
                self.store.value(bn.running_var).data().to_vec(),
            )
        };

        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + bn.eps).sqrt()).collect();
        let gamma = self.param(bn.gamma);
        let beta = self.param(bn.beta);
        let (gv, bv) = (
            self.value(gamma).data().to_vec(),
            self.value(beta).data().to_vec(),
        );
        let total: usize = blocks.iter().map(|b| b.1).sum();
        let mut xhat = Vec::with_capacity(total);
        let mut out = Vec::with_capacity(total);
        for (&i, &(plane, _)) in inputs.iter().zip(&blocks) {
            for (c, ch) in self.value(i).data().chunks(plane).enumerate() {
                for v in ch {
                    let xh = (v - mean[c]) * inv_std[c];
                    xhat.push(xh);
                    out.push(gv[c] * xh + bv[c]);
                }
            }
        }
        let mut deps = inputs.to_vec();
        deps.push(gamma);
        deps.push(beta);
        let joined = self.push(
            Tensor::vector(out),
            Op::BatchNorm {
                inputs: inputs.to_vec(),
                gamma,
                beta,
                channels,
                xhat,
                inv_std,
                batch_stats,
            },
            &deps,
        );
        let mut outputs = Vec::with_capacity(inputs.len());
        let mut offset = 0;
        for &i in inputs {
            let shape = self.value(i).shape().to_vec();
            outputs.push(self.slice(joined, offset, shape)?);
            offset += self.value(i).len();
        }
        Ok(outputs)
    }

    /// A contiguous flat range of `src`, reshaped.
    pub fn slice(&mut self, src: NodeId, offset: usize, shape: Vec<usize>) -> Result<NodeId> {
        let n: usize = shape.iter().product();
        let sv = self.value(src);
        if offset + n > sv.len() {
            return Err(shape_err(
                "slice",
                format!("range {offset}..{} exceeds {}", offset + n, sv.len()),
            ));
        }
        let value = Tensor::new(shape, sv.data()[offset..offset + n].to_vec())?;
        Ok(self.push(value, Op::Slice { src, offset }, &[src]))
    }

    /// One GRU direction over the first `len` rows of a `[steps, input]` node.
    /// Output is `[steps, hidden]` with zero rows past `len`.
    pub fn gru(&mut self, x: NodeId, h: &GruHandles, len: usize, reverse: bool) -> Result<NodeId> {
        let (w, u, b) = (self.param(h.w), self.param(h.u), self.param(h.b));
        let xv = self.value(x);
        let hidden = h.hidden;
        let (steps, input) = (xv.rows(), xv.cols());
        if xv.shape().len() != 2 || len > steps {
            return Err(shape_err(
                "gru",
                format!("input {:?} with length {len}", xv.shape()),
            ));
        }
        let (ws, us, bs) = (
            self.value(w).shape(),
            self.value(u).shape(),
            self.value(b).shape(),
        );
        if ws != [3 * hidden, input] || us != [3 * hidden, hidden] || bs != [3 * hidden] {
            return Err(shape_err(
                "gru",
                format!("weights {ws:?}/{us:?}/{bs:?} for input {input}, hidden {hidden}"),
            ));
        }
        let geom = GruGeom {
            input,
            hidden,
            steps,
            len,
            reverse,
        };
        let (out, cache) = kernels::gru_forward(
            &geom,
            xv.data(),
            self.value(w).data(),
            self.value(u).data(),
            self.value(b).data(),
        );
        let value = Tensor::new(vec![steps, hidden], out)?;
        Ok(self.push(
            value,
            Op::Gru {
                x,
                w,
                u,
                b,
                geom,
                cache,
            },
            &[x, w, u, b],
        ))
    }

    /// Bidirectional GRU: per-row concatenation of forward and backward states.
    pub fn bigru(
        &mut self,
        x: NodeId,
        fwd: &GruHandles,
        bwd: &GruHandles,
        len: usize,
    ) -> Result<(NodeId, NodeId, NodeId)> {
        let f = self.gru(x, fwd, len, false)?;
        let b = self.gru(x, bwd, len, true)?;
        let both = self.concat(&[f, b])?;
        Ok((both, f, b))
    }

    /// Concatenates along the last axis. Inputs are 1-D vectors or 2-D with equal row counts.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::InvalidArgument("concat: no inputs".into()));
        }
        let all_vectors = parts.iter().all(|&p| self.value(p).shape().len() == 1);
        let rows = self.value(parts[0]).rows();
        if parts
            .iter()
            .any(|&p| self.value(p).rows() != rows || self.value(p).shape().len() > 2)
        {
            return Err(shape_err("concat", "row counts differ".into()));
        }
        let width: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Vec::with_capacity(rows * width);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let shape = if all_vectors {
            vec![width]
        } else {
            vec![rows, width]
        };
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Concat(parts.to_vec()), parts))
    }

    /// Row-wise softmax over columns whose mask entry is true; masked columns get weight 0.
    pub fn masked_softmax(&mut self, logits: NodeId, mask: &[bool]) -> Result<NodeId> {
        let lv = self.value(logits);
        if lv.cols() != mask.len() {
            return Err(shape_err(
                "masked_softmax",
                format!("{} columns vs mask of {}", lv.cols(), mask.len()),
            ));
        }
        let data = kernels_softmax(lv, mask)?;
        let value = Tensor::new(lv.shape().to_vec(), data)?;
        Ok(self.push(value, Op::MaskedSoftmax { logits }, &[logits]))
    }

    /// Mean binary cross-entropy of probabilities `p` (1-D) against 0/1 labels.
    pub fn bce(&mut self, p: NodeId, labels: &[f64], eps: f64) -> Result<NodeId> {
        let pv = self.value(p);
        if labels.is_empty() {
            return Err(Error::InvalidArgument("bce: empty batch".into()));
        }
        if pv.len() != labels.len() {
            return Err(shape_err(
                "bce",
                format!("{} probabilities vs {} labels", pv.len(), labels.len()),
            ));
        }
        let loss = bce_value(pv.data(), labels, eps);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Bce {
                p,
                labels: labels.to_vec(),
                eps,
            },
            &[p],
        ))
    }

    /// `[channels, steps, freq]` to `[steps, channels * freq]`.
    pub fn channels_to_frames(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        let s = xv.shape();
        if s.len() != 3 {
            return Err(shape_err("channels_to_frames", format!("input {s:?}")));
        }
        let (channels, steps, freq) = (s[0], s[1], s[2]);
        let mut out = vec![0.0; xv.len()];
        for c in 0..channels {
            for t in 0..steps {
                let src = &xv.data()[(c * steps + t) * freq..][..freq];
                out[t * channels * freq + c * freq..][..freq].copy_from_slice(src);
            }
        }
        let value = Tensor::new(vec![steps, channels * freq], out)?;
        Ok(self.push(
            value,
            Op::ChannelsToFrames {
                x,
                channels,
                steps,
                freq,
            },
            &[x],
        ))
    }

    /// Row `row` of a 2-D node as a 1-D vector.
    pub fn select_row(&mut self, src: NodeId, row: usize) -> Result<NodeId> {
        let sv = self.value(src);
        if sv.shape().len() != 2 || row >= sv.rows() {
            return Err(shape_err(
                "select_row",
                format!("row {row} of {:?}", sv.shape()),
            ));
        }
        let value = Tensor::vector(sv.row(row).to_vec());
        Ok(self.push(value, Op::SelectRow { src, row }, &[src]))
    }

    /// Appends zero rows to a 2-D node up to `rows`.
    pub fn pad_rows(&mut self, src: NodeId, rows: usize) -> Result<NodeId> {
        let sv = self.value(src);
        if sv.shape().len() != 2 || rows < sv.rows() {
            return Err(shape_err(
                "pad_rows",
                format!("{:?} to {rows} rows", sv.shape()),
            ));
        }
        if rows == sv.rows() {
            return Ok(src);
        }
        let cols = sv.cols();
        let mut data = sv.data().to_vec();
        data.resize(rows * cols, 0.0);
        let value = Tensor::new(vec![rows, cols], data)?;
        Ok(self.push(value, Op::PadRows { src }, &[src]))
    }

    /// Reverse-mode accumulation from a scalar node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(self.value(loss).shape(), 1.0));
        let mut out = Gradients::default();

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let Some(g) = grads[i].take() else { continue };
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Param(id) => {
                    out.params.push((*id, g));
                    continue;
                }
                Op::Variable => {
                    out.nodes.insert(i, g);
                    continue;
                }
                _ => {}
            }
            self.backward_node(node, g.data(), &mut grads);
        }
        out.params.sort_by_key(|(id, _)| *id);
        Ok(out)
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Tensor>]) {
        let nodes = &self.nodes;
        // Gradient buffer of `id`, created on first use; None when `id` needs no gradient.
        fn slot<'a>(
            nodes: &[Node],
            grads: &'a mut [Option<Tensor>],
            id: NodeId,
        ) -> Option<&'a mut [f64]> {
            if !nodes[id.0].needs_grad {
                return None;
            }
            let shape = nodes[id.0].value.shape();
            Some(
                grads[id.0]
                    .get_or_insert_with(|| Tensor::zeros(shape))
                    .data_mut(),
            )
        }
        // Moves a gradient buffer out so several can be borrowed mutably at once.
        fn take_slot(nodes: &[Node], grads: &mut [Option<Tensor>], id: NodeId) -> Option<Tensor> {
            if !nodes[id.0].needs_grad {
                return None;
            }
            Some(
                grads[id.0]
                    .take()
                    .unwrap_or_else(|| Tensor::zeros(nodes[id.0].value.shape())),
            )
        }
        fn restore_slot(grads: &mut [Option<Tensor>], id: NodeId, t: Option<Tensor>) {
            if t.is_some() {
                grads[id.0] = t;
            }
        }
        fn add_into(dst: Option<&mut [f64]>, src: impl IntoIterator<Item = f64>) {
            if let Some(d) = dst {
                d.iter_mut().zip(src).for_each(|(a, b)| *a += b);
            }
        }
        let val = |id: NodeId| nodes[id.0].value.data();

        match &node.op {
            Op::Constant | Op::Variable | Op::Param(_) => {}
            Op::Linear { x, w, b } => {
                let (xv, wv) = (&nodes[x.0].value, &nodes[w.0].value);
                let (rows, din, dout) = (xv.rows(), wv.shape()[1], wv.shape()[0]);
                if let Some(dx) = slot(nodes, grads, *x) {
                    gemm(rows, dout, din, 1.0, g, false, wv.data(), false, 1.0, dx);
                }
                if let Some(dw) = slot(nodes, grads, *w) {
                    gemm(dout, rows, din, 1.0, g, true, xv.data(), false, 1.0, dw);
                }
                if let Some(b) = b {
                    if let Some(db) = slot(nodes, grads, *b) {
                        for r in g.chunks(dout) {
                            db.iter_mut().zip(r).for_each(|(a, b)| *a += b);
                        }
                    }
                }
            }
            Op::MatMul {
                a,
                b,
                trans_a,
                trans_b,
            } => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                let (m, n) = (node.value.shape()[0], node.value.shape()[1]);
                let k = if *trans_a {
                    av.shape()[0]
                } else {
                    av.shape()[1]
                };
                if let Some(da) = slot(nodes, grads, *a) {
                    if *trans_a {
                        gemm(k, n, m, 1.0, bv.data(), *trans_b, g, true, 1.0, da);
                    } else {
                        gemm(m, n, k, 1.0, g, false, bv.data(), !*trans_b, 1.0, da);
                    }
                }
                if let Some(db) = slot(nodes, grads, *b) {
                    if *trans_b {
                        gemm(n, m, k, 1.0, g, true, av.data(), *trans_a, 1.0, db);
                    } else {
                        gemm(k, m, n, 1.0, av.data(), !*trans_a, g, false, 1.0, db);
                    }
                }
            }
            Op::Add(a, b) => {
                add_into(slot(nodes, grads, *a), g.iter().copied());
                add_into(slot(nodes, grads, *b), g.iter().copied());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                add_into(slot(nodes, grads, *a), g.iter().zip(bv).map(|(g, y)| g * y));
                add_into(slot(nodes, grads, *b), g.iter().zip(av).map(|(g, x)| g * x));
            }
            Op::Scale(x, c) => add_into(slot(nodes, grads, *x), g.iter().map(|g| g * c)),
            Op::Sum(x) => {
                let n = nodes[x.0].value.len();
                add_into(slot(nodes, grads, *x), std::iter::repeat_n(g[0], n));
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                add_into(
                    slot(nodes, grads, *x),
                    g.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)),
                );
            }
            Op::Tanh(x) => {
                let y = node.value.data();
                add_into(
                    slot(nodes, grads, *x),
                    g.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)),
                );
            }
            Op::LeakyRelu(x, alpha) => {
                let xv = val(*x);
                add_into(
                    slot(nodes, grads, *x),
                    g.iter()
                        .zip(xv)
                        .map(|(g, v)| if *v >= 0.0 { *g } else { g * alpha }),
                );
            }
            Op::Dropout { x, mask } => {
                add_into(
                    slot(nodes, grads, *x),
                    g.iter().zip(mask).map(|(g, m)| g * m),
                );
            }
            Op::Conv2d {
                x,
                kernel,
                bias,
                geom,
            } => {
                let want_dx = nodes[x.0].needs_grad;
                let mut dk = take_slot(nodes, grads, *kernel);
                let mut db = take_slot(nodes, grads, *bias);
                let dx = kernels::conv2d_backward(
                    geom,
                    val(*x),
                    val(*kernel),
                    g,
                    dk.as_mut().map(|t| t.data_mut()),
                    db.as_mut().map(|t| t.data_mut()),
                    want_dx,
                );
                restore_slot(grads, *kernel, dk);
                restore_slot(grads, *bias, db);
                if let Some(dx) = dx {
                    add_into(slot(nodes, grads, *x), dx);
                }
            }
            Op::BatchNorm {
                inputs,
                gamma,
                beta,
                channels,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let gv = val(*gamma);
                let planes: Vec<usize> = inputs
                    .iter()
                    .map(|i| nodes[i.0].value.len() / channels)
                    .collect();
                let mut dgamma = vec![0.0; *channels];
                let mut dbeta = vec![0.0; *channels];
                let mut sum_dxh = vec![0.0; *channels];
                let mut sum_dxh_xh = vec![0.0; *channels];
                let mut count = 0usize;
                let mut off = 0;
                for &plane in &planes {
                    for c in 0..*channels {
                        for k in off + c * plane..off + (c + 1) * plane {
                            dgamma[c] += g[k] * xhat[k];
                            dbeta[c] += g[k];
                            let dxh = g[k] * gv[c];
                            sum_dxh[c] += dxh;
                            sum_dxh_xh[c] += dxh * xhat[k];
                        }
                    }
                    off += plane * channels;
                    count += plane;
                }
                add_into(slot(nodes, grads, *gamma), dgamma);
                add_into(slot(nodes, grads, *beta), dbeta);
                let n = count as f64;
                let mut off = 0;
                for (&inp, &plane) in inputs.iter().zip(&planes) {
                    if let Some(dx) = slot(nodes, grads, inp) {
                        for c in 0..*channels {
                            for j in 0..plane {
                                let k = off + c * plane + j;
                                let dxh = g[k] * gv[c];
                                dx[c * plane + j] += if *batch_stats {
                                    inv_std[c]
                                        * (dxh - sum_dxh[c] / n - xhat[k] * sum_dxh_xh[c] / n)
                                } else {
                                    inv_std[c] * dxh
                                };
                            }
                        }
                    }
                    off += plane * channels;
                }
            }
            Op::Slice { src, offset } => {
                if let Some(d) = slot(nodes, grads, *src) {
                    d[*offset..*offset + g.len()]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(a, b)| *a += b);
                }
            }
            Op::Gru {
                x,
                w,
                u,
                b,
                geom,
                cache,
            } => {
                let want_dx = nodes[x.0].needs_grad;
                let mut dw = take_slot(nodes, grads, *w);
                let mut du = take_slot(nodes, grads, *u);
                let mut db = take_slot(nodes, grads, *b);
                let dx = kernels::gru_backward(
                    geom,
                    val(*x),
                    val(*w),
                    val(*u),
                    cache,
                    g,
                    GruGrads {
                        dw: dw.as_mut().map(|t| t.data_mut()),
                        du: du.as_mut().map(|t| t.data_mut()),
                        db: db.as_mut().map(|t| t.data_mut()),
                    },
                    want_dx,
                );
                restore_slot(grads, *w, dw);
                restore_slot(grads, *u, du);
                restore_slot(grads, *b, db);
                if let Some(dx) = dx {
                    add_into(slot(nodes, grads, *x), dx);
                }
            }
            Op::Concat(parts) => {
                let rows = node.value.rows();
                let width = node.value.cols();
                let mut col = 0;
                for &p in parts {
                    let pc = nodes[p.0].value.cols();
                    if let Some(d) = slot(nodes, grads, p) {
                        for r in 0..rows {
                            d[r * pc..(r + 1) * pc]
                                .iter_mut()
                                .zip(&g[r * width + col..r * width + col + pc])
                                .for_each(|(a, b)| *a += b);
                        }
                    }
                    col += pc;
                }
            }
            Op::MaskedSoftmax { logits } => {
                let y = node.value.data();
                let n = node.value.cols();
                if let Some(d) = slot(nodes, grads, *logits) {
                    for ((dr, yr), gr) in d.chunks_mut(n).zip(y.chunks(n)).zip(g.chunks(n)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            dr[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::Bce { p, labels, eps } => {
                let pv = val(*p);
                let b = labels.len() as f64;
                add_into(
                    slot(nodes, grads, *p),
                    pv.iter().zip(labels).map(|(&p, &y)| {
                        if p < *eps || p > 1.0 - eps {
                            0.0
                        } else {
                            g[0] * (-y / p + (1.0 - y) / (1.0 - p)) / b
                        }
                    }),
                );
            }
            Op::ChannelsToFrames {
                x,
                channels,
                steps,
                freq,
            } => {
                if let Some(d) = slot(nodes, grads, *x) {
                    for c in 0..*channels {
                        for t in 0..*steps {
                            let src = &g[t * channels * freq + c * freq..][..*freq];
                            d[(c * steps + t) * freq..][..*freq]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(a, b)| *a += b);
                        }
                    }
                }
            }
            Op::SelectRow { src, row } => {
                let c = g.len();
                if let Some(d) = slot(nodes, grads, *src) {
                    d[row * c..(row + 1) * c]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(a, b)| *a += b);
                }
            }
            Op::PadRows { src } => {
                let n = nodes[src.0].value.len();
                add_into(slot(nodes, grads, *src), g[..n].iter().copied());
            }
        }
    }
}

fn kernels_softmax(lv: &Tensor, mask: &[bool]) -> Result<Vec<f64>> {
    if !mask.iter().any(|m| *m) {
        return Err(Error::InvalidArgument(
            "masked_softmax: every position is masked".into(),
        ));
    }
    let n = mask.len();
    let mut out = vec![0.0; lv.len()];
    for (row, dst) in lv.data().chunks(n).zip(out.chunks_mut(n)) {
        let max = row
            .iter()
            .zip(mask)
            .filter(|(_, m)| **m)
            .fold(f64::NEG_INFINITY, |a, (v, _)| a.max(*v));
        let mut total = 0.0;
        for j in 0..n {
            if mask[j] {
                dst[j] = (row[j] - max).exp();
                total += dst[j];
            }
        }
        dst.iter_mut().for_each(|v| *v /= total);
    }
    Ok(out)
}

pub(crate) fn softmax_rows(logits: &Tensor, mask: &[bool]) -> Result<Vec<f64>> {
    kernels_softmax(logits, mask)
}

pub(crate) fn bce_value(p: &[f64], labels: &[f64], eps: f64) -> f64 {
    let total: f64 = p
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = p.clamp(eps, 1.0 - eps);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum();
    total / labels.len() as f64
}
