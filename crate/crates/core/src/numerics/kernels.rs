//! Slice-level forward and backward kernels.
//!
//! Layouts are row-major throughout. Convolution activations are `[channels, time, freq]`;
//! recurrent sequences are `[time, features]`. Stacked GRU weights hold the update, reset and
//! candidate blocks in that row order.

use super::tensor::gemm;

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn leaky_relu(v: f64, alpha: f64) -> f64 {
    if v >= 0.0 {
        v
    } else {
        alpha * v
    }
}

/// Output length of a 3-tap convolution with "same" padding.
pub fn conv_out_len(len: usize, stride: usize) -> usize {
    len.div_ceil(stride)
}

/// Geometry of a 3x3 "same" convolution whose stride applies to the time axis only.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub c_out: usize,
    pub t_in: usize,
    pub freq: usize,
    pub stride: usize,
}

impl ConvGeom {
    pub fn t_out(&self) -> usize {
        conv_out_len(self.t_in, self.stride)
    }

    fn patch(&self) -> usize {
        self.c_in * 9
    }
}

/// Unfolds `x` into a `[c_in * 9, t_out * freq]` patch matrix.
fn im2col(g: &ConvGeom, x: &[f64]) -> Vec<f64> {
    let (t_out, f) = (g.t_out(), g.freq);
    let width = t_out * f;
    let mut cols = vec![0.0; g.patch() * width];
    for ci in 0..g.c_in {
        let plane = &x[ci * g.t_in * f..(ci + 1) * g.t_in * f];
        for kt in 0..3 {
            for kf in 0..3 {
                let row = &mut cols[((ci * 9) + kt * 3 + kf) * width..][..width];
                for to in 0..t_out {
                    let ti = (g.stride * to + kt) as isize - 1;
                    if ti < 0 || ti as usize >= g.t_in {
                        continue;
                    }
                    let src = &plane[ti as usize * f..(ti as usize + 1) * f];
                    let dst = &mut row[to * f..(to + 1) * f];
                    // frequency offset kf - 1 with zero padding at both ends
                    match kf {
                        0 => dst[1..].copy_from_slice(&src[..f - 1]),
                        1 => dst.copy_from_slice(src),
                        _ => dst[..f - 1].copy_from_slice(&src[1..]),
                    }
                }
            }
        }
    }
    cols
}

fn col2im_add(g: &ConvGeom, cols: &[f64], dx: &mut [f64]) {
    let (t_out, f) = (g.t_out(), g.freq);
    let width = t_out * f;
    for ci in 0..g.c_in {
        let plane = &mut dx[ci * g.t_in * f..(ci + 1) * g.t_in * f];
        for kt in 0..3 {
            for kf in 0..3 {
                let row = &cols[((ci * 9) + kt * 3 + kf) * width..][..width];
                for to in 0..t_out {
                    let ti = (g.stride * to + kt) as isize - 1;
                    if ti < 0 || ti as usize >= g.t_in {
                        continue;
                    }
                    let dst = &mut plane[ti as usize * f..(ti as usize + 1) * f];
                    let src = &row[to * f..(to + 1) * f];
                    match kf {
                        0 => dst[..f - 1]
                            .iter_mut()
                            .zip(&src[1..])
                            .for_each(|(d, s)| *d += s),
                        1 => dst.iter_mut().zip(src).for_each(|(d, s)| *d += s),
                        _ => dst[1..]
                            .iter_mut()
                            .zip(&src[..f - 1])
                            .for_each(|(d, s)| *d += s),
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(g: &ConvGeom, x: &[f64], kernel: &[f64], bias: &[f64]) -> Vec<f64> {
    let width = g.t_out() * g.freq;
    let cols = im2col(g, x);
    let mut out = vec![0.0; g.c_out * width];
    for (co, row) in out.chunks_mut(width).enumerate() {
        row.fill(bias[co]);
    }
    gemm(
        g.c_out,
        g.patch(),
        width,
        1.0,
        kernel,
        false,
        &cols,
        false,
        1.0,
        &mut out,
    );
    out
}

/// Accumulates kernel and bias gradients; returns the input gradient when `want_dx`.
pub(crate) fn conv2d_backward(
    g: &ConvGeom,
    x: &[f64],
    kernel: &[f64],
    dy: &[f64],
    dkernel: Option<&mut [f64]>,
    dbias: Option<&mut [f64]>,
    want_dx: bool,
) -> Option<Vec<f64>> {
    let width = g.t_out() * g.freq;
    if let Some(dk) = dkernel {
        let cols = im2col(g, x);
        gemm(
            g.c_out,
            width,
            g.patch(),
            1.0,
            dy,
            false,
            &cols,
            true,
            1.0,
            dk,
        );
    }
    if let Some(db) = dbias {
        for (co, row) in dy.chunks(width).enumerate() {
            db[co] += row.iter().sum::<f64>();
        }
    }
    if !want_dx {
        return None;
    }
    let mut dcols = vec![0.0; g.patch() * width];
    gemm(
        g.patch(),
        g.c_out,
        width,
        1.0,
        kernel,
        true,
        dy,
        false,
        0.0,
        &mut dcols,
    );
    let mut dx = vec![0.0; g.c_in * g.t_in * g.freq];
    col2im_add(g, &dcols, &mut dx);
    Some(dx)
}

/// Per-step activations retained for backpropagation through time.
#[derive(Debug, Clone, Default)]
pub(crate) struct GruCache {
    pub z: Vec<f64>,
    pub r: Vec<f64>,
    pub cand: Vec<f64>,
    pub h_prev: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct GruGeom {
    pub input: usize,
    pub hidden: usize,
    /// Rows of the padded sequence.
    pub steps: usize,
    /// Unmasked prefix length; rows at or beyond it are zero in the output.
    pub len: usize,
    pub reverse: bool,
}

impl GruGeom {
    fn order(&self) -> Box<dyn Iterator<Item = usize>> {
        if self.reverse {
            Box::new((0..self.len).rev())
        } else {
            Box::new(0..self.len)
        }
    }
}

fn matvec_add(m: &[f64], rows: usize, cols: usize, v: &[f64], out: &mut [f64]) {
    for (i, o) in out.iter_mut().enumerate().take(rows) {
        let row = &m[i * cols..(i + 1) * cols];
        *o += row.iter().zip(v).map(|(a, b)| a * b).sum::<f64>();
    }
}

/// Runs one GRU direction: `z = σ(W_z x + U_z h + b_z)`, `r = σ(W_r x + U_r h + b_r)`,
/// `ĥ = tanh(W_h x + U_h (r ⊙ h) + b_h)`, `h' = (1 − z) ⊙ h + z ⊙ ĥ`, starting from `h = 0`.
pub(crate) fn gru_forward(
    g: &GruGeom,
    x: &[f64],
    w: &[f64],
    u: &[f64],
    b: &[f64],
) -> (Vec<f64>, GruCache) {
    let h = g.hidden;
    let h3 = 3 * h;
    let mut pre = vec![0.0; g.len * h3];
    for row in pre.chunks_mut(h3) {
        row.copy_from_slice(b);
    }
    gemm(g.len, g.input, h3, 1.0, x, false, w, true, 1.0, &mut pre);

    let mut out = vec![0.0; g.steps * h];
    let mut cache = GruCache {
        z: vec![0.0; g.len * h],
        r: vec![0.0; g.len * h],
        cand: vec![0.0; g.len * h],
        h_prev: vec![0.0; g.len * h],
    };
    let mut state = vec![0.0; h];
    let mut rec = vec![0.0; 2 * h];
    let mut rh = vec![0.0; h];
    let mut cand_rec = vec![0.0; h];
    for t in g.order() {
        let a = &pre[t * h3..(t + 1) * h3];
        rec.fill(0.0);
        matvec_add(u, 2 * h, h, &state, &mut rec);
        let zs = &mut cache.z[t * h..(t + 1) * h];
        let rs = &mut cache.r[t * h..(t + 1) * h];
        for j in 0..h {
            zs[j] = sigmoid(a[j] + rec[j]);
            rs[j] = sigmoid(a[h + j] + rec[h + j]);
            rh[j] = rs[j] * state[j];
        }
        cand_rec.fill(0.0);
        matvec_add(&u[2 * h * h..], h, h, &rh, &mut cand_rec);
        let cs = &mut cache.cand[t * h..(t + 1) * h];
        cache.h_prev[t * h..(t + 1) * h].copy_from_slice(&state);
        for j in 0..h {
            cs[j] = (a[2 * h + j] + cand_rec[j]).tanh();
            state[j] = (1.0 - zs[j]) * state[j] + zs[j] * cs[j];
        }
        out[t * h..(t + 1) * h].copy_from_slice(&state);
    }
    (out, cache)
}

pub(crate) struct GruGrads<'a> {
    pub dw: Option<&'a mut [f64]>,
    pub du: Option<&'a mut [f64]>,
    pub db: Option<&'a mut [f64]>,
}

/// Backpropagation through time for [`gru_forward`]. Returns the input gradient when `want_dx`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gru_backward(
    g: &GruGeom,
    x: &[f64],
    w: &[f64],
    u: &[f64],
    cache: &GruCache,
    dy: &[f64],
    grads: GruGrads<'_>,
    want_dx: bool,
) -> Option<Vec<f64>> {
    let h = g.hidden;
    let h3 = 3 * h;
    let mut dpre = vec![0.0; g.len * h3];
    let mut carry = vec![0.0; h];
    let mut du_local = vec![0.0; h3 * h];
    let mut dh = vec![0.0; h];
    let mut d_rh = vec![0.0; h];
    let order: Vec<usize> = g.order().collect();
    for &t in order.iter().rev() {
        let z = &cache.z[t * h..(t + 1) * h];
        let r = &cache.r[t * h..(t + 1) * h];
        let c = &cache.cand[t * h..(t + 1) * h];
        let hp = &cache.h_prev[t * h..(t + 1) * h];
        for j in 0..h {
            dh[j] = dy[t * h + j] + carry[j];
        }
        let da = &mut dpre[t * h3..(t + 1) * h3];
        let mut dhp = vec![0.0; h];
        for j in 0..h {
            let dz = dh[j] * (c[j] - hp[j]);
            let dc = dh[j] * z[j];
            dhp[j] = dh[j] * (1.0 - z[j]);
            da[j] = dz * z[j] * (1.0 - z[j]);
            da[2 * h + j] = dc * (1.0 - c[j] * c[j]);
        }
        // candidate path through U_h (r ⊙ h)
        d_rh.fill(0.0);
        for i in 0..h {
            let dai = da[2 * h + i];
            if dai == 0.0 {
                continue;
            }
            let urow = &u[(2 * h + i) * h..(2 * h + i + 1) * h];
            let durow = &mut du_local[(2 * h + i) * h..(2 * h + i + 1) * h];
            for j in 0..h {
                d_rh[j] += urow[j] * dai;
                durow[j] += dai * r[j] * hp[j];
            }
        }
        for j in 0..h {
            let dr = d_rh[j] * hp[j];
            dhp[j] += d_rh[j] * r[j];
            da[h + j] = dr * r[j] * (1.0 - r[j]);
        }
        // update and reset gates through U_z h and U_r h
        for i in 0..2 * h {
            let dai = da[i];
            if dai == 0.0 {
                continue;
            }
            let urow = &u[i * h..(i + 1) * h];
            let durow = &mut du_local[i * h..(i + 1) * h];
            for j in 0..h {
                dhp[j] += urow[j] * dai;
                durow[j] += dai * hp[j];
            }
        }
        carry.copy_from_slice(&dhp);
    }
    if let Some(du) = grads.du {
        du.iter_mut().zip(&du_local).for_each(|(a, b)| *a += b);
    }
    if let Some(dw) = grads.dw {
        gemm(h3, g.len, g.input, 1.0, &dpre, true, x, false, 1.0, dw);
    }
    if let Some(db) = grads.db {
        for row in dpre.chunks(h3) {
            db.iter_mut().zip(row).for_each(|(a, b)| *a += b);
        }
    }
    if !want_dx {
        return None;
    }
    let mut dx = vec![0.0; g.steps * g.input];
    gemm(
        g.len, h3, g.input, 1.0, &dpre, false, w, false, 0.0, &mut dx,
    );
    Some(dx)
}
