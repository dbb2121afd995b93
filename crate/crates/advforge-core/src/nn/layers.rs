//! Layer kernels: forward and backward passes for conv / max-pool / dense /
//! relu / softmax on batch tensors.
//!
//! Convolutions are lowered to a single `dgemm` over im2col columns; the
//! column matrix is retained between forward and backward so the backward
//! pass is two more `dgemm`s plus a scatter. All activations are `[batch,
//! channels, h, w]` row-major, which flattens in place for dense layers.

use crate::blas::{dgemm_new, Trans};
use crate::tensor::Tensor;

/// Geometry of one conv application.
#[derive(Debug, Clone, Copy)]
pub struct ConvGeom {
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub filters: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn patch_len(&self) -> usize {
        self.in_c * self.kernel * self.kernel
    }
}

/// Lowers `x` (`[b, c, h, w]`) to the column matrix `[c*k*k, b*out_h*out_w]`
/// with zero padding; column order is image-major then row-major over the
/// output positions, matching the scatter in [`conv_forward`].
pub fn im2col(x: &Tensor, g: &ConvGeom) -> Vec<f64> {
    let b = x.shape()[0];
    let ohw = g.out_h * g.out_w;
    let cols_w = b * ohw;
    let mut cols = vec![0.0; g.patch_len() * cols_w];
    let xd = x.data();
    let img_len = g.in_c * g.in_h * g.in_w;
    for c in 0..g.in_c {
        for kh in 0..g.kernel {
            for kw in 0..g.kernel {
                let row = (c * g.kernel + kh) * g.kernel + kw;
                let out_row = &mut cols[row * cols_w..(row + 1) * cols_w];
                for bi in 0..b {
                    let img = &xd[bi * img_len + c * g.in_h * g.in_w..];
                    for oh in 0..g.out_h {
                        let ih = (oh * g.stride + kh) as isize - g.padding as isize;
                        let dst = &mut out_row[bi * ohw + oh * g.out_w..][..g.out_w];
                        if ih < 0 || ih >= g.in_h as isize {
                            continue; // stays zero (padding)
                        }
                        let src_row = &img[ih as usize * g.in_w..][..g.in_w];
                        for (ow, d) in dst.iter_mut().enumerate() {
                            let iw = (ow * g.stride + kw) as isize - g.padding as isize;
                            if iw >= 0 && iw < g.in_w as isize {
                                *d = src_row[iw as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add of a column-matrix gradient back onto the input image grid —
/// the exact adjoint of [`im2col`].
pub fn col2im_add(dcols: &[f64], g: &ConvGeom, batch: usize, dx: &mut [f64]) {
    let ohw = g.out_h * g.out_w;
    let cols_w = batch * ohw;
    let img_len = g.in_c * g.in_h * g.in_w;
    for c in 0..g.in_c {
        for kh in 0..g.kernel {
            for kw in 0..g.kernel {
                let row = (c * g.kernel + kh) * g.kernel + kw;
                let src_row = &dcols[row * cols_w..(row + 1) * cols_w];
                for bi in 0..batch {
                    let img = &mut dx[bi * img_len + c * g.in_h * g.in_w..][..g.in_h * g.in_w];
                    for oh in 0..g.out_h {
                        let ih = (oh * g.stride + kh) as isize - g.padding as isize;
                        if ih < 0 || ih >= g.in_h as isize {
                            continue;
                        }
                        let src = &src_row[bi * ohw + oh * g.out_w..][..g.out_w];
                        let dst = &mut img[ih as usize * g.in_w..][..g.in_w];
                        for (ow, s) in src.iter().enumerate() {
                            let iw = (ow * g.stride + kw) as isize - g.padding as isize;
                            if iw >= 0 && iw < g.in_w as isize {
                                dst[iw as usize] += *s;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Conv forward. Returns the `[b, filters, out_h, out_w]` activation and the
/// im2col matrix (retained for the backward pass).
pub fn conv_forward(x: &Tensor, w: &Tensor, bias: &Tensor, g: &ConvGeom) -> (Tensor, Vec<f64>) {
    let b = x.shape()[0];
    let ohw = g.out_h * g.out_w;
    let cols_w = b * ohw;
    let cols = im2col(x, g);
    // out_mat[f, b*ohw] = W[f, ckk] . cols[ckk, b*ohw]
    let out_mat = dgemm_new(
        Trans::No,
        Trans::No,
        g.filters,
        cols_w,
        g.patch_len(),
        1.0,
        w.data(),
        &cols,
    );
    // Scatter to [b, f, oh, ow] and add bias.
    let mut out = Tensor::zeros(&[b, g.filters, g.out_h, g.out_w]);
    let od = out.data_mut();
    let bd = bias.data();
    for f in 0..g.filters {
        let row = &out_mat[f * cols_w..(f + 1) * cols_w];
        let bv = bd[f];
        for bi in 0..b {
            let dst = &mut od[(bi * g.filters + f) * ohw..][..ohw];
            let src = &row[bi * ohw..][..ohw];
            for (d, s) in dst.iter_mut().zip(src) {
                *d = s + bv;
            }
        }
    }
    (out, cols)
}

/// Conv backward: given upstream `dout` (`[b, f, oh, ow]`) and the retained
/// columns, produces `(dw, dbias, dx)`.
pub fn conv_backward(
    dout: &Tensor,
    cols: &[f64],
    w: &Tensor,
    g: &ConvGeom,
    batch: usize,
) -> (Tensor, Tensor, Tensor) {
    let ohw = g.out_h * g.out_w;
    let cols_w = batch * ohw;
    // Gather dout into [f, b*ohw] (inverse of the forward scatter); the
    // pushes land in destination order, covering the matrix exactly.
    let mut dout_mat = Vec::with_capacity(g.filters * cols_w);
    let dd = dout.data();
    for f in 0..g.filters {
        for bi in 0..batch {
            dout_mat.extend_from_slice(&dd[(bi * g.filters + f) * ohw..][..ohw]);
        }
    }
    // dW[f, ckk] = dout_mat[f, b*ohw] . cols^T
    let dw_data = dgemm_new(
        Trans::No,
        Trans::Yes,
        g.filters,
        g.patch_len(),
        cols_w,
        1.0,
        &dout_mat,
        cols,
    );
    let dw = Tensor::from_vec(vec![g.filters, g.in_c, g.kernel, g.kernel], dw_data).unwrap();
    // dbias[f] = sum over columns.
    let mut db = Tensor::zeros(&[g.filters]);
    for f in 0..g.filters {
        db.data_mut()[f] = dout_mat[f * cols_w..(f + 1) * cols_w].iter().sum();
    }
    // dcols[ckk, b*ohw] = W^T . dout_mat, then scatter-add onto the grid.
    let dcols = dgemm_new(
        Trans::Yes,
        Trans::No,
        g.patch_len(),
        cols_w,
        g.filters,
        1.0,
        w.data(),
        &dout_mat,
    );
    let mut dx = Tensor::zeros(&[batch, g.in_c, g.in_h, g.in_w]);
    col2im_add(&dcols, g, batch, dx.data_mut());
    (dw, db, dx)
}

/// Max-pool forward (window == stride). Returns the pooled activation and
/// the flat input index of each window's maximum; ties go to the first
/// maximal element in scan order, and the backward routes gradient there.
pub fn maxpool_forward(x: &Tensor, window: usize) -> (Tensor, Vec<u32>) {
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (oh, ow) = (h / window, w / window);
    let mut out = Tensor::zeros(&[b, c, oh, ow]);
    let mut argmax = vec![0u32; b * c * oh * ow];
    let xd = x.data();
    let od = out.data_mut();
    for bc in 0..b * c {
        let plane = &xd[bc * h * w..][..h * w];
        for i in 0..oh {
            for j in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = 0usize;
                for di in 0..window {
                    for dj in 0..window {
                        let idx = (i * window + di) * w + (j * window + dj);
                        // Strict > keeps the first maximal element on ties.
                        if plane[idx] > best {
                            best = plane[idx];
                            best_idx = idx;
                        }
                    }
                }
                let o = (bc * oh + i) * ow + j;
                od[o] = best;
                argmax[o] = (bc * h * w + best_idx) as u32;
            }
        }
    }
    (out, argmax)
}

/// Max-pool backward: scatter each upstream gradient to its argmax cell.
pub fn maxpool_backward(dout: &Tensor, argmax: &[u32], in_shape: &[usize]) -> Tensor {
    let mut dx = Tensor::zeros(in_shape);
    let dxd = dx.data_mut();
    for (g, &idx) in dout.data().iter().zip(argmax) {
        dxd[idx as usize] += *g;
    }
    dx
}

/// Dense forward: `y[b, out] = x[b, in] . W^T + bias`, with `W` stored
/// `[out, in]`.
pub fn dense_forward(x: &Tensor, w: &Tensor, bias: &Tensor) -> Tensor {
    let b = x.shape()[0];
    let in_n = x.row_len();
    let out_n = w.shape()[0];
    let y_data = dgemm_new(
        Trans::No,
        Trans::Yes,
        b,
        out_n,
        in_n,
        1.0,
        x.data(),
        w.data(),
    );
    let mut y = Tensor::from_vec(vec![b, out_n], y_data).unwrap();
    let yd = y.data_mut();
    let bd = bias.data();
    for bi in 0..b {
        for (v, bv) in yd[bi * out_n..][..out_n].iter_mut().zip(bd) {
            *v += bv;
        }
    }
    y
}

/// Dense backward: `(dw, dbias, dx)` from upstream `dy` and the forward
/// input `x`.
pub fn dense_backward(dy: &Tensor, x: &Tensor, w: &Tensor) -> (Tensor, Tensor, Tensor) {
    let b = x.shape()[0];
    let in_n = x.row_len();
    let out_n = w.shape()[0];
    // dW[out, in] = dy^T[out, b] . x[b, in]
    let dw_data = dgemm_new(
        Trans::Yes,
        Trans::No,
        out_n,
        in_n,
        b,
        1.0,
        dy.data(),
        x.data(),
    );
    let dw = Tensor::from_vec(vec![out_n, in_n], dw_data).unwrap();
    let mut db = Tensor::zeros(&[out_n]);
    let dbd = db.data_mut();
    for bi in 0..b {
        for (a, g) in dbd.iter_mut().zip(&dy.data()[bi * out_n..][..out_n]) {
            *a += *g;
        }
    }
    // dx[b, in] = dy[b, out] . W[out, in]
    let dx_data = dgemm_new(
        Trans::No,
        Trans::No,
        b,
        in_n,
        out_n,
        1.0,
        dy.data(),
        w.data(),
    );
    let dx = Tensor::from_vec(vec![b, in_n], dx_data).unwrap();
    (dw, db, dx)
}

/// Elementwise `max(0, x)`.
pub fn relu_forward(x: &Tensor) -> Tensor {
    let mut y = x.clone();
    for v in y.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    y
}

/// Relu backward using the forward *output* as the mask (`y > 0 ⇔ x > 0`;
/// the derivative at exactly zero is taken as 0).
pub fn relu_backward(dout: &Tensor, y: &Tensor) -> Tensor {
    let mut dx = dout.clone();
    for (d, o) in dx.data_mut().iter_mut().zip(y.data()) {
        if *o <= 0.0 {
            *d = 0.0;
        }
    }
    dx
}

/// Numerically-stable row softmax: subtract the row max before
/// exponentiating, then normalize.
pub fn softmax_forward(logits: &Tensor) -> Tensor {
    let b = logits.dim0();
    let n = logits.row_len();
    let mut out = logits.clone();
    let d = out.data_mut();
    for bi in 0..b {
        let row = &mut d[bi * n..][..n];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Softmax Jacobian-vector product per row:
/// `dz_j = q_j * (dq_j - Σ_i dq_i q_i)`.
pub fn softmax_backward(probs: &Tensor, dprobs: &Tensor) -> Tensor {
    let b = probs.dim0();
    let n = probs.row_len();
    let mut dz = Tensor::zeros(probs.shape());
    let q = probs.data();
    let dq = dprobs.data();
    let out = dz.data_mut();
    for bi in 0..b {
        let qr = &q[bi * n..][..n];
        let dqr = &dq[bi * n..][..n];
        let s: f64 = qr.iter().zip(dqr).map(|(a, b)| a * b).sum();
        for j in 0..n {
            out[bi * n + j] = qr[j] * (dqr[j] - s);
        }
    }
    dz
}
