//! Minimal dense tensor kernels: creation, matmul, 1-D convolution, pooling
//! and row reductions, each with an explicit backward counterpart where
//! training needs one.
//!
//! All compute is 64-bit. Every fallible kernel checks its output for
//! NaN/Inf and reports it as an error instead of letting it propagate
//! silently. Kernels are pure functions; parallel paths partition work by
//! output coordinate so results are bit-identical for any thread count.

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Dense n-dimensional array of f64 in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch {
                op: "from_vec",
                expected: format!("{n} elements for shape {shape:?}"),
                got: format!("{} elements", data.len()),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(|i| f(i)).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.shape[axis]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Reinterpret the same buffer under a new shape of equal volume.
    pub fn reshape(mut self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                expected: format!("{} elements", self.data.len()),
                got: format!("shape {shape:?} = {n} elements"),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64 + Sync) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|v| v * s)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Row view of a 2-D tensor.
    pub fn row(&self, i: usize) -> &[f64] {
        let cols = self.shape[1];
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let cols = self.shape[1];
        &mut self.data[i * cols..(i + 1) * cols]
    }
}

fn check_finite(t: &Tensor, op: &'static str) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

/// y += a * x over equal-length slices. The hot loop of every kernel here;
/// kept free of bounds checks inside so it vectorizes.
#[inline]
pub(crate) fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * *xi;
    }
}

#[inline]
pub(crate) fn dot(x: &[f64], y: &[f64]) -> f64 {
    debug_assert_eq!(x.len(), y.len());
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

/// Work below this many flops stays serial; splitting is pure overhead.
const PAR_THRESHOLD: usize = 1 << 16;

/// C[M,N] = A[M,K] · B[K,N]
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0) {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            expected: format!("[M,K]x[K,N], lhs {:?}", a.shape()),
            got: format!("rhs {:?}", b.shape()),
        });
    }
    let (m, k, n) = (a.dim(0), a.dim(1), b.dim(1));
    let mut out = Tensor::zeros(&[m, n]);
    let row_job = |i: usize, out_row: &mut [f64]| {
        for p in 0..k {
            axpy(a.data[i * k + p], &b.data[p * n..(p + 1) * n], out_row);
        }
    };
    if m * k * n >= PAR_THRESHOLD {
        out.data
            .par_chunks_mut(n)
            .enumerate()
            .for_each(|(i, row)| row_job(i, row));
    } else {
        for (i, row) in out.data.chunks_mut(n).enumerate() {
            row_job(i, row);
        }
    }
    check_finite(&out, "matmul")?;
    Ok(out)
}

/// C[M,N] = A[M,K] · B[N,K]^T — both operands iterated along contiguous rows.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(1) {
        return Err(Error::ShapeMismatch {
            op: "matmul_nt",
            expected: format!("[M,K]x[N,K], lhs {:?}", a.shape()),
            got: format!("rhs {:?}", b.shape()),
        });
    }
    let (m, k, n) = (a.dim(0), a.dim(1), b.dim(0));
    let mut out = Tensor::zeros(&[m, n]);
    let row_job = |i: usize, out_row: &mut [f64]| {
        let a_row = &a.data[i * k..(i + 1) * k];
        for (j, o) in out_row.iter_mut().enumerate() {
            *o = dot(a_row, &b.data[j * k..(j + 1) * k]);
        }
    };
    if m * k * n >= PAR_THRESHOLD {
        out.data
            .par_chunks_mut(n)
            .enumerate()
            .for_each(|(i, row)| row_job(i, row));
    } else {
        for (i, row) in out.data.chunks_mut(n).enumerate() {
            row_job(i, row);
        }
    }
    check_finite(&out, "matmul_nt")?;
    Ok(out)
}

/// C[K,N] = A[M,K]^T · B[M,N]
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.dim(0) != b.dim(0) {
        return Err(Error::ShapeMismatch {
            op: "matmul_tn",
            expected: format!("[M,K]x[M,N], lhs {:?}", a.shape()),
            got: format!("rhs {:?}", b.shape()),
        });
    }
    let (m, k, n) = (a.dim(0), a.dim(1), b.dim(1));
    let mut out = Tensor::zeros(&[k, n]);
    let row_job = |p: usize, out_row: &mut [f64]| {
        for i in 0..m {
            axpy(a.data[i * k + p], &b.data[i * n..(i + 1) * n], out_row);
        }
    };
    if m * k * n >= PAR_THRESHOLD {
        out.data
            .par_chunks_mut(n)
            .enumerate()
            .for_each(|(p, row)| row_job(p, row));
    } else {
        for (p, row) in out.data.chunks_mut(n).enumerate() {
            row_job(p, row);
        }
    }
    check_finite(&out, "matmul_tn")?;
    Ok(out)
}

fn conv_dims(x: &Tensor, k: &Tensor, stride: usize) -> Result<(usize, usize, usize, usize, usize, usize)> {
    if x.rank() != 3 || k.rank() != 3 {
        return Err(Error::ShapeMismatch {
            op: "conv1d",
            expected: "x [B,Cin,T], k [Cout,Cin,L]".to_string(),
            got: format!("x {:?}, k {:?}", x.shape(), k.shape()),
        });
    }
    if stride == 0 {
        return Err(Error::InvalidArg {
            op: "conv1d",
            msg: "stride must be positive".to_string(),
        });
    }
    let (batch, cin, t) = (x.dim(0), x.dim(1), x.dim(2));
    let (cout, kcin, l) = (k.dim(0), k.dim(1), k.dim(2));
    if cin != kcin {
        return Err(Error::ShapeMismatch {
            op: "conv1d",
            expected: format!("{cin} input channels in kernel"),
            got: format!("{kcin}"),
        });
    }
    if l > t {
        return Err(Error::KernelTooLong { kernel: l, input: t });
    }
    let t_out = (t - l) / stride + 1;
    Ok((batch, cin, t, cout, l, t_out))
}

/// Valid (no padding) cross-correlation:
/// `y[b,o,t] = sum_{c,l} x[b,c,t*stride+l] * k[o,c,l]`
pub fn conv1d_forward(x: &Tensor, k: &Tensor, stride: usize) -> Result<Tensor> {
    let (batch, cin, t, cout, l, t_out) = conv_dims(x, k, stride)?;
    let mut out = Tensor::zeros(&[batch, cout, t_out]);
    let sample_job = |b: usize, y_sample: &mut [f64]| {
        for o in 0..cout {
            let y_row = &mut y_sample[o * t_out..(o + 1) * t_out];
            for c in 0..cin {
                let x_row = &x.data[(b * cin + c) * t..(b * cin + c + 1) * t];
                let k_row = &k.data[(o * cin + c) * l..(o * cin + c + 1) * l];
                if stride == 1 {
                    for (off, &kv) in k_row.iter().enumerate() {
                        axpy(kv, &x_row[off..off + t_out], y_row);
                    }
                } else {
                    for (tt, y) in y_row.iter_mut().enumerate() {
                        *y += dot(&x_row[tt * stride..tt * stride + l], k_row);
                    }
                }
            }
        }
    };
    let per_sample = cout * cin * l * t_out;
    if batch * per_sample >= PAR_THRESHOLD && batch > 1 {
        out.data
            .par_chunks_mut(cout * t_out)
            .enumerate()
            .for_each(|(b, s)| sample_job(b, s));
    } else {
        for (b, s) in out.data.chunks_mut(cout * t_out).enumerate() {
            sample_job(b, s);
        }
    }
    check_finite(&out, "conv1d_forward")?;
    Ok(out)
}

/// Exact gradients of [`conv1d_forward`] with respect to input and kernel.
pub fn conv1d_backward(
    grad_y: &Tensor,
    x: &Tensor,
    k: &Tensor,
    stride: usize,
) -> Result<(Tensor, Tensor)> {
    let (batch, cin, t, cout, l, t_out) = conv_dims(x, k, stride)?;
    if grad_y.shape() != [batch, cout, t_out] {
        return Err(Error::ShapeMismatch {
            op: "conv1d_backward",
            expected: format!("grad_y [{batch},{cout},{t_out}]"),
            got: format!("{:?}", grad_y.shape()),
        });
    }

    let mut grad_x = Tensor::zeros(&[batch, cin, t]);
    let gx_job = |b: usize, gx_sample: &mut [f64]| {
        for c in 0..cin {
            let gx_row = &mut gx_sample[c * t..(c + 1) * t];
            for o in 0..cout {
                let gy_row = &grad_y.data[(b * cout + o) * t_out..(b * cout + o + 1) * t_out];
                let k_row = &k.data[(o * cin + c) * l..(o * cin + c + 1) * l];
                if stride == 1 {
                    for (off, &kv) in k_row.iter().enumerate() {
                        axpy(kv, gy_row, &mut gx_row[off..off + t_out]);
                    }
                } else {
                    for (tt, &g) in gy_row.iter().enumerate() {
                        for (off, &kv) in k_row.iter().enumerate() {
                            gx_row[tt * stride + off] += g * kv;
                        }
                    }
                }
            }
        }
    };
    let per_sample = cout * cin * l * t_out;
    if batch * per_sample >= PAR_THRESHOLD && batch > 1 {
        grad_x
            .data
            .par_chunks_mut(cin * t)
            .enumerate()
            .for_each(|(b, s)| gx_job(b, s));
    } else {
        for (b, s) in grad_x.data.chunks_mut(cin * t).enumerate() {
            gx_job(b, s);
        }
    }

    let mut grad_k = Tensor::zeros(&[cout, cin, l]);
    let gk_job = |o: usize, gk_filter: &mut [f64]| {
        for b in 0..batch {
            let gy_row = &grad_y.data[(b * cout + o) * t_out..(b * cout + o + 1) * t_out];
            for c in 0..cin {
                let x_row = &x.data[(b * cin + c) * t..(b * cin + c + 1) * t];
                let gk_row = &mut gk_filter[c * l..(c + 1) * l];
                if stride == 1 {
                    for (off, gk) in gk_row.iter_mut().enumerate() {
                        *gk += dot(gy_row, &x_row[off..off + t_out]);
                    }
                } else {
                    for (tt, &g) in gy_row.iter().enumerate() {
                        for (off, gk) in gk_row.iter_mut().enumerate() {
                            *gk += g * x_row[tt * stride + off];
                        }
                    }
                }
            }
        }
    };
    if batch * per_sample >= PAR_THRESHOLD && cout > 1 {
        grad_k
            .data
            .par_chunks_mut(cin * l)
            .enumerate()
            .for_each(|(o, f)| gk_job(o, f));
    } else {
        for (o, f) in grad_k.data.chunks_mut(cin * l).enumerate() {
            gk_job(o, f);
        }
    }

    check_finite(&grad_x, "conv1d_backward")?;
    check_finite(&grad_k, "conv1d_backward")?;
    Ok((grad_x, grad_k))
}

/// Non-overlapping max pooling over the last axis; the trailing remainder is
/// dropped. Returns the pooled tensor and the flat input index of each
/// window's maximum (first index on ties) for routing the backward pass.
pub fn maxpool1d(x: &Tensor, width: usize) -> Result<(Tensor, Vec<usize>)> {
    if width == 0 {
        return Err(Error::InvalidArg {
            op: "maxpool1d",
            msg: "width must be positive".to_string(),
        });
    }
    if x.rank() != 3 {
        return Err(Error::ShapeMismatch {
            op: "maxpool1d",
            expected: "[B,C,T]".to_string(),
            got: format!("{:?}", x.shape()),
        });
    }
    let (batch, ch, t) = (x.dim(0), x.dim(1), x.dim(2));
    let t_out = t / width;
    let mut out = Tensor::zeros(&[batch, ch, t_out]);
    let mut argmax = vec![0usize; batch * ch * t_out];
    for bc in 0..batch * ch {
        let x_row = &x.data[bc * t..(bc + 1) * t];
        let o_row = &mut out.data[bc * t_out..(bc + 1) * t_out];
        let a_row = &mut argmax[bc * t_out..(bc + 1) * t_out];
        for w in 0..t_out {
            let start = w * width;
            let mut best = x_row[start];
            let mut best_i = start;
            for (j, &v) in x_row[start..start + width].iter().enumerate().skip(1) {
                if v > best {
                    best = v;
                    best_i = start + j;
                }
            }
            o_row[w] = best;
            a_row[w] = bc * t + best_i;
        }
    }
    check_finite(&out, "maxpool1d")?;
    Ok((out, argmax))
}

/// Routes `grad_y` back to the recorded argmax positions.
pub fn maxpool1d_backward(grad_y: &Tensor, argmax: &[usize], in_shape: &[usize]) -> Result<Tensor> {
    if grad_y.len() != argmax.len() {
        return Err(Error::ShapeMismatch {
            op: "maxpool1d_backward",
            expected: format!("{} argmax entries", grad_y.len()),
            got: format!("{}", argmax.len()),
        });
    }
    let mut grad_x = Tensor::zeros(in_shape);
    for (&idx, &g) in argmax.iter().zip(grad_y.data.iter()) {
        grad_x.data[idx] += g;
    }
    Ok(grad_x)
}

/// Stable per-row log-sum-exp: `out[i] = max_j x[i,j] + log sum_j exp(x[i,j] - max_j)`.
pub fn logsumexp_rows(x: &Tensor) -> Result<Tensor> {
    if x.rank() != 2 {
        return Err(Error::ShapeMismatch {
            op: "logsumexp_rows",
            expected: "[N,C]".to_string(),
            got: format!("{:?}", x.shape()),
        });
    }
    let (n, c) = (x.dim(0), x.dim(1));
    let mut out = Tensor::zeros(&[n]);
    for i in 0..n {
        let row = &x.data[i * c..(i + 1) * c];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = row.iter().map(|&v| (v - m).exp()).sum();
        out.data[i] = m + s.ln();
    }
    check_finite(&out, "logsumexp_rows")?;
    Ok(out)
}
