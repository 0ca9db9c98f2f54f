//! Dense row-major `f64` tensors and the forward kernels shared by the tape.
//!
//! Every reduction sums left to right along the reduced axis starting from
//! `0.0`, so results are bit-reproducible across runs and match a naive
//! scalar loop written in the same order.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape("Tensor::new", shape, &[data.len()]));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(data, &[rows, cols])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn at(&self, index: &[usize]) -> f64 {
        debug_assert_eq!(index.len(), self.shape.len());
        let mut flat = 0;
        for (i, (&ix, &dim)) in index.iter().zip(&self.shape).enumerate() {
            debug_assert!(ix < dim, "index {ix} out of range on axis {i}");
            flat = flat * dim + ix;
        }
        self.data[flat]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(Error::shape("reshape", &self.shape, shape));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Size of the last axis and the number of rows before it.
    pub(crate) fn rows_cols(&self) -> (usize, usize) {
        let cols = self.shape.last().copied().unwrap_or(1);
        let rows = if cols == 0 { 0 } else { self.numel() / cols };
        (rows, cols)
    }
}

/// Resolves a possibly negative axis.
pub(crate) fn normalize_axis(op: &'static str, axis: isize, rank: usize) -> Result<usize> {
    let r = rank as isize;
    let ax = if axis < 0 { axis + r } else { axis };
    if ax < 0 || ax >= r {
        return Err(Error::invalid(
            op,
            format!("axis {axis} out of range for rank {rank}"),
        ));
    }
    Ok(ax as usize)
}

/// Numpy-style broadcast of two shapes.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// For each flat index of `out_shape`, the flat index into a tensor of
/// `in_shape` broadcast to it. `in_shape` must broadcast to `out_shape`.
pub(crate) fn broadcast_index(in_shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let numel: usize = out_shape.iter().product();
    let in_numel: usize = in_shape.iter().product();
    if in_shape == out_shape {
        return (0..numel).collect();
    }
    // Trailing-suffix broadcast (e.g. a bias or a [T, T] mask): plain modulo.
    let offset = out_shape.len() - in_shape.len();
    if out_shape[offset..] == *in_shape {
        return (0..numel).map(|i| i % in_numel.max(1)).collect();
    }
    let rank = out_shape.len();
    let mut strides = vec![0usize; rank];
    let mut acc = 1;
    for i in (0..in_shape.len()).rev() {
        let oi = i + offset;
        strides[oi] = if in_shape[i] == 1 { 0 } else { acc };
        acc *= in_shape[i];
    }
    let mut idx = Vec::with_capacity(numel);
    let mut coord = vec![0usize; rank];
    let mut cur = 0usize;
    for _ in 0..numel {
        idx.push(cur);
        for ax in (0..rank).rev() {
            coord[ax] += 1;
            cur += strides[ax];
            if coord[ax] < out_shape[ax] {
                break;
            }
            cur -= strides[ax] * coord[ax];
            coord[ax] = 0;
        }
    }
    idx
}

/// Sums a gradient of shape `from` down to the broadcast source shape `to`.
pub(crate) fn reduce_to_shape(grad: &[f64], from: &[usize], to: &[usize]) -> Vec<f64> {
    if from == to {
        return grad.to_vec();
    }
    let idx = broadcast_index(to, from);
    let mut out = vec![0.0; to.iter().product()];
    for (g, &i) in grad.iter().zip(&idx) {
        out[i] += g;
    }
    out
}

pub(crate) fn broadcast_binary(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    if a.shape == b.shape {
        let data = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
        return Ok(Tensor {
            shape: a.shape.clone(),
            data,
        });
    }
    let out_shape =
        broadcast_shape(&a.shape, &b.shape).ok_or_else(|| Error::shape(op, &a.shape, &b.shape))?;
    let ia = broadcast_index(&a.shape, &out_shape);
    let ib = broadcast_index(&b.shape, &out_shape);
    let data = ia
        .iter()
        .zip(&ib)
        .map(|(&i, &j)| f(a.data[i], b.data[j]))
        .collect();
    Ok(Tensor {
        shape: out_shape,
        data,
    })
}

pub(crate) fn broadcast_to(a: &Tensor, shape: &[usize]) -> Result<Tensor> {
    match broadcast_shape(&a.shape, shape) {
        Some(s) if s == shape => {
            let idx = broadcast_index(&a.shape, shape);
            Ok(Tensor {
                shape: shape.to_vec(),
                data: idx.iter().map(|&i| a.data[i]).collect(),
            })
        }
        _ => Err(Error::shape("broadcast_to", &a.shape, shape)),
    }
}

/// Layout of a (batched) matrix product.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct MatmulDims {
    pub batch: usize,
    pub m: usize,
    pub k: usize,
    pub n: usize,
    /// Right operand is a single `[k, n]` matrix shared by every batch entry.
    pub rhs_shared: bool,
}

pub(crate) fn matmul_dims(a: &[usize], b: &[usize]) -> Result<(MatmulDims, Vec<usize>)> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::shape("matmul", a, b));
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
    if k != k2 {
        return Err(Error::shape("matmul", a, b));
    }
    let a_batch = &a[..a.len() - 2];
    let b_batch = &b[..b.len() - 2];
    let rhs_shared = b_batch.is_empty();
    if !rhs_shared && a_batch != b_batch {
        return Err(Error::shape("matmul", a, b));
    }
    let batch = a_batch.iter().product();
    let mut out = a_batch.to_vec();
    out.push(m);
    out.push(n);
    Ok((
        MatmulDims {
            batch,
            m,
            k,
            n,
            rhs_shared,
        },
        out,
    ))
}

/// `c[i, j] = sum_p a[i, p] * b[p, j]`, accumulated in increasing `p`.
pub(crate) fn gemm(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        crow.iter_mut().for_each(|x| *x = 0.0);
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `c = a^T b` with `a: [k, m]`, `b: [k, n]`, accumulated over `p` in order, added into `c`.
pub(crate) fn gemm_tn_acc(a: &[f64], b: &[f64], c: &mut [f64], k: usize, m: usize, n: usize) {
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `c = a b^T` with `a: [m, k]`, `b: [n, k]`.
pub(crate) fn gemm_nt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for (&x, &y) in arow.iter().zip(brow) {
                s += x * y;
            }
            c[i * n + j] = s;
        }
    }
}

pub(crate) fn matmul(a: &Tensor, b: &Tensor) -> Result<(Tensor, MatmulDims)> {
    let (dims, out_shape) = matmul_dims(&a.shape, &b.shape)?;
    let MatmulDims { batch, m, k, n, rhs_shared } = dims;
    if rhs_shared {
        // Shared right operand: fold the batch into the row dimension.
        let mut out = vec![0.0; batch * m * n];
        gemm(&a.data, &b.data, &mut out, batch * m, k, n);
        return Ok((Tensor { shape: out_shape, data: out }, dims));
    }
    let mut out = vec![0.0; batch * m * n];
    for bi in 0..batch {
        gemm(
            &a.data[bi * m * k..(bi + 1) * m * k],
            &b.data[bi * k * n..(bi + 1) * k * n],
            &mut out[bi * m * n..(bi + 1) * m * n],
            m,
            k,
            n,
        );
    }
    Ok((Tensor { shape: out_shape, data: out }, dims))
}

pub(crate) fn permute(a: &Tensor, axes: &[usize]) -> Result<Tensor> {
    let rank = a.rank();
    let mut seen = vec![false; rank];
    if axes.len() != rank || axes.iter().any(|&ax| ax >= rank || std::mem::replace(&mut seen[ax], true)) {
        return Err(Error::invalid("permute", format!("{axes:?} is not a permutation of rank {rank}")));
    }
    let out_shape: Vec<usize> = axes.iter().map(|&ax| a.shape[ax]).collect();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * a.shape[i + 1];
    }
    let strides: Vec<usize> = axes.iter().map(|&ax| in_strides[ax]).collect();
    let numel = a.numel();
    let mut data = Vec::with_capacity(numel);
    let mut coord = vec![0usize; rank];
    let mut cur = 0usize;
    for _ in 0..numel {
        data.push(a.data[cur]);
        for ax in (0..rank).rev() {
            coord[ax] += 1;
            cur += strides[ax];
            if coord[ax] < out_shape[ax] {
                break;
            }
            cur -= strides[ax] * coord[ax];
            coord[ax] = 0;
        }
    }
    Ok(Tensor { shape: out_shape, data })
}

pub(crate) fn inverse_permutation(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &ax) in axes.iter().enumerate() {
        inv[ax] = i;
    }
    inv
}

/// Splits a shape around `axis` into (outer, len, inner).
pub(crate) fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn sum_axis(a: &Tensor, axis: usize, keepdim: bool) -> Tensor {
    let (outer, len, inner) = split_at_axis(&a.shape, axis);
    let mut data = vec![0.0; outer * inner];
    for o in 0..outer {
        for l in 0..len {
            let src = &a.data[(o * len + l) * inner..(o * len + l + 1) * inner];
            let dst = &mut data[o * inner..(o + 1) * inner];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
    }
    let mut shape = a.shape.clone();
    if keepdim {
        shape[axis] = 1;
    } else {
        shape.remove(axis);
    }
    Tensor { shape, data }
}

pub(crate) fn softmax_rows(a: &Tensor) -> Result<Tensor> {
    let (rows, cols) = a.rows_cols();
    let mut data = vec![0.0; a.numel()];
    for r in 0..rows {
        let x = &a.data[r * cols..(r + 1) * cols];
        let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Err(Error::AllMaskedRow { row: r });
        }
        let out = &mut data[r * cols..(r + 1) * cols];
        let mut sum = 0.0;
        for (o, &v) in out.iter_mut().zip(x) {
            *o = (v - max).exp();
            sum += *o;
        }
        for o in out.iter_mut() {
            *o /= sum;
        }
    }
    Ok(Tensor { shape: a.shape.clone(), data })
}

pub(crate) fn log_softmax_rows(a: &Tensor) -> Result<Tensor> {
    let (rows, cols) = a.rows_cols();
    let mut data = vec![0.0; a.numel()];
    for r in 0..rows {
        let x = &a.data[r * cols..(r + 1) * cols];
        let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Err(Error::AllMaskedRow { row: r });
        }
        let mut sum = 0.0;
        for &v in x {
            sum += (v - max).exp();
        }
        let lse = max + sum.ln();
        for (o, &v) in data[r * cols..(r + 1) * cols].iter_mut().zip(x) {
            *o = v - lse;
        }
    }
    Ok(Tensor { shape: a.shape.clone(), data })
}

/// Mean and population standard deviation of each row of the last axis.
pub(crate) fn row_mean_std(a: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let (rows, cols) = a.rows_cols();
    let mut means = Vec::with_capacity(rows);
    let mut stds = Vec::with_capacity(rows);
    for r in 0..rows {
        let x = &a.data[r * cols..(r + 1) * cols];
        let mut s = 0.0;
        for &v in x {
            s += v;
        }
        let mean = s / cols as f64;
        let mut ss = 0.0;
        for &v in x {
            ss += (v - mean) * (v - mean);
        }
        means.push(mean);
        stds.push((ss / cols as f64).sqrt());
    }
    (means, stds)
}

pub(crate) fn row_l2_norm(a: &Tensor) -> Vec<f64> {
    let (rows, cols) = a.rows_cols();
    (0..rows)
        .map(|r| {
            let mut s = 0.0;
            for &v in &a.data[r * cols..(r + 1) * cols] {
                s += v * v;
            }
            s.sqrt()
        })
        .collect()
}

pub(crate) const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}
