//! Dense row-major `f64` tensors and the forward kernels the tape records.
//!
//! A [`Tensor`] is a value: operations return new tensors and never mutate
//! their inputs. Rank is unrestricted, but the kernels only implement the
//! layouts the forecasting model needs:
//!
//! * `matmul` treats every axis but the last as a flattened row axis, so
//!   `[P, N, D_in] x [D_in, D_out]` is a single GEMM.
//! * `slot_matmul` applies one `[N, N]` matrix to every time slot of a
//!   `[P, N, D]` tensor (graph mixing).
//! * binary elementwise ops accept an exact shape match or a right operand
//!   whose shape is a suffix of the left one (bias add, per-row masks).

use std::fmt;

use crate::error::{Error, Result};

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.data.len() <= 16 {
            write!(f, "Tensor{:?}{:?}", self.shape, self.data)
        } else {
            write!(f, "Tensor{:?}[{} values]", self.shape, self.data.len())
        }
    }
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::dim("tensor", format!("zero extent in shape {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::dim(
                "tensor",
                format!("shape {shape:?} needs {numel} values, got {}", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    /// Panics on a shape/data mismatch; for kernels whose output shape is
    /// known-good by construction.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn filled(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Tensor { shape, data: vec![value; n] }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::filled(shape, 1.0)
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![1], data: vec![value] }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros([n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn vector(values: &[f64]) -> Self {
        Tensor { shape: vec![values.len()], data: values.to_vec() }
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::dim("from_rows", "ragged rows"));
        }
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Tensor::new([rows.len(), cols], data)
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

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn at(&self, index: &[usize]) -> f64 {
        assert_eq!(index.len(), self.shape.len(), "index rank");
        let mut flat = 0;
        for (i, (&ix, &ext)) in index.iter().zip(&self.shape).enumerate() {
            assert!(ix < ext, "index {ix} out of range for axis {i} of {:?}", self.shape);
            flat = flat * ext + ix;
        }
        self.data[flat]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        Tensor::new(shape, self.data.clone())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Tensor::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shapes");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Elementwise combination; `other` must match exactly or be a suffix
    /// of `self`'s shape, in which case it is repeated over the leading axes.
    pub fn zip_with(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        let inner = broadcast_inner(&self.shape, &other.shape)
            .ok_or_else(|| Error::dim(op, format!("{:?} vs {:?}", self.shape, other.shape)))?;
        let mut data = Vec::with_capacity(self.data.len());
        for chunk in self.data.chunks(inner.max(1)) {
            data.extend(chunk.iter().zip(&other.data).map(|(&a, &b)| f(a, b)));
        }
        Ok(Tensor::from_parts(self.shape.clone(), data))
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Self> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|v| v * s)
    }

    /// `[.., k] x [k, n] -> [.., n]`.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Self> {
        let (m, k) = self.as_rows()?;
        if rhs.rank() != 2 || rhs.shape[0] != k {
            return Err(Error::dim("matmul", format!("{:?} x {:?}", self.shape, rhs.shape)));
        }
        let n = rhs.shape[1];
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, &self.data, (k, 1), &rhs.data, (n, 1), &mut out, 0.0);
        let mut shape = self.shape.clone();
        *shape.last_mut().unwrap() = n;
        Ok(Tensor::from_parts(shape, out))
    }

    /// Applies `self: [a, b]` to every slot of `x: [.., b, d]`.
    pub fn slot_matmul(&self, x: &Tensor) -> Result<Self> {
        let (slots, b, d) = slot_dims(self, x)?;
        let a = self.shape[0];
        let mut out = vec![0.0; slots * a * d];
        for s in 0..slots {
            gemm(
                a,
                b,
                d,
                &self.data,
                (b, 1),
                &x.data[s * b * d..(s + 1) * b * d],
                (d, 1),
                &mut out[s * a * d..(s + 1) * a * d],
                0.0,
            );
        }
        let mut shape = x.shape.clone();
        let r = shape.len();
        shape[r - 2] = a;
        Ok(Tensor::from_parts(shape, out))
    }

    /// Batched product `[B, m, k] x [B, k, n] -> [B, m, n]`.
    pub fn bmm(&self, rhs: &Tensor) -> Result<Self> {
        let (batch, m, k, n) = bmm_dims(self, rhs)?;
        let mut out = vec![0.0; batch * m * n];
        for i in 0..batch {
            gemm(
                m,
                k,
                n,
                &self.data[i * m * k..(i + 1) * m * k],
                (k, 1),
                &rhs.data[i * k * n..(i + 1) * k * n],
                (n, 1),
                &mut out[i * m * n..(i + 1) * m * n],
                0.0,
            );
        }
        Ok(Tensor::from_parts(vec![batch, m, n], out))
    }

    /// Exchanges axes `i` and `j`.
    pub fn swap_axes(&self, i: usize, j: usize) -> Result<Self> {
        if i >= self.rank() || j >= self.rank() {
            return Err(Error::dim("swap_axes", format!("axes ({i}, {j}) of {:?}", self.shape)));
        }
        let (i, j) = if i <= j { (i, j) } else { (j, i) };
        let mut shape = self.shape.clone();
        shape.swap(i, j);
        if i == j || self.shape[i] == 1 && self.shape[j] == 1 {
            return Ok(Tensor::from_parts(shape, self.data.clone()));
        }
        let outer: usize = self.shape[..i].iter().product();
        let (ai, aj) = (self.shape[i], self.shape[j]);
        let mid: usize = self.shape[i + 1..j].iter().product();
        let inner: usize = self.shape[j + 1..].iter().product();
        let mut out = vec![0.0; self.data.len()];
        for o in 0..outer {
            for a in 0..ai {
                for m in 0..mid {
                    for b in 0..aj {
                        let src = (((o * ai + a) * mid + m) * aj + b) * inner;
                        let dst = (((o * aj + b) * mid + m) * ai + a) * inner;
                        out[dst..dst + inner].copy_from_slice(&self.data[src..src + inner]);
                    }
                }
            }
        }
        Ok(Tensor::from_parts(shape, out))
    }

    /// Swaps the two leading axes of a tensor of rank at least 2.
    pub fn swap_leading(&self) -> Result<Self> {
        if self.rank() < 2 {
            return Err(Error::dim("swap_leading", format!("rank {} unsupported", self.rank())));
        }
        self.swap_axes(0, 1)
    }

    pub fn transpose(&self) -> Result<Self> {
        if self.rank() != 2 {
            return Err(Error::dim("transpose", format!("expected matrix, got {:?}", self.shape)));
        }
        self.swap_leading()
    }

    /// Softmax over the last axis with per-row max subtraction.
    pub fn softmax_rows(&self) -> Self {
        let n = *self.shape.last().unwrap();
        let mut out = self.data.clone();
        for row in out.chunks_mut(n) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        Tensor::from_parts(self.shape.clone(), out)
    }

    pub fn concat(tensors: &[&Tensor], axis: usize) -> Result<Self> {
        let first = tensors.first().ok_or_else(|| Error::dim("concat", "no inputs"))?;
        if axis >= first.rank() {
            return Err(Error::dim("concat", format!("axis {axis} out of range for {:?}", first.shape)));
        }
        for t in tensors {
            let same_rank = t.rank() == first.rank();
            if !same_rank
                || t.shape.iter().zip(&first.shape).enumerate().any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::dim("concat", format!("{:?} vs {:?} on axis {axis}", first.shape, t.shape)));
            }
        }
        let outer: usize = first.shape[..axis].iter().product();
        let tail: usize = first.shape[axis + 1..].iter().product();
        let total_axis: usize = tensors.iter().map(|t| t.shape[axis]).sum();
        let mut data = Vec::with_capacity(outer * total_axis * tail);
        for o in 0..outer {
            for t in tensors {
                let chunk = t.shape[axis] * tail;
                data.extend_from_slice(&t.data[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first.shape.clone();
        shape[axis] = total_axis;
        Ok(Tensor::from_parts(shape, data))
    }

    /// `len` entries starting at `start` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Self> {
        if axis >= self.rank() || len == 0 || start + len > self.shape[axis] {
            return Err(Error::dim(
                "slice",
                format!("[{start}, {}) on axis {axis} of {:?}", start + len, self.shape),
            ));
        }
        let outer: usize = self.shape[..axis].iter().product();
        let tail: usize = self.shape[axis + 1..].iter().product();
        let chunk = self.shape[axis] * tail;
        let mut data = Vec::with_capacity(outer * len * tail);
        for o in 0..outer {
            let base = o * chunk + start * tail;
            data.extend_from_slice(&self.data[base..base + len * tail]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = len;
        Ok(Tensor::from_parts(shape, data))
    }

    /// `out[t] = self[t + offset]` along axis 0, zero outside the range.
    pub fn time_shift(&self, offset: isize) -> Self {
        self.shift(0, offset).expect("axis 0 exists")
    }

    /// `out[.., t, ..] = self[.., t + offset, ..]` along `axis`, zero fill.
    pub fn shift(&self, axis: usize, offset: isize) -> Result<Self> {
        if axis >= self.rank() {
            return Err(Error::dim("shift", format!("axis {axis} of {:?}", self.shape)));
        }
        let outer: usize = self.shape[..axis].iter().product();
        let steps = self.shape[axis];
        let inner: usize = self.shape[axis + 1..].iter().product();
        let mut out = vec![0.0; self.data.len()];
        for o in 0..outer {
            let base = o * steps * inner;
            for t in 0..steps {
                let src = t as isize + offset;
                if (0..steps as isize).contains(&src) {
                    let (dst, src) = (base + t * inner, base + src as usize * inner);
                    out[dst..dst + inner].copy_from_slice(&self.data[src..src + inner]);
                }
            }
        }
        Ok(Tensor::from_parts(self.shape.clone(), out))
    }

    /// Rows x last-axis view used by matmul.
    fn as_rows(&self) -> Result<(usize, usize)> {
        let k = *self
            .shape
            .last()
            .ok_or_else(|| Error::dim("matmul", "rank-0 operand"))?;
        Ok((self.data.len() / k, k))
    }
}

/// Length of the repeating block when `rhs` broadcasts over `lhs`.
pub(crate) fn broadcast_inner(lhs: &[usize], rhs: &[usize]) -> Option<usize> {
    if rhs.len() > lhs.len() || lhs[lhs.len() - rhs.len()..] != *rhs {
        return None;
    }
    Some(rhs.iter().product())
}

pub(crate) fn slot_dims(m: &Tensor, x: &Tensor) -> Result<(usize, usize, usize)> {
    let err = || Error::dim("slot_matmul", format!("{:?} applied to {:?}", m.shape, x.shape));
    if m.rank() != 2 || x.rank() < 2 {
        return Err(err());
    }
    let r = x.rank();
    let (b, d) = (x.shape[r - 2], x.shape[r - 1]);
    if m.shape[1] != b {
        return Err(err());
    }
    Ok((x.numel() / (b * d), b, d))
}

pub(crate) fn bmm_dims(a: &Tensor, b: &Tensor) -> Result<(usize, usize, usize, usize)> {
    match (&a.shape[..], &b.shape[..]) {
        (&[ba, m, k], &[bb, k2, n]) if ba == bb && k == k2 => Ok((ba, m, k, n)),
        _ => Err(Error::dim("bmm", format!("{:?} x {:?}", a.shape, b.shape))),
    }
}

/// `c = a * b + beta * c` for row-major buffers with explicit (row, col)
/// strides, so transposed operands need no copy.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    c: &mut [f64],
    beta: f64,
) {
    assert!(c.len() >= m * n);
    assert!(m == 0 || k == 0 || a.len() > (m - 1) * a_strides.0 + (k - 1) * a_strides.1);
    assert!(k == 0 || n == 0 || b.len() > (k - 1) * b_strides.0 + (n - 1) * b_strides.1);
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
