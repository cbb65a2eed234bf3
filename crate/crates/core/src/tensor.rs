//! Dense row-major tensors and the value-level primitives the model is built from.
//!
//! Everything here is double precision. Shapes are rank 1 (vectors) or rank 2
//! (matrices); scalars are rank-1 tensors of length one.

use std::fmt;

use crate::error::{Error, Result};

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, checking that the shape matches the data length and
    /// that every entry is finite.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::invalid(format!(
                "tensor dimensions must be positive, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape("tensor", &shape, &[data.len()]));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("tensor construction".into()));
        }
        Ok(Tensor { shape, data })
    }

    /// Caller guarantees the shape/length contract; used on hot paths whose
    /// outputs are checked for finiteness afterwards.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::invalid("empty vector"));
        }
        Tensor::new(vec![data.len()], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map(Vec::len).unwrap_or(0);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::invalid("ragged rows"));
        }
        Tensor::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn scalar(value: f64) -> Result<Self> {
        Tensor::new(vec![1], vec![value])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor::from_parts(shape.to_vec(), vec![0.0; n])
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor::from_parts(shape.to_vec(), vec![value; n])
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access to the entries. Shape is fixed.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn is_vector(&self) -> bool {
        self.shape.len() == 1
    }

    pub fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }

    pub fn rows(&self) -> usize {
        if self.is_matrix() {
            self.shape[0]
        } else {
            1
        }
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&0)
    }

    pub fn row(&self, k: usize) -> &[f64] {
        let c = self.cols();
        &self.data[k * c..(k + 1) * c]
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        match index {
            [i] => self.data[*i],
            [i, j] => self.data[i * self.cols() + j],
            _ => panic!("unsupported index rank {}", index.len()),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshaped(&self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.len() {
            return Err(Error::shape("reshape", &self.shape, shape));
        }
        Ok(Tensor::from_parts(shape.to_vec(), self.data.clone()))
    }

    pub fn transposed(&self) -> Result<Tensor> {
        let (r, c) = self.as_matrix("transpose")?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Tensor::from_parts(vec![c, r], out))
    }

    pub fn l2_norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub(crate) fn as_matrix(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::shape(op, &self.shape, &[0, 0])),
        }
    }

    pub(crate) fn as_vector(&self, op: &'static str) -> Result<usize> {
        match self.shape[..] {
            [n] => Ok(n),
            _ => Err(Error::shape(op, &self.shape, &[0])),
        }
    }

    pub(crate) fn check_finite(self, op: &str) -> Result<Tensor> {
        if self.is_finite() {
            Ok(self)
        } else {
            Err(Error::NonFinite(op.to_string()))
        }
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOWN: usize = 8;
        write!(f, "Tensor{:?}[", self.shape)?;
        for (i, v) in self.data.iter().take(SHOWN).enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{v:.6}")?;
        }
        if self.data.len() > SHOWN {
            write!(f, ", ...")?;
        }
        write!(f, "]")
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Shift-stable softmax over a slice. Empty input is rejected.
///
/// Entries that would underflow to zero (score gaps beyond ~745) are floored
/// at the smallest normal `f64`, so every output is strictly positive.
pub(crate) fn softmax_slice(x: &[f64]) -> Result<Vec<f64>> {
    if x.is_empty() {
        return Err(Error::invalid("softmax of an empty vector"));
    }
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for v in &mut out {
        *v = (*v / sum).max(f64::MIN_POSITIVE);
    }
    Ok(out)
}

/// `log(sum(exp(x)))`, computed with the max subtracted.
pub(crate) fn log_sum_exp(x: &[f64]) -> f64 {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub fn softmax(x: &Tensor) -> Result<Tensor> {
    x.as_vector("softmax")?;
    let out = softmax_slice(x.data())?;
    Tensor::from_parts(x.shape.clone(), out).check_finite("softmax")
}

pub fn outer_product(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let m = a.as_vector("outer_product")?;
    let n = b.as_vector("outer_product")?;
    let mut out = Vec::with_capacity(m * n);
    for &ai in a.data() {
        out.extend(b.data().iter().map(|&bj| ai * bj));
    }
    Tensor::from_parts(vec![m, n], out).check_finite("outer_product")
}

/// `W·x + b`. When `x` is a `K×n` matrix the map is applied to each row,
/// producing `K×m`.
pub fn affine(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    let (m, n) = w.as_matrix("affine")?;
    if x.cols() != n || x.rank() > 2 {
        return Err(Error::shape("affine", w.shape(), x.shape()));
    }
    if let Some(b) = b {
        if b.shape() != [m] {
            return Err(Error::shape("affine bias", w.shape(), b.shape()));
        }
    }
    let rows = x.rows();
    let mut out = vec![0.0; rows * m];
    for k in 0..rows {
        let xr = x.row(k);
        let yr = &mut out[k * m..(k + 1) * m];
        for (i, y) in yr.iter_mut().enumerate() {
            *y = dot(&w.data[i * n..(i + 1) * n], xr);
        }
        if let Some(b) = b {
            for (y, bi) in yr.iter_mut().zip(b.data()) {
                *y += bi;
            }
        }
    }
    let shape = if x.is_matrix() {
        vec![rows, m]
    } else {
        vec![m]
    };
    Tensor::from_parts(shape, out).check_finite("affine")
}

pub fn mean_over_rows(m: &Tensor) -> Result<Tensor> {
    let (k, d) = m.as_matrix("mean_over_rows")?;
    let mut out = vec![0.0; d];
    for r in 0..k {
        for (o, v) in out.iter_mut().zip(m.row(r)) {
            *o += v;
        }
    }
    let inv = 1.0 / k as f64;
    out.iter_mut().for_each(|v| *v *= inv);
    Ok(Tensor::from_parts(vec![d], out))
}
