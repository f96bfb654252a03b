//! Dense row-major tensors and a tape-based reverse-mode autodiff graph.
//!
//! [`Tensor`] is a plain value (shape + `f64` data). Differentiable
//! computations are recorded on a [`Graph`], which hands out [`Var`] handles;
//! [`Graph::backward`] replays the tape in reverse and returns [`Gradients`].

mod check;
mod graph;

pub use check::{finite_diff_check, relative_error};
pub use graph::{AttentionLayout, Gradients, Graph, Var};

use crate::error::{Error, Result};
use rand::Rng;
use rand_distr_normal::standard_normal;

/// Dense row-major array of `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::contract(format!("tensor extents must be positive, got {shape:?}")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Dimension {
                op: "tensor",
                left: shape,
                right: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Builds a matrix from nested rows; panics on ragged input (test helper).
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self::new(vec![rows.len(), cols], data).expect("valid matrix")
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Entries drawn from N(0, std²).
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| standard_normal(rng) * std).collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Row count of a matrix, or the product of all leading dims.
    pub fn rows(&self) -> usize {
        self.data.len() / self.cols()
    }

    /// Extent of the last dimension.
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("non-empty shape")
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols() + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        let c = self.cols();
        self.data[row * c + col] = value;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::Dimension {
                op: "reshape",
                left: self.shape,
                right: shape,
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub(crate) fn require_matrix(&self, op: &'static str) -> Result<(usize, usize)> {
        if self.shape.len() != 2 {
            return Err(Error::Dimension {
                op,
                left: self.shape.clone(),
                right: vec![],
            });
        }
        Ok((self.shape[0], self.shape[1]))
    }

    /// Plain (non-recorded) matrix product.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.require_matrix("matmul")?;
        let (k2, n) = other.require_matrix("matmul")?;
        if k != k2 {
            return Err(Error::Dimension {
                op: "matmul",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul(&self.data, &other.data, &mut out, m, k, n);
        Tensor::new(vec![m, n], out)
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (m, n) = self.require_matrix("transpose")?;
        let mut out = vec![0.0; m * n];
        kernels::transpose(&self.data, &mut out, m, n);
        Tensor::new(vec![n, m], out)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::Dimension {
                op: "sub",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect(),
        })
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Keeps the listed columns (in the given order) of a matrix.
    pub fn select_cols(&self, keep: &[usize]) -> Result<Tensor> {
        let (m, n) = self.require_matrix("select_cols")?;
        if let Some(&bad) = keep.iter().find(|&&c| c >= n) {
            return Err(Error::contract(format!("column {bad} out of range for width {n}")));
        }
        let mut data = Vec::with_capacity(m * keep.len());
        for r in 0..m {
            let row = &self.data[r * n..(r + 1) * n];
            data.extend(keep.iter().map(|&c| row[c]));
        }
        Tensor::new(vec![m, keep.len()], data)
    }

    /// Keeps the listed rows (leading-index slices for vectors).
    pub fn select_rows(&self, keep: &[usize]) -> Result<Tensor> {
        if self.shape.len() == 1 {
            let n = self.shape[0];
            if let Some(&bad) = keep.iter().find(|&&c| c >= n) {
                return Err(Error::contract(format!("index {bad} out of range for length {n}")));
            }
            let data = keep.iter().map(|&i| self.data[i]).collect();
            return Tensor::new(vec![keep.len()], data);
        }
        let (m, n) = self.require_matrix("select_rows")?;
        if let Some(&bad) = keep.iter().find(|&&r| r >= m) {
            return Err(Error::contract(format!("row {bad} out of range for height {m}")));
        }
        let mut data = Vec::with_capacity(keep.len() * n);
        for &r in keep {
            data.extend_from_slice(&self.data[r * n..(r + 1) * n]);
        }
        Tensor::new(vec![keep.len(), n], data)
    }

    /// Rounds every entry through `f32`, the checkpoint storage precision.
    pub fn round_to_f32(&mut self) {
        for x in &mut self.data {
            *x = *x as f32 as f64;
        }
    }
}

pub(crate) mod kernels {
    /// out[m×n] = a[m×k] · b[k×n]; `out` must be zeroed.
    pub fn matmul(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
        for i in 0..m {
            let a_row = &a[i * k..(i + 1) * k];
            let o_row = &mut out[i * n..(i + 1) * n];
            for (p, &a_ip) in a_row.iter().enumerate() {
                if a_ip == 0.0 {
                    continue;
                }
                let b_row = &b[p * n..(p + 1) * n];
                for (o, &bv) in o_row.iter_mut().zip(b_row) {
                    *o += a_ip * bv;
                }
            }
        }
    }

    /// out[m×k] += g[m×n] · b[k×n]ᵀ
    pub fn matmul_nt_acc(g: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
        for i in 0..m {
            let g_row = &g[i * n..(i + 1) * n];
            let o_row = &mut out[i * k..(i + 1) * k];
            for (p, o) in o_row.iter_mut().enumerate() {
                let b_row = &b[p * n..(p + 1) * n];
                *o += dot(g_row, b_row);
            }
        }
    }

    /// out[k×n] += a[m×k]ᵀ · g[m×n]
    pub fn matmul_tn_acc(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
        for i in 0..m {
            let a_row = &a[i * k..(i + 1) * k];
            let g_row = &g[i * n..(i + 1) * n];
            for (p, &a_ip) in a_row.iter().enumerate() {
                if a_ip == 0.0 {
                    continue;
                }
                let o_row = &mut out[p * n..(p + 1) * n];
                for (o, &gv) in o_row.iter_mut().zip(g_row) {
                    *o += a_ip * gv;
                }
            }
        }
    }

    pub fn transpose(a: &[f64], out: &mut [f64], m: usize, n: usize) {
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = a[i * n + j];
            }
        }
    }

    #[inline]
    pub fn dot(a: &[f64], b: &[f64]) -> f64 {
        // Four accumulators, fixed order: deterministic and vectorizable.
        let mut acc = [0.0f64; 4];
        let chunks = a.len() / 4;
        for c in 0..chunks {
            let i = c * 4;
            acc[0] += a[i] * b[i];
            acc[1] += a[i + 1] * b[i + 1];
            acc[2] += a[i + 2] * b[i + 2];
            acc[3] += a[i + 3] * b[i + 3];
        }
        let mut tail = 0.0;
        for i in chunks * 4..a.len() {
            tail += a[i] * b[i];
        }
        (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
    }
}

mod rand_distr_normal {
    use rand::Rng;

    /// Box–Muller standard normal sample.
    pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
        loop {
            let u1: f64 = rng.gen();
            let u2: f64 = rng.gen();
            if u1 > f64::MIN_POSITIVE {
                return (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
            }
        }
    }
}
