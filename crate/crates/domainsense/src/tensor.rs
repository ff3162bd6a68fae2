//! Dense row-major `f64` tensors.
//!
//! Every value flowing through the toolkit — inputs, activations, Jacobians,
//! covariance matrices — is a [`Tensor`]: a shape plus a flat `Vec<f64>` in
//! row-major order.  Rank 0 (scalar), rank 1 (vector), and rank 2 (matrix)
//! cover everything the models need; operations check ranks and extents and
//! report mismatches instead of panicking.
//!
//! All arithmetic is plain `f64`.  Nothing here is clever: the point of this
//! module is to be an obviously correct substrate for the differentiation
//! tape built on top of it.

use crate::error::{Error, Result};

/// Dense row-major tensor of `f64` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor from a shape and row-major data.
    ///
    /// Fails if the data length does not equal the product of the extents.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if data.len() != expect {
            return Err(Error::dimension(
                "Tensor::new",
                format!("shape {:?} wants {} values, got {}", shape, expect, data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    /// Rank-0 tensor holding a single value.
    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![], data: vec![value] }
    }

    /// Rank-1 tensor from a vector of values.
    pub fn vector(data: Vec<f64>) -> Self {
        Tensor { shape: vec![data.len()], data }
    }

    /// Rank-2 tensor from row-major data.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    /// All-zero tensor of the given shape.
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; len] }
    }

    /// Tensor of the given shape filled with `value`.
    pub fn full(shape: &[usize], value: f64) -> Self {
        let len = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; len] }
    }

    /// Shape as a slice of extents.
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    /// Number of stored values.
    pub fn len(&self) -> usize {
        self.data.len()
    }

    /// True when the tensor holds no values (some extent is zero).
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// True for rank-0 tensors and single-element rank-1/2 tensors.
    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Flat row-major view of the values.
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable flat view of the values.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// The single value of a one-element tensor.
    pub fn scalar_value(&self) -> Result<f64> {
        if !self.is_scalar() {
            return Err(Error::Contract(format!(
                "expected a scalar tensor, got shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    /// Number of rows of a rank-2 tensor.
    pub fn rows(&self) -> Result<usize> {
        self.require_rank2("rows").map(|(r, _)| r)
    }

    /// Number of columns of a rank-2 tensor.
    pub fn cols(&self) -> Result<usize> {
        self.require_rank2("cols").map(|(_, c)| c)
    }

    fn require_rank2(&self, context: &str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::dimension(context, format!("expected a matrix, got shape {:?}", other))),
        }
    }

    fn require_rank1(&self, context: &str) -> Result<usize> {
        match self.shape.as_slice() {
            [n] => Ok(*n),
            other => Err(Error::dimension(context, format!("expected a vector, got shape {:?}", other))),
        }
    }

    /// Value at `(row, col)` of a rank-2 tensor.
    pub fn at(&self, row: usize, col: usize) -> f64 {
        let cols = self.shape[1];
        self.data[row * cols + col]
    }

    /// Sets the value at `(row, col)` of a rank-2 tensor.
    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        let cols = self.shape[1];
        self.data[row * cols + col] = value;
    }

    /// One row of a rank-2 tensor as a slice.
    pub fn row(&self, row: usize) -> &[f64] {
        let cols = self.shape[1];
        &self.data[row * cols..(row + 1) * cols]
    }

    /// Reinterprets the values under a new shape with the same element count.
    pub fn reshape(&self, shape: Vec<usize>) -> Result<Tensor> {
        Tensor::new(shape, self.data.clone())
    }

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (m, k) = self.require_rank2("matmul lhs")?;
        let (k2, n) = rhs.require_rank2("matmul rhs")?;
        if k != k2 {
            return Err(Error::dimension(
                "matmul",
                format!("inner extents differ: {:?} vs {:?}", self.shape, rhs.shape),
            ));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let rhs_row = &rhs.data[p * n..(p + 1) * n];
                let out_row = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    out_row[j] += a * rhs_row[j];
                }
            }
        }
        Tensor::matrix(m, n, out)
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose(&self) -> Result<Tensor> {
        let (m, n) = self.require_rank2("transpose")?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor::matrix(n, m, out)
    }

    /// Matrix-vector product of a rank-2 tensor with a rank-1 tensor.
    pub fn matvec(&self, v: &Tensor) -> Result<Tensor> {
        let (m, n) = self.require_rank2("matvec lhs")?;
        let vn = v.require_rank1("matvec rhs")?;
        if n != vn {
            return Err(Error::dimension(
                "matvec",
                format!("matrix {:?} against vector of length {}", self.shape, vn),
            ));
        }
        let mut out = vec![0.0; m];
        for i in 0..m {
            let row = &self.data[i * n..(i + 1) * n];
            out[i] = row.iter().zip(v.data.iter()).map(|(a, b)| a * b).sum();
        }
        Ok(Tensor::vector(out))
    }

    fn zip_map(&self, rhs: &Tensor, context: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != rhs.shape {
            return Err(Error::dimension(
                context,
                format!("shapes differ: {:?} vs {:?}", self.shape, rhs.shape),
            ));
        }
        let data = self
            .data
            .iter()
            .zip(rhs.data.iter())
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Tensor { shape: self.shape.clone(), data })
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        self.zip_map(rhs, "add", |a, b| a + b)
    }

    /// Elementwise difference of two same-shape tensors.
    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        self.zip_map(rhs, "sub", |a, b| a - b)
    }

    /// Elementwise product of two same-shape tensors.
    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        self.zip_map(rhs, "mul", |a, b| a * b)
    }

    /// Applies `f` to every value.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&a| f(a)).collect(),
        }
    }

    /// Multiplies every value by `c`.
    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|a| a * c)
    }

    /// Adds `c` to every value.
    pub fn add_scalar(&self, c: f64) -> Tensor {
        self.map(|a| a + c)
    }

    /// Adds a length-`n` vector to every row of an `m x n` matrix.
    pub fn add_row_broadcast(&self, row: &Tensor) -> Result<Tensor> {
        let (m, n) = self.require_rank2("add_row_broadcast lhs")?;
        let rn = row.require_rank1("add_row_broadcast rhs")?;
        if n != rn {
            return Err(Error::dimension(
                "add_row_broadcast",
                format!("matrix {:?} against row of length {}", self.shape, rn),
            ));
        }
        let mut data = self.data.clone();
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] += row.data[j];
            }
        }
        Tensor::matrix(m, n, data)
    }

    /// Column sums of an `m x n` matrix, as a length-`n` vector.
    pub fn sum_rows(&self) -> Result<Tensor> {
        let (m, n) = self.require_rank2("sum_rows")?;
        let mut out = vec![0.0; n];
        for i in 0..m {
            for j in 0..n {
                out[j] += self.data[i * n + j];
            }
        }
        Ok(Tensor::vector(out))
    }

    /// Row sums of an `m x n` matrix, as a length-`m` vector.
    pub fn row_sums(&self) -> Result<Tensor> {
        let (m, n) = self.require_rank2("row_sums")?;
        let mut out = vec![0.0; m];
        for i in 0..m {
            out[i] = self.data[i * n..(i + 1) * n].iter().sum();
        }
        Ok(Tensor::vector(out))
    }

    /// Repeats a length-`n` vector as the rows of an `m x n` matrix.
    pub fn broadcast_rows(&self, m: usize) -> Result<Tensor> {
        let n = self.require_rank1("broadcast_rows")?;
        let mut data = Vec::with_capacity(m * n);
        for _ in 0..m {
            data.extend_from_slice(&self.data);
        }
        Tensor::matrix(m, n, data)
    }

    /// Repeats a length-`m` vector as the columns of an `m x n` matrix.
    pub fn broadcast_cols(&self, n: usize) -> Result<Tensor> {
        let m = self.require_rank1("broadcast_cols")?;
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            for _ in 0..n {
                data.push(self.data[i]);
            }
        }
        Tensor::matrix(m, n, data)
    }

    /// Multiplies row `i` of an `m x n` matrix by the `i`-th entry of a
    /// length-`m` vector.
    pub fn mul_col_broadcast(&self, col: &Tensor) -> Result<Tensor> {
        let (m, n) = self.require_rank2("mul_col_broadcast lhs")?;
        let cm = col.require_rank1("mul_col_broadcast rhs")?;
        if m != cm {
            return Err(Error::dimension(
                "mul_col_broadcast",
                format!("matrix {:?} against column of length {}", self.shape, cm),
            ));
        }
        let mut data = self.data.clone();
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] *= col.data[i];
            }
        }
        Tensor::matrix(m, n, data)
    }

    /// Sum of all values, as a rank-0 tensor.
    pub fn sum_all(&self) -> Tensor {
        Tensor::scalar(self.data.iter().sum())
    }

    /// Broadcasts a one-element tensor to the given shape.
    pub fn broadcast_scalar(&self, shape: &[usize]) -> Result<Tensor> {
        let v = self.scalar_value()?;
        Ok(Tensor::full(shape, v))
    }

    /// Rectified linear unit, with value 0 at 0.
    pub fn relu(&self) -> Tensor {
        self.map(|a| if a > 0.0 { a } else { 0.0 })
    }

    /// Subgradient mask of the rectified linear unit: 1 where the input is
    /// strictly positive, 0 elsewhere (including exactly at 0).
    pub fn relu_mask(&self) -> Tensor {
        self.map(|a| if a > 0.0 { 1.0 } else { 0.0 })
    }

    /// Elementwise hyperbolic tangent.
    pub fn tanh(&self) -> Tensor {
        self.map(f64::tanh)
    }

    /// Row-wise softmax of an `m x c` matrix, computed with the row maximum
    /// subtracted for numerical stability.
    pub fn softmax_rows(&self) -> Result<Tensor> {
        let (m, c) = self.require_rank2("softmax_rows")?;
        let mut data = vec![0.0; m * c];
        for i in 0..m {
            let row = &self.data[i * c..(i + 1) * c];
            let hi = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..c {
                let e = (row[j] - hi).exp();
                data[i * c + j] = e;
                z += e;
            }
            for j in 0..c {
                data[i * c + j] /= z;
            }
        }
        Tensor::matrix(m, c, data)
    }

    /// Row-wise `log(sum(exp(.)))` of an `m x c` matrix, as a length-`m`
    /// vector, computed with the row maximum subtracted.
    pub fn log_sum_exp_rows(&self) -> Result<Tensor> {
        let (m, c) = self.require_rank2("log_sum_exp_rows")?;
        let mut out = vec![0.0; m];
        for i in 0..m {
            let row = &self.data[i * c..(i + 1) * c];
            let hi = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|&v| (v - hi).exp()).sum();
            out[i] = hi + z.ln();
        }
        Ok(Tensor::vector(out))
    }

    /// Picks entry `labels[i]` from row `i` of an `m x c` matrix.
    pub fn select_labels(&self, labels: &[usize]) -> Result<Tensor> {
        let (m, c) = self.require_rank2("select_labels")?;
        if labels.len() != m {
            return Err(Error::dimension(
                "select_labels",
                format!("{} rows but {} labels", m, labels.len()),
            ));
        }
        let mut out = vec![0.0; m];
        for i in 0..m {
            if labels[i] >= c {
                return Err(Error::Data(format!(
                    "label {} out of range for {} classes (row {})",
                    labels[i], c, i
                )));
            }
            out[i] = self.data[i * c + labels[i]];
        }
        Ok(Tensor::vector(out))
    }

    /// Inverse of [`Tensor::select_labels`]: scatters a length-`m` vector
    /// into an `m x c` matrix that is zero except at `(i, labels[i])`.
    pub fn scatter_labels(&self, labels: &[usize], classes: usize) -> Result<Tensor> {
        let m = self.require_rank1("scatter_labels")?;
        if labels.len() != m {
            return Err(Error::dimension(
                "scatter_labels",
                format!("{} values but {} labels", m, labels.len()),
            ));
        }
        let mut data = vec![0.0; m * classes];
        for i in 0..m {
            if labels[i] >= classes {
                return Err(Error::Data(format!(
                    "label {} out of range for {} classes (row {})",
                    labels[i], classes, i
                )));
            }
            data[i * classes + labels[i]] = self.data[i];
        }
        Tensor::matrix(m, classes, data)
    }

    /// Dot product with another tensor of the same shape.
    pub fn dot(&self, rhs: &Tensor) -> Result<f64> {
        if self.shape != rhs.shape {
            return Err(Error::dimension(
                "dot",
                format!("shapes differ: {:?} vs {:?}", self.shape, rhs.shape),
            ));
        }
        Ok(self.data.iter().zip(rhs.data.iter()).map(|(&a, &b)| a * b).sum())
    }

    /// Largest absolute value, 0 for empty tensors.
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |acc, &v| acc.max(v.abs()))
    }

    /// Sum of squared values.
    pub fn squared_norm(&self) -> f64 {
        self.data.iter().map(|&v| v * v).sum()
    }

    /// True when every value is finite.
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
