//! Dense row-major tensors of `f64` and the raw kernels the graph is built on.

use serde::{Deserialize, Serialize};
use std::fmt;

use crate::error::TensorError;

/// Dense array with an explicit shape. `data.len()` always equals the
/// product of `shape`.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, "{:?}", self.data)?;
        }
        Ok(())
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::DataLength {
                shape,
                len: data.len(),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    /// Builds an `rows × cols` matrix from nested rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, TensorError> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(TensorError::Ragged);
            }
            data.extend_from_slice(row);
        }
        Ok(Tensor {
            shape: vec![rows.len(), cols],
            data,
        })
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

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    /// Number of rows when viewed as a matrix (leading dimension).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            _ => self.shape[0],
        }
    }

    /// Elements per row when viewed as a matrix.
    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            _ => self.shape[1..].iter().product(),
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    /// Scalar value of a single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self, TensorError> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                left: self.shape,
                right: shape,
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale_assign(&mut self, c: f64) {
        for a in &mut self.data {
            *a *= c;
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        let (m, k) = as_matrix("matmul", self)?;
        let (k2, n) = as_matrix("matmul", other)?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let mut out = vec![0.0; m * n];
        kernel::matmul(&self.data, &other.data, &mut out, m, k, n);
        Tensor::new(vec![m, n], out)
    }

    pub fn transpose(&self) -> Result<Tensor, TensorError> {
        let (m, n) = as_matrix("transpose", self)?;
        let mut out = vec![0.0; m * n];
        kernel::transpose(&self.data, &mut out, m, n);
        Tensor::new(vec![n, m], out)
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&self) -> Tensor {
        let c = self.cols();
        let mut out = self.data.clone();
        if c > 0 {
            for row in out.chunks_mut(c) {
                kernel::softmax_in_place(row);
            }
        }
        Tensor {
            shape: self.shape.clone(),
            data: out,
        }
    }
}

pub(crate) fn as_matrix(op: &'static str, t: &Tensor) -> Result<(usize, usize), TensorError> {
    if t.shape.len() != 2 {
        return Err(TensorError::RankMismatch {
            op,
            expected: 2,
            shape: t.shape.clone(),
        });
    }
    Ok((t.shape[0], t.shape[1]))
}

/// Logistic function in the saturating `0.5 * (1 + tanh(x / 2))` form.
pub fn sigmoid(x: f64) -> f64 {
    0.5 * (1.0 + (0.5 * x).tanh())
}

pub(crate) mod kernel {
    /// `out[m×n] = a[m×k] · b[k×n]`.
    pub fn matmul(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
        out.iter_mut().for_each(|x| *x = 0.0);
        for i in 0..m {
            let out_row = &mut out[i * n..(i + 1) * n];
            let a_row = &a[i * k..(i + 1) * k];
            for (p, &av) in a_row.iter().enumerate() {
                if av == 0.0 {
                    continue;
                }
                let b_row = &b[p * n..(p + 1) * n];
                for (o, &bv) in out_row.iter_mut().zip(b_row) {
                    *o += av * bv;
                }
            }
        }
    }

    /// `out[m×n] += a[m×k] · b[n×k]ᵀ`.
    pub fn matmul_nt_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
        let mut bt = vec![0.0; k * n];
        transpose(b, &mut bt, n, k);
        for i in 0..m {
            let out_row = &mut out[i * n..(i + 1) * n];
            let a_row = &a[i * k..(i + 1) * k];
            for (p, &av) in a_row.iter().enumerate() {
                if av == 0.0 {
                    continue;
                }
                let b_row = &bt[p * n..(p + 1) * n];
                for (o, &bv) in out_row.iter_mut().zip(b_row) {
                    *o += av * bv;
                }
            }
        }
    }

    /// `out[m×n] += a[k×m]ᵀ · b[k×n]`.
    pub fn matmul_tn_acc(a: &[f64], b: &[f64], out: &mut [f64], k: usize, m: usize, n: usize) {
        for p in 0..k {
            let a_row = &a[p * m..(p + 1) * m];
            let b_row = &b[p * n..(p + 1) * n];
            for (i, &av) in a_row.iter().enumerate() {
                if av == 0.0 {
                    continue;
                }
                let out_row = &mut out[i * n..(i + 1) * n];
                for (o, &bv) in out_row.iter_mut().zip(b_row) {
                    *o += av * bv;
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

    pub fn softmax_in_place(row: &mut [f64]) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            sum += *x;
        }
        for x in row.iter_mut() {
            *x /= sum;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(a.matmul(&Tensor::identity(2)).unwrap(), a);
    }

    #[test]
    fn matmul_row_times_column() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![3.0], vec![4.0]]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), &[1, 1]);
        assert_eq!(c.data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let err = a.matmul(&Tensor::zeros(&[2, 3])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
        assert!(matches!(err, TensorError::ShapeMismatch { .. }));
    }

    #[test]
    fn softmax_examples() {
        let t = Tensor::from_rows(&[vec![0.0, 0.0], vec![1000.0, 0.0]]).unwrap();
        let s = t.softmax_rows();
        assert_eq!(s.row(0), &[0.5, 0.5]);
        assert!((s.row(1)[0] - 1.0).abs() < 1e-12);
        assert!(s.row(1)[1].abs() < 1e-12);
        assert!(s.all_finite());
    }

    #[test]
    fn sigmoid_saturates() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!((sigmoid(500.0) - 1.0).abs() < 1e-12);
        assert!(sigmoid(-500.0) >= 0.0);
    }

    #[test]
    fn data_length_checked() {
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
    }
}
