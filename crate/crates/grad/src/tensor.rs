//! Dense row-major f64 tensors of rank 0, 1 or 2.
//!
//! This is deliberately small: the propagation model only ever needs
//! scalars, vectors and matrices, and everything runs in 64-bit floating
//! point so that numeric oracles can use tight tolerances.

use std::fmt;

/// A dense tensor. Rank 0 is a scalar (empty shape), rank 1 a vector,
/// rank 2 a row-major matrix.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        let expect: usize = shape.iter().product();
        assert!(
            expect == data.len(),
            "tensor shape {:?} requires {} elements, got {}",
            shape,
            expect,
            data.len()
        );
        Tensor { shape, data }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        Self::new(vec![rows, cols], data)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn ones(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![1.0; n],
        }
    }

    pub fn zeros_like(other: &Tensor) -> Self {
        Tensor {
            shape: other.shape.clone(),
            data: vec![0.0; other.data.len()],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self::matrix(rows, cols, data)
    }

    /// Identity matrix scaled by `diag`.
    pub fn eye(n: usize, diag: f64) -> Self {
        Self::from_fn(n, n, |i, j| if i == j { diag } else { 0.0 })
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

    /// Row count for rank-2 tensors; a rank-1 tensor counts as one row.
    pub fn rows(&self) -> usize {
        match self.rank() {
            2 => self.shape[0],
            1 => 1,
            _ => panic!("rows() on tensor of shape {:?}", self.shape),
        }
    }

    /// Column count for rank-2 tensors; rank-1 tensors are a single row.
    pub fn cols(&self) -> usize {
        match self.rank() {
            2 => self.shape[1],
            1 => self.shape[0],
            _ => panic!("cols() on tensor of shape {:?}", self.shape),
        }
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn item(&self) -> f64 {
        assert!(
            self.data.len() == 1,
            "item() on tensor of shape {:?}",
            self.shape
        );
        self.data[0]
    }

    pub fn get2(&self, i: usize, j: usize) -> f64 {
        debug_assert_eq!(self.rank(), 2);
        self.data[i * self.shape[1] + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        debug_assert_eq!(self.rank(), 2);
        let c = self.shape[1];
        &self.data[i * c..(i + 1) * c]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        assert!(
            self.shape == other.shape,
            "shape mismatch in zip_map: {:?} vs {:?}",
            self.shape,
            other.shape
        );
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    /// In-place elementwise accumulation.
    pub fn accumulate(&mut self, other: &Tensor) {
        assert!(
            self.shape == other.shape,
            "shape mismatch in accumulate: {:?} vs {:?}",
            self.shape,
            other.shape
        );
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn transpose2(&self) -> Tensor {
        assert_eq!(self.rank(), 2, "transpose on shape {:?}", self.shape);
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::matrix(c, r, out)
    }

    /// Plain (non-differentiated) matrix product, also used by backward rules.
    pub fn matmul2(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.rank(), 2, "matmul lhs shape {:?}", self.shape);
        assert_eq!(other.rank(), 2, "matmul rhs shape {:?}", other.shape);
        let (m, k) = (self.shape[0], self.shape[1]);
        let (k2, n) = (other.shape[0], other.shape[1]);
        assert!(
            k == k2,
            "shape mismatch in matmul: {:?} vs {:?}",
            self.shape,
            other.shape
        );
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let lhs_row = &self.data[i * k..(i + 1) * k];
            let out_row = &mut out[i * n..(i + 1) * n];
            for (p, &a) in lhs_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let rhs_row = &other.data[p * n..(p + 1) * n];
                for (o, &b) in out_row.iter_mut().zip(rhs_row) {
                    *o += a * b;
                }
            }
        }
        Tensor::matrix(m, n, out)
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.data.len() <= 16 {
            write!(f, "Tensor{:?} {:?}", self.shape, self.data)
        } else {
            write!(
                f,
                "Tensor{:?} [{} elements, first {:?} ...]",
                self.shape,
                self.data.len(),
                &self.data[..8]
            )
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_matches_hand_computation() {
        let a = Tensor::matrix(2, 3, vec![1., 2., 3., 4., 5., 6.]);
        let b = Tensor::matrix(3, 2, vec![7., 8., 9., 10., 11., 12.]);
        let c = a.matmul2(&b);
        assert_eq!(c.data(), &[58., 64., 139., 154.]);
    }

    #[test]
    #[should_panic(expected = "shape mismatch in matmul")]
    fn matmul_shape_mismatch_names_both_shapes() {
        let a = Tensor::matrix(2, 3, vec![0.; 6]);
        let b = Tensor::matrix(2, 2, vec![0.; 4]);
        let _ = a.matmul2(&b);
    }

    #[test]
    fn transpose_round_trip() {
        let a = Tensor::matrix(2, 3, vec![1., 2., 3., 4., 5., 6.]);
        assert_eq!(a.transpose2().transpose2(), a);
    }
}
