//! Minimal dense matrix used by the model. Row-major, generic over the
//! scalar type.

use crate::rng::SplitMix64;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn gaussian(rows: usize, cols: usize, std: f64, rng: &mut SplitMix64) -> Self {
        let data = (0..rows * cols)
            .map(|_| T::from_f64(rng.next_gaussian() * std))
            .collect();
        Self { rows, cols, data }
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    /// self (m×k) · other (k×n) -> m×n.
    pub fn matmul(&self, other: &Matrix<T>) -> Matrix<T> {
        assert_eq!(self.cols, other.rows);
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let a_row = self.row(i);
            let out_row = out.row_mut(i);
            for (kk, &a) in a_row.iter().enumerate() {
                if a == T::zero() {
                    continue;
                }
                let b_row = other.row(kk);
                for (o, &b) in out_row.iter_mut().zip(b_row.iter()) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// self (m×k) · other^T (n×k) -> m×n.
    pub fn matmul_transpose(&self, other: &Matrix<T>) -> Matrix<T> {
        assert_eq!(self.cols, other.cols);
        let mut out = Matrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a_row = self.row(i);
            for j in 0..other.rows {
                let b_row = other.row(j);
                let mut acc = T::zero();
                for (&a, &b) in a_row.iter().zip(b_row.iter()) {
                    acc += a * b;
                }
                out.set(i, j, acc);
            }
        }
        out
    }

    /// out += self^T (k×m)^T=(m-major) ... accumulates self^T · other into `out`:
    /// self is (n×m), other is (n×k), out is (m×k).
    pub fn accumulate_t_matmul(&self, other: &Matrix<T>, out: &mut Matrix<T>) {
        assert_eq!(self.rows, other.rows);
        assert_eq!(out.rows, self.cols);
        assert_eq!(out.cols, other.cols);
        for n in 0..self.rows {
            let a_row = self.row(n);
            let b_row = other.row(n);
            for (m, &a) in a_row.iter().enumerate() {
                if a == T::zero() {
                    continue;
                }
                let out_row = out.row_mut(m);
                for (o, &b) in out_row.iter_mut().zip(b_row.iter()) {
                    *o += a * b;
                }
            }
        }
    }

    pub fn add_assign(&mut self, other: &Matrix<T>) {
        assert_eq!(self.data.len(), other.data.len());
        for (a, &b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += b;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn to_f64(&self) -> Matrix<f64> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| x.as_f64()).collect(),
        }
    }
}

/// In-place softmax over a slice, numerically stabilized.
pub fn softmax_in_place<T: Scalar>(xs: &mut [T]) {
    let mut max = xs[0];
    for &x in xs.iter() {
        if x > max {
            max = x;
        }
    }
    let mut sum = T::zero();
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in xs.iter_mut() {
        *x /= sum;
    }
}

/// log(softmax(xs)[target]) without materializing the softmax.
pub fn log_softmax_at<T: Scalar>(xs: &[T], target: usize) -> T {
    let mut max = xs[0];
    for &x in xs.iter() {
        if x > max {
            max = x;
        }
    }
    let mut sum = T::zero();
    for &x in xs.iter() {
        sum += (x - max).exp();
    }
    xs[target] - max - sum.ln()
}

pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b.iter()) {
        acc += x * y;
    }
    acc
}
