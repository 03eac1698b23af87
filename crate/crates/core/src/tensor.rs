//! Row-major dense matrices. Every reduction loops in a fixed index order so
//! results are reproducible bit for bit.

use std::fmt;
use std::ops::Range;

#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix({}x{})", self.rows, self.cols)
    }
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "{rows}x{cols} from {} values", data.len());
        Self { rows, cols, data }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// `self · other`
    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows, "matmul {:?} x {:?}", self, other);
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for j in 0..other.cols {
                let mut acc = 0.0;
                for k in 0..self.cols {
                    acc += self.get(i, k) * other.get(k, j);
                }
                out.set(i, j, acc);
            }
        }
        out
    }

    /// `selfᵀ · other`
    pub fn t_matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.rows, other.rows, "t_matmul {:?} x {:?}", self, other);
        let mut out = Matrix::zeros(self.cols, other.cols);
        for i in 0..self.cols {
            for j in 0..other.cols {
                let mut acc = 0.0;
                for k in 0..self.rows {
                    acc += self.get(k, i) * other.get(k, j);
                }
                out.set(i, j, acc);
            }
        }
        out
    }

    /// `self · otherᵀ`
    pub fn matmul_t(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.cols, "matmul_t {:?} x {:?}", self, other);
        let mut out = Matrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            for j in 0..other.rows {
                let mut acc = 0.0;
                for k in 0..self.cols {
                    acc += self.get(i, k) * other.get(j, k);
                }
                out.set(i, j, acc);
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix::from_vec(self.rows, self.cols, self.data.iter().map(|&x| f(x)).collect())
    }

    pub fn zip_map(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
        assert_eq!(self.shape(), other.shape());
        Matrix::from_vec(
            self.rows,
            self.cols,
            self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        )
    }

    pub fn add_assign(&mut self, other: &Matrix) {
        assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// `self -= lr * other`
    pub fn sgd_step(&mut self, grad: &Matrix, lr: f64) {
        assert_eq!(self.shape(), grad.shape());
        for (a, g) in self.data.iter_mut().zip(&grad.data) {
            *a -= lr * g;
        }
    }

    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    pub fn dot(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn slice_rows(&self, r: Range<usize>) -> Matrix {
        Matrix::from_vec(
            r.len(),
            self.cols,
            self.data[r.start * self.cols..r.end * self.cols].to_vec(),
        )
    }

    pub fn slice_cols(&self, c: Range<usize>) -> Matrix {
        Matrix::from_fn(self.rows, c.len(), |i, j| self.get(i, c.start + j))
    }

    pub fn vstack(parts: &[Matrix]) -> Matrix {
        let cols = parts.first().map_or(0, |p| p.cols);
        let mut data = Vec::new();
        for p in parts {
            assert_eq!(p.cols, cols);
            data.extend_from_slice(&p.data);
        }
        Matrix::from_vec(data.len() / cols.max(1), cols, data)
    }

    pub fn hstack(parts: &[Matrix]) -> Matrix {
        let rows = parts.first().map_or(0, |p| p.rows);
        let cols: usize = parts.iter().map(|p| p.cols).sum();
        let mut out = Matrix::zeros(rows, cols);
        let mut c0 = 0;
        for p in parts {
            assert_eq!(p.rows, rows);
            for i in 0..rows {
                for j in 0..p.cols {
                    out.set(i, c0 + j, p.get(i, j));
                }
            }
            c0 += p.cols;
        }
        out
    }

    /// Largest `|a-b| / max(1, |b|)` over all entries.
    pub fn max_rel_dev(&self, reference: &Matrix) -> f64 {
        assert_eq!(self.shape(), reference.shape());
        self.data
            .iter()
            .zip(&reference.data)
            .map(|(a, b)| rel_dev(*a, *b))
            .fold(0.0, f64::max)
    }
}

pub fn rel_dev(a: f64, b: f64) -> f64 {
    let d = (a - b).abs() / b.abs().max(1.0);
    if d.is_nan() {
        f64::INFINITY
    } else {
        d
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn products_agree() {
        let a = Matrix::from_fn(3, 2, |i, j| (i * 2 + j) as f64);
        let b = Matrix::from_fn(3, 4, |i, j| (i as f64) - (j as f64) * 0.5);
        let at = Matrix::from_fn(2, 3, |i, j| a.get(j, i));
        assert_eq!(a.t_matmul(&b), at.matmul(&b));
        let bt = Matrix::from_fn(4, 3, |i, j| b.get(j, i));
        assert_eq!(at.matmul_t(&bt), at.matmul(&b));
        assert_eq!(a.matmul(&Matrix::identity(2)), a);
    }

    #[test]
    fn stacking_round_trips() {
        let m = Matrix::from_fn(4, 6, |i, j| (i * 10 + j) as f64);
        let halves = [m.slice_cols(0..3), m.slice_cols(3..6)];
        assert_eq!(Matrix::hstack(&halves), m);
        let rows = [m.slice_rows(0..1), m.slice_rows(1..4)];
        assert_eq!(Matrix::vstack(&rows), m);
    }

    #[test]
    fn relative_deviation_floor() {
        assert_eq!(rel_dev(0.5, 0.0), 0.5);
        assert_eq!(rel_dev(110.0, 100.0), 0.1);
        assert_eq!(rel_dev(f64::NAN, 1.0), f64::INFINITY);
    }
}
