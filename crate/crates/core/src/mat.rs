//! Dense row-major matrix and vector helpers.
//!
//! Deliberately small: the estimator needs dense rectangular storage, a
//! handful of products, block copies, and row/column surgery. Products
//! report their multiply-adds to the flop counter.

use crate::flops;
use crate::scalar::Scalar;
use std::ops::{Index, IndexMut};

#[derive(Clone, PartialEq)]
pub struct Mat<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Mat<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat { rows, cols, data: vec![T::zero(); rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = T::one();
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut m = Mat::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m[(i, j)] = f(i, j);
            }
        }
        m
    }

    pub fn from_rows(rows: &[&[T]]) -> Self {
        let r = rows.len();
        let c = if r == 0 { 0 } else { rows[0].len() };
        let mut m = Mat::zeros(r, c);
        for (i, row) in rows.iter().enumerate() {
            assert_eq!(row.len(), c, "ragged rows");
            m.row_mut(i).copy_from_slice(row);
        }
        m
    }

    pub fn col_vec(v: &[T]) -> Self {
        let mut m = Mat::zeros(v.len(), 1);
        for (i, &x) in v.iter().enumerate() {
            m[(i, 0)] = x;
        }
        m
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn col(&self, j: usize) -> Vec<T> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn transpose(&self) -> Mat<T> {
        Mat::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    /// self * b
    pub fn mul(&self, b: &Mat<T>) -> Mat<T> {
        assert_eq!(self.cols, b.rows, "mul dims");
        let mut out = Mat::zeros(self.rows, b.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == T::zero() {
                    continue;
                }
                let brow = b.row(k);
                let orow = out.row_mut(i);
                for j in 0..brow.len() {
                    orow[j] = orow[j] + a * brow[j];
                }
            }
        }
        flops::add_fma((self.rows * self.cols * b.cols) as u64);
        out
    }

    /// self^T * b
    pub fn tr_mul(&self, b: &Mat<T>) -> Mat<T> {
        assert_eq!(self.rows, b.rows, "tr_mul dims");
        let mut out = Mat::zeros(self.cols, b.cols);
        for k in 0..self.rows {
            let arow = self.row(k);
            let brow = b.row(k);
            for i in 0..self.cols {
                let a = arow[i];
                if a == T::zero() {
                    continue;
                }
                let orow = out.row_mut(i);
                for j in 0..brow.len() {
                    orow[j] = orow[j] + a * brow[j];
                }
            }
        }
        flops::add_fma((self.rows * self.cols * b.cols) as u64);
        out
    }

    /// self * b^T
    pub fn mul_tr(&self, b: &Mat<T>) -> Mat<T> {
        assert_eq!(self.cols, b.cols, "mul_tr dims");
        let mut out = Mat::zeros(self.rows, b.rows);
        for i in 0..self.rows {
            let arow = self.row(i);
            for j in 0..b.rows {
                out[(i, j)] = dot(arow, b.row(j));
            }
        }
        flops::add_fma((self.rows * self.cols * b.rows) as u64);
        out
    }

    pub fn mul_vec(&self, v: &[T]) -> Vec<T> {
        assert_eq!(self.cols, v.len(), "mul_vec dims");
        flops::add_fma((self.rows * self.cols) as u64);
        (0..self.rows).map(|i| dot(self.row(i), v)).collect()
    }

    pub fn tr_mul_vec(&self, v: &[T]) -> Vec<T> {
        assert_eq!(self.rows, v.len(), "tr_mul_vec dims");
        let mut out = vec![T::zero(); self.cols];
        for i in 0..self.rows {
            let a = v[i];
            if a == T::zero() {
                continue;
            }
            let row = self.row(i);
            for j in 0..self.cols {
                out[j] = out[j] + a * row[j];
            }
        }
        flops::add_fma((self.rows * self.cols) as u64);
        out
    }

    pub fn add(&self, b: &Mat<T>) -> Mat<T> {
        assert_eq!((self.rows, self.cols), (b.rows, b.cols));
        let mut out = self.clone();
        for (x, y) in out.data.iter_mut().zip(&b.data) {
            *x = *x + *y;
        }
        out
    }

    pub fn sub(&self, b: &Mat<T>) -> Mat<T> {
        assert_eq!((self.rows, self.cols), (b.rows, b.cols));
        let mut out = self.clone();
        for (x, y) in out.data.iter_mut().zip(&b.data) {
            *x = *x - *y;
        }
        out
    }

    pub fn scale(&self, s: T) -> Mat<T> {
        let mut out = self.clone();
        for x in out.data.iter_mut() {
            *x = *x * s;
        }
        out
    }

    pub fn block(&self, i0: usize, j0: usize, r: usize, c: usize) -> Mat<T> {
        assert!(i0 + r <= self.rows && j0 + c <= self.cols, "block out of range");
        Mat::from_fn(r, c, |i, j| self[(i0 + i, j0 + j)])
    }

    pub fn set_block(&mut self, i0: usize, j0: usize, m: &Mat<T>) {
        assert!(i0 + m.rows <= self.rows && j0 + m.cols <= self.cols, "set_block range");
        for i in 0..m.rows {
            for j in 0..m.cols {
                self[(i0 + i, j0 + j)] = m[(i, j)];
            }
        }
    }

    pub fn vstack(&self, b: &Mat<T>) -> Mat<T> {
        assert_eq!(self.cols, b.cols, "vstack cols");
        let mut out = Mat::zeros(self.rows + b.rows, self.cols);
        out.data[..self.data.len()].copy_from_slice(&self.data);
        out.data[self.data.len()..].copy_from_slice(&b.data);
        out
    }

    pub fn hstack(&self, b: &Mat<T>) -> Mat<T> {
        assert_eq!(self.rows, b.rows, "hstack rows");
        Mat::from_fn(self.rows, self.cols + b.cols, |i, j| {
            if j < self.cols {
                self[(i, j)]
            } else {
                b[(i, j - self.cols)]
            }
        })
    }

    /// Remove the column index set (sorted, unique).
    pub fn remove_cols(&self, cols: &[usize]) -> Mat<T> {
        debug_assert!(cols.windows(2).all(|w| w[0] < w[1]));
        let keep: Vec<usize> = (0..self.cols).filter(|j| !cols.contains(j)).collect();
        Mat::from_fn(self.rows, keep.len(), |i, j| self[(i, keep[j])])
    }

    pub fn remove_rows(&self, rows: &[usize]) -> Mat<T> {
        debug_assert!(rows.windows(2).all(|w| w[0] < w[1]));
        let keep: Vec<usize> = (0..self.rows).filter(|i| !rows.contains(i)).collect();
        Mat::from_fn(keep.len(), self.cols, |i, j| self[(keep[i], j)])
    }

    pub fn take_rows(&self, rows: std::ops::Range<usize>) -> Mat<T> {
        self.block(rows.start, 0, rows.len(), self.cols)
    }

    /// Insert `count` zero columns starting at `at`.
    pub fn insert_zero_cols(&self, at: usize, count: usize) -> Mat<T> {
        assert!(at <= self.cols);
        Mat::from_fn(self.rows, self.cols + count, |i, j| {
            if j < at {
                self[(i, j)]
            } else if j < at + count {
                T::zero()
            } else {
                self[(i, j - count)]
            }
        })
    }

    pub fn norm_fro(&self) -> T {
        self.data.iter().map(|x| *x * *x).sum::<T>().sqrt()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, x| m.max(x.abs()))
    }

    pub fn is_upper_triangular(&self) -> bool {
        for i in 1..self.rows {
            for j in 0..i.min(self.cols) {
                if self[(i, j)] != T::zero() {
                    return false;
                }
            }
        }
        true
    }

    pub fn symmetrize(&self) -> Mat<T> {
        assert_eq!(self.rows, self.cols);
        let half = T::of(0.5);
        Mat::from_fn(self.rows, self.cols, |i, j| (self[(i, j)] + self[(j, i)]) * half)
    }

    pub fn map<U: Scalar>(&self, f: impl Fn(T) -> U) -> Mat<U> {
        Mat::from_fn(self.rows, self.cols, |i, j| f(self[(i, j)]))
    }

    pub fn rel_err(&self, reference: &Mat<T>) -> f64 {
        let denom = reference.norm_fro().f64().max(1.0e-300);
        self.sub(reference).norm_fro().f64() / denom
    }
}

impl<T: Scalar> Index<(usize, usize)> for Mat<T> {
    type Output = T;
    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &T {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl<T: Scalar> IndexMut<(usize, usize)> for Mat<T> {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut T {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

impl<T: Scalar> std::fmt::Debug for Mat<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "Mat {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows.min(12) {
            write!(f, "  ")?;
            for j in 0..self.cols.min(12) {
                write!(f, "{:>12.5e} ", self[(i, j)])?;
            }
            writeln!(f)?;
        }
        write!(f, "]")
    }
}

#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut s = T::zero();
    for i in 0..a.len() {
        s = s + a[i] * b[i];
    }
    s
}

#[inline]
pub fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    debug_assert_eq!(x.len(), y.len());
    for i in 0..x.len() {
        y[i] = y[i] + alpha * x[i];
    }
}

pub fn norm2<T: Scalar>(v: &[T]) -> T {
    dot(v, v).sqrt()
}

pub fn sub_vec<T: Scalar>(a: &[T], b: &[T]) -> Vec<T> {
    a.iter().zip(b).map(|(x, y)| *x - *y).collect()
}

pub fn add_vec<T: Scalar>(a: &[T], b: &[T]) -> Vec<T> {
    a.iter().zip(b).map(|(x, y)| *x + *y).collect()
}

pub fn scale_vec<T: Scalar>(a: &[T], s: T) -> Vec<T> {
    a.iter().map(|x| *x * s).collect()
}
