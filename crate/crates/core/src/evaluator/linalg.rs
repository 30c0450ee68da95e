//! Minimal dense row-major matrix for the desk-scale evaluator.

use crate::num::Real;

#[derive(Debug, Clone, PartialEq)]
pub struct Mat<F> {
    rows: usize,
    cols: usize,
    data: Vec<F>,
}

impl<F: Real> Mat<F> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![F::zero(); rows * cols],
        }
    }

    /// Rows of the identity: 1 on the diagonal, 0 elsewhere. Rows past the
    /// column count stay zero.
    pub fn identity_like(rows: usize, cols: usize, scale: F) -> Self {
        let mut m = Self::zeros(rows, cols);
        for r in 0..rows.min(cols) {
            m.set(r, r, scale);
        }
        m
    }

    pub fn from_row_major(rows: usize, cols: usize, data: Vec<F>) -> Option<Self> {
        (data.len() == rows * cols).then_some(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> F {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: F) {
        self.data[r * self.cols + c] = v;
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    /// `self * v` for a column vector `v` of length `cols`.
    pub fn matvec(&self, v: &[F]) -> Vec<F> {
        debug_assert_eq!(v.len(), self.cols);
        (0..self.rows)
            .map(|r| {
                let row = &self.data[r * self.cols..(r + 1) * self.cols];
                row.iter().zip(v).map(|(a, b)| *a * *b).sum()
            })
            .collect()
    }

    /// `self += scale * (col ⊗ row)` — rank-one update.
    pub fn add_outer(&mut self, col: &[F], row: &[F], scale: F) {
        debug_assert_eq!(col.len(), self.rows);
        debug_assert_eq!(row.len(), self.cols);
        for (r, cv) in col.iter().enumerate() {
            let coeff = *cv * scale;
            if coeff == F::zero() {
                continue;
            }
            let base = r * self.cols;
            for (c, rv) in row.iter().enumerate() {
                self.data[base + c] += coeff * *rv;
            }
        }
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &Self, scale: F) {
        debug_assert_eq!(self.rows, other.rows);
        debug_assert_eq!(self.cols, other.cols);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * *b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

pub fn dot<F: Real>(a: &[F], b: &[F]) -> F {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| *x * *y).sum()
}

pub fn norm<F: Real>(a: &[F]) -> F {
    dot(a, a).sqrt()
}

pub fn axpy<F: Real>(y: &mut [F], scale: F, x: &[F]) {
    debug_assert_eq!(y.len(), x.len());
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv += scale * *xv;
    }
}

/// Elementwise product.
pub fn hadamard<F: Real>(a: &[F], b: &[F]) -> Vec<F> {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| *x * *y).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matvec_and_identity() {
        let m: Mat<f64> = Mat::identity_like(2, 3, 1.0);
        assert_eq!(m.matvec(&[5.0, 6.0, 7.0]), vec![5.0, 6.0]);
        let mut m = Mat::zeros(2, 2);
        m.set(0, 1, 2.0);
        m.set(1, 0, 3.0);
        assert_eq!(m.matvec(&[1.0, 10.0]), vec![20.0, 3.0]);
    }

    #[test]
    fn outer_update_accumulates() {
        let mut m: Mat<f64> = Mat::zeros(2, 2);
        m.add_outer(&[1.0, 2.0], &[3.0, 4.0], 0.5);
        assert_eq!(m.get(0, 0), 1.5);
        assert_eq!(m.get(0, 1), 2.0);
        assert_eq!(m.get(1, 0), 3.0);
        assert_eq!(m.get(1, 1), 4.0);
    }
}
