//! Row-major `f64` matrices used on the numeric paths (losses, gradients,
//! matching). Feature grids store `f32`; everything downstream of them is
//! widened so finite-difference checks stay meaningful.

use crate::grid::{FeatureGrid, NORM_EPS};

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_grid(grid: &FeatureGrid) -> Self {
        Self {
            rows: grid.cells(),
            cols: grid.dim(),
            data: grid.data().iter().map(|&v| f64::from(v)).collect(),
        }
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// Normalizes every row in place and returns the pre-normalization norms.
    /// Rows with norm below [`NORM_EPS`] become zero.
    pub fn normalize_rows(&mut self) -> Vec<f64> {
        let mut norms = Vec::with_capacity(self.rows);
        for i in 0..self.rows {
            let row = self.row_mut(i);
            let n = norm(row);
            if n < NORM_EPS {
                row.iter_mut().for_each(|v| *v = 0.0);
            } else {
                row.iter_mut().for_each(|v| *v /= n);
            }
            norms.push(n);
        }
        norms
    }

    pub fn normalized(mut self) -> Self {
        self.normalize_rows();
        self
    }

    pub fn add_assign(&mut self, other: &Matrix) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[inline]
pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Scaled logits `<a, b_v> / tau` for every row of `b`.
pub(crate) fn logits_into(a: &[f64], b: &Matrix, tau: f64, out: &mut [f64]) {
    for (v, o) in out.iter_mut().enumerate() {
        *o = dot(a, b.row(v)) / tau;
    }
}

/// Turns logits into probabilities in place (max-subtracted) and writes the
/// log-probabilities into `log_p`.
pub(crate) fn softmax_in_place(logits: &mut [f64], log_p: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (l, lp) in logits.iter_mut().zip(log_p.iter_mut()) {
        *lp = *l - max;
        *l = lp.exp();
        sum += *l;
    }
    let log_sum = sum.ln();
    for (p, lp) in logits.iter_mut().zip(log_p.iter_mut()) {
        *p /= sum;
        *lp -= log_sum;
    }
}

/// Backprop through `y = x / |x|`: returns `(I - y y^T) g / |x|`, zero when
/// the row was clamped by the norm guard.
pub(crate) fn normalize_backward(y: &[f64], norm: f64, g: &[f64], out: &mut [f64]) {
    if norm < NORM_EPS {
        out.iter_mut().for_each(|o| *o = 0.0);
        return;
    }
    let proj = dot(y, g);
    for ((o, &yi), &gi) in out.iter_mut().zip(y).zip(g) {
        *o = (gi - proj * yi) / norm;
    }
}
