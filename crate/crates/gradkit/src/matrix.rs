//! Dense row-major f64 matrices.
//!
//! Everything the training stack touches is a 2-D array: mini-batches are
//! `batch x width`, weight matrices are `out x in`, and vectors (biases,
//! batch-norm parameters) are `1 x width` rows. GEMM calls are delegated to
//! `matrixmultiply`; every other kernel is a plain loop.

use rand::Rng;

/// Dense row-major matrix of f64 values.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn full(rows: usize, cols: usize, value: f64) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(
            data.len(),
            rows * cols,
            "matrix data length {} does not match shape {}x{}",
            data.len(),
            rows,
            cols
        );
        Matrix { rows, cols, data }
    }

    /// Single row from a slice.
    pub fn row_from(values: &[f64]) -> Self {
        Matrix::from_vec(1, values.len(), values.to_vec())
    }

    /// Identity matrix.
    pub fn eye(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Entries drawn i.i.d. from U(-scale, scale).
    pub fn uniform<R: Rng>(rows: usize, cols: usize, scale: f64, rng: &mut R) -> Self {
        let data = (0..rows * cols)
            .map(|_| rng.gen_range(-scale..scale))
            .collect();
        Matrix { rows, cols, data }
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c] = v;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// self += other * scale
    pub fn add_scaled(&mut self, other: &Matrix, scale: f64) {
        assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += b * scale;
        }
    }

    /// C = A . B
    pub fn gemm_nn(a: &Matrix, b: &Matrix) -> Matrix {
        assert_eq!(a.cols, b.rows, "gemm_nn inner dims: {} vs {}", a.cols, b.rows);
        let mut c = Matrix::zeros(a.rows, b.cols);
        gemm(
            a.rows, a.cols, b.cols,
            a, a.cols as isize, 1,
            b, b.cols as isize, 1,
            &mut c, 0.0,
        );
        c
    }

    /// C = A . B^T
    pub fn gemm_nt(a: &Matrix, b: &Matrix) -> Matrix {
        assert_eq!(a.cols, b.cols, "gemm_nt inner dims: {} vs {}", a.cols, b.cols);
        let mut c = Matrix::zeros(a.rows, b.rows);
        gemm(
            a.rows, a.cols, b.rows,
            a, a.cols as isize, 1,
            b, 1, b.cols as isize,
            &mut c, 0.0,
        );
        c
    }

    /// C += A^T . B
    pub fn gemm_tn_acc(a: &Matrix, b: &Matrix, c: &mut Matrix) {
        assert_eq!(a.rows, b.rows, "gemm_tn inner dims: {} vs {}", a.rows, b.rows);
        assert_eq!(c.shape(), (a.cols, b.cols));
        gemm(
            a.cols, a.rows, b.cols,
            a, 1, a.cols as isize,
            b, b.cols as isize, 1,
            c, 1.0,
        );
    }

    /// C += A . B
    pub fn gemm_nn_acc(a: &Matrix, b: &Matrix, c: &mut Matrix) {
        assert_eq!(a.cols, b.rows);
        assert_eq!(c.shape(), (a.rows, b.cols));
        gemm(
            a.rows, a.cols, b.cols,
            a, a.cols as isize, 1,
            b, b.cols as isize, 1,
            c, 1.0,
        );
    }
}

#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &Matrix,
    rsa: isize,
    csa: isize,
    b: &Matrix,
    rsb: isize,
    csb: isize,
    c: &mut Matrix,
    beta: f64,
) {
    unsafe {
        matrixmultiply::dgemm(
            m, k, n,
            1.0,
            a.data.as_ptr(), rsa, csa,
            b.data.as_ptr(), rsb, csb,
            beta,
            c.data.as_mut_ptr(), c.cols as isize, 1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_nt_matches_hand_product() {
        // x: 2x3, w: 2x3 (out x in), x.w^T: 2x2
        let x = Matrix::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let w = Matrix::from_vec(2, 3, vec![1.0, 0.0, -1.0, 0.5, 0.5, 0.5]);
        let c = Matrix::gemm_nt(&x, &w);
        assert_eq!(c.shape(), (2, 2));
        assert_eq!(c.get(0, 0), 1.0 - 3.0);
        assert_eq!(c.get(0, 1), 0.5 * (1.0 + 2.0 + 3.0));
        assert_eq!(c.get(1, 0), 4.0 - 6.0);
        assert_eq!(c.get(1, 1), 0.5 * (4.0 + 5.0 + 6.0));
    }

    #[test]
    fn gemm_tn_accumulates() {
        let g = Matrix::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let x = Matrix::from_vec(2, 3, vec![1.0, 0.0, 2.0, 0.0, 1.0, 1.0]);
        let mut acc = Matrix::full(2, 3, 1.0);
        Matrix::gemm_tn_acc(&g, &x, &mut acc);
        // g^T.x + 1
        assert_eq!(acc.get(0, 0), 1.0 + 1.0);
        assert_eq!(acc.get(0, 1), 3.0 + 1.0);
        assert_eq!(acc.get(0, 2), 2.0 + 3.0 + 1.0);
        assert_eq!(acc.get(1, 2), 4.0 + 4.0 + 1.0);
    }

    #[test]
    fn eye_is_identity_under_gemm() {
        let x = Matrix::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let out = Matrix::gemm_nn(&x, &Matrix::eye(2));
        assert_eq!(out, x);
    }
}
