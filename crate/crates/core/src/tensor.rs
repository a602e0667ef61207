//! Row-major dense matrices and the handful of matmul kernels the model needs.
//!
//! Every kernel accumulates each output element over the contraction index in
//! ascending order, starting from zero. Computing a sub-block of an output
//! therefore yields bitwise the same values as computing the whole output and
//! slicing it, which is what lets a partial backward pass reproduce the full
//! backward pass exactly on the entries it keeps.

use std::ops::Range;

/// A dense row-major `rows × cols` matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "Mat::from_vec: length mismatch");
        Self { rows, cols, data }
    }

    pub fn from_slice(rows: usize, cols: usize, data: &[f64]) -> Self {
        Self::from_vec(rows, cols, data.to_vec())
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Mat {
        transpose(&self.data, self.rows, self.cols)
    }

    /// Copy of the column band `cols`.
    pub fn col_block(&self, cols: Range<usize>) -> Mat {
        let w = cols.len();
        let mut out = Mat::zeros(self.rows, w);
        for r in 0..self.rows {
            out.row_mut(r)
                .copy_from_slice(&self.row(r)[cols.start..cols.end]);
        }
        out
    }

    /// Copy of the row band `rows`.
    pub fn row_block(&self, rows: Range<usize>) -> Mat {
        Mat::from_slice(
            rows.len(),
            self.cols,
            &self.data[rows.start * self.cols..rows.end * self.cols],
        )
    }

    pub fn max_abs_diff(&self, other: &Mat) -> f64 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Mat {
    let mut out = Mat::zeros(cols, rows);
    for r in 0..rows {
        for c in 0..cols {
            out.data[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

#[inline]
fn axpy(y: &mut [f64], alpha: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `C = A · B` with `A: m×k`, `B: k×n`.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Mat {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut c = Mat::zeros(m, n);
    for i in 0..m {
        let ci = &mut c.data[i * n..(i + 1) * n];
        let ai = &a[i * k..(i + 1) * k];
        for (p, &aip) in ai.iter().enumerate() {
            axpy(ci, aip, &b[p * n..(p + 1) * n]);
        }
    }
    c
}

/// `C = A · B` restricted to the contraction indices in `ks` (ascending, in
/// the order given). Used for the detached input Jacobians.
pub fn matmul_partial_k(
    a: &[f64],
    b: &[f64],
    m: usize,
    k: usize,
    n: usize,
    ks: &[Range<usize>],
) -> Mat {
    let mut c = Mat::zeros(m, n);
    for i in 0..m {
        let ci = &mut c.data[i * n..(i + 1) * n];
        for range in ks {
            for p in range.clone() {
                axpy(ci, a[i * k + p], &b[p * n..(p + 1) * n]);
            }
        }
    }
    c
}

/// Block of `Aᵀ · B` with `A: k×m`, `B: k×n`, restricted to output rows
/// `rows` and output columns `cols`. Returns a dense `rows.len() × cols.len()`
/// block.
pub fn matmul_tn_block(
    a: &[f64],
    b: &[f64],
    k: usize,
    m: usize,
    n: usize,
    rows: Range<usize>,
    cols: Range<usize>,
) -> Mat {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    let w = cols.len();
    let mut c = Mat::zeros(rows.len(), w);
    for p in 0..k {
        let bp = &b[p * n + cols.start..p * n + cols.end];
        for (ri, i) in rows.clone().enumerate() {
            axpy(&mut c.data[ri * w..(ri + 1) * w], a[p * m + i], bp);
        }
    }
    c
}

/// Full `Aᵀ · B`.
pub fn matmul_tn(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Mat {
    matmul_tn_block(a, b, k, m, n, 0..m, 0..n)
}

/// `C = A · Bᵀ` with `A: m×k`, `B: n×k`.
pub fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Mat {
    let bt = transpose(b, n, k);
    matmul(a, &bt.data, m, k, n)
}
