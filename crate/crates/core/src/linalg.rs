//! Dense row-major matrices and the small set of factorizations the
//! laboratory needs: multiplication kernels for network training, a cyclic
//! Jacobi eigensolver for symmetric matrices, and a Cholesky test for
//! positive definiteness.

use crate::error::{Error, Result};

/// Dense row-major `f64` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "data length must match dimensions");
        Mat { rows, cols, data }
    }

    /// Builds a matrix from a nested-slice literal, mostly for tests.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let r = rows.len();
        let c = if r == 0 { 0 } else { rows[0].len() };
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Mat { rows: r, cols: c, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Mat {
        let mut t = Mat::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, &v| m.max(v.abs()))
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Maximum absolute asymmetry `|a_ij - a_ji|` over all pairs.
    pub fn max_asymmetry(&self) -> f64 {
        debug_assert_eq!(self.rows, self.cols);
        let mut worst = 0.0_f64;
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                worst = worst.max((self[(i, j)] - self[(j, i)]).abs());
            }
        }
        worst
    }

    /// Replaces the matrix by `(A + Aᵀ)/2`.
    pub fn symmetrize(&mut self) {
        debug_assert_eq!(self.rows, self.cols);
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                let s = 0.5 * (self[(i, j)] + self[(j, i)]);
                self[(i, j)] = s;
                self[(j, i)] = s;
            }
        }
    }
}

impl std::ops::Index<(usize, usize)> for Mat {
    type Output = f64;
    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Mat {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

/// `C += A · B` where A is m×k, B is k×n, C is m×n.
///
/// The k-inner / j-innermost loop order keeps B and C rows contiguous so the
/// compiler can vectorize the accumulation without bounds checks. Fused
/// multiply-adds are explicit; training throughput depends on them.
pub fn gemm_nn_accum(c: &mut Mat, a: &Mat, b: &Mat) {
    assert_eq!(a.cols, b.rows, "gemm_nn: inner dimensions");
    assert_eq!(c.rows, a.rows, "gemm_nn: output rows");
    assert_eq!(c.cols, b.cols, "gemm_nn: output cols");
    let n = b.cols;
    let k = a.cols;
    for i in 0..a.rows {
        let a_row = a.row(i);
        let c_row = c.row_mut(i);
        // Two k-rows per pass halve the traffic over the output row.
        let mut kk = 0;
        while kk + 1 < k {
            let a0 = a_row[kk];
            let a1 = a_row[kk + 1];
            if a0 == 0.0 && a1 == 0.0 {
                kk += 2;
                continue;
            }
            let b0 = &b.data[kk * n..(kk + 1) * n];
            let b1 = &b.data[(kk + 1) * n..(kk + 2) * n];
            for ((cv, &bv0), &bv1) in c_row.iter_mut().zip(b0).zip(b1) {
                *cv = bv1.mul_add(a1, bv0.mul_add(a0, *cv));
            }
            kk += 2;
        }
        if kk < k {
            let aik = a_row[kk];
            if aik != 0.0 {
                let b_row = &b.data[kk * n..(kk + 1) * n];
                for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                    *cv = bv.mul_add(aik, *cv);
                }
            }
        }
    }
}

/// `C = A · B`.
pub fn gemm_nn(a: &Mat, b: &Mat) -> Mat {
    let mut c = Mat::zeros(a.rows, b.cols);
    gemm_nn_accum(&mut c, a, b);
    c
}

/// `C += A · Bᵀ` where A is m×k, B is n×k, C is m×n.
///
/// Row-by-row dot products with four independent accumulators so the
/// reduction vectorizes.
pub fn gemm_nt_accum(c: &mut Mat, a: &Mat, b: &Mat) {
    assert_eq!(a.cols, b.cols, "gemm_nt: inner dimensions");
    assert_eq!(c.rows, a.rows, "gemm_nt: output rows");
    assert_eq!(c.cols, b.rows, "gemm_nt: output cols");
    for i in 0..a.rows {
        let a_row = a.row(i);
        let c_row = c.row_mut(i);
        for (j, cv) in c_row.iter_mut().enumerate() {
            *cv += dot(a_row, b.row(j));
        }
    }
}

/// Dot product with an unrolled fused reduction.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0_f64; 4];
    let chunks = a.len() / 4;
    let (a4, a_tail) = a.split_at(chunks * 4);
    let (b4, b_tail) = b.split_at(chunks * 4);
    for (ca, cb) in a4.chunks_exact(4).zip(b4.chunks_exact(4)) {
        acc[0] = ca[0].mul_add(cb[0], acc[0]);
        acc[1] = ca[1].mul_add(cb[1], acc[1]);
        acc[2] = ca[2].mul_add(cb[2], acc[2]);
        acc[3] = ca[3].mul_add(cb[3], acc[3]);
    }
    let mut total = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (&av, &bv) in a_tail.iter().zip(b_tail) {
        total = av.mul_add(bv, total);
    }
    total
}

/// `C += Aᵀ · B` where A is k×m, B is k×n, C is m×n.
///
/// Rank-one updates per row of A and B; the innermost loop streams rows of
/// B into rows of C.
pub fn gemm_tn_accum(c: &mut Mat, a: &Mat, b: &Mat) {
    assert_eq!(a.rows, b.rows, "gemm_tn: inner dimensions");
    assert_eq!(c.rows, a.cols, "gemm_tn: output rows");
    assert_eq!(c.cols, b.cols, "gemm_tn: output cols");
    let n = b.cols;
    let k = a.rows;
    let mut kk = 0;
    while kk < k {
        if kk + 1 < k {
            let a0_row = &a.data[kk * c.rows..(kk + 1) * c.rows];
            let a1_row = &a.data[(kk + 1) * c.rows..(kk + 2) * c.rows];
            let b0 = &b.data[kk * n..(kk + 1) * n];
            let b1 = &b.data[(kk + 1) * n..(kk + 2) * n];
            for i in 0..c.rows {
                let a0 = a0_row[i];
                let a1 = a1_row[i];
                if a0 == 0.0 && a1 == 0.0 {
                    continue;
                }
                let c_row = &mut c.data[i * n..(i + 1) * n];
                for ((cv, &bv0), &bv1) in c_row.iter_mut().zip(b0).zip(b1) {
                    *cv = bv1.mul_add(a1, bv0.mul_add(a0, *cv));
                }
            }
            kk += 2;
        } else {
            let a_row = a.row(kk);
            let b_row = &b.data[kk * n..(kk + 1) * n];
            for (i, &aki) in a_row.iter().enumerate() {
                if aki == 0.0 {
                    continue;
                }
                let c_row = &mut c.data[i * n..(i + 1) * n];
                for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                    *cv = bv.mul_add(aki, *cv);
                }
            }
            kk += 1;
        }
    }
}

/// `y = A · x` for a vector x.
pub fn matvec(a: &Mat, x: &[f64]) -> Vec<f64> {
    assert_eq!(a.cols, x.len(), "matvec: dimensions");
    let mut y = vec![0.0; a.rows];
    for (i, yv) in y.iter_mut().enumerate() {
        let row = a.row(i);
        let mut acc = 0.0;
        for (&av, &xv) in row.iter().zip(x) {
            acc += av * xv;
        }
        *yv = acc;
    }
    y
}

/// Result of a symmetric eigendecomposition: `A = Vᵀ · diag(λ) · V` with the
/// rows of `V` holding unit eigenvectors, eigenvalues sorted descending.
#[derive(Debug, Clone)]
pub struct SymEigen {
    pub eigenvalues: Vec<f64>,
    /// Row i is the eigenvector for `eigenvalues[i]`.
    pub eigenvectors: Mat,
}

const JACOBI_MAX_SWEEPS: usize = 64;

/// Cyclic Jacobi eigensolver for symmetric matrices.
///
/// Rotations annihilate off-diagonal entries until the off-diagonal norm
/// falls below `1e-14 · ‖A‖_F`. Accuracy is uniform over the spectrum, which
/// matters for the near-zero eigenvalues the clamp rule inspects.
pub fn jacobi_eigen_sym(matrix: &Mat) -> Result<SymEigen> {
    if matrix.rows != matrix.cols {
        return Err(Error::Dimension(format!(
            "eigendecomposition needs a square matrix, got {}x{}",
            matrix.rows, matrix.cols
        )));
    }
    if !matrix.is_finite() {
        return Err(Error::NonFinite("eigendecomposition input".into()));
    }
    let n = matrix.rows;
    if n == 0 {
        return Err(Error::Dimension("empty matrix".into()));
    }

    let mut a = matrix.clone();
    let mut v = Mat::identity(n);
    let fro = a.frobenius_norm();
    let tol = if fro > 0.0 { 1e-14 * fro } else { 0.0 };

    for _sweep in 0..JACOBI_MAX_SWEEPS {
        let mut off = 0.0_f64;
        for p in 0..n {
            for q in (p + 1)..n {
                off += a[(p, q)] * a[(p, q)];
            }
        }
        if off.sqrt() <= tol {
            return Ok(collect_sorted(a, v));
        }

        for p in 0..n - 1 {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if apq.abs() <= tol * 1e-2 / (n as f64) {
                    continue;
                }
                let app = a[(p, p)];
                let aqq = a[(q, q)];
                // Stable rotation angle, Golub & Van Loan style.
                let theta = 0.5 * (aqq - app) / apq;
                let t = if theta >= 0.0 {
                    1.0 / (theta + (1.0 + theta * theta).sqrt())
                } else {
                    1.0 / (theta - (1.0 + theta * theta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;

                // A <- Jᵀ A J applied to rows/cols p and q.
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
                // Accumulate the rotation into the eigenvector rows.
                for k in 0..n {
                    let vpk = v[(p, k)];
                    let vqk = v[(q, k)];
                    v[(p, k)] = c * vpk - s * vqk;
                    v[(q, k)] = s * vpk + c * vqk;
                }
            }
        }
    }
    Err(Error::NoConvergence(JACOBI_MAX_SWEEPS))
}

fn collect_sorted(a: Mat, v: Mat) -> SymEigen {
    let n = a.rows;
    let mut order: Vec<usize> = (0..n).collect();
    let diag: Vec<f64> = (0..n).map(|i| a[(i, i)]).collect();
    order.sort_by(|&i, &j| diag[j].partial_cmp(&diag[i]).unwrap());

    let mut eigenvalues = Vec::with_capacity(n);
    let mut eigenvectors = Mat::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        eigenvalues.push(diag[src]);
        eigenvectors.row_mut(dst).copy_from_slice(v.row(src));
    }
    SymEigen {
        eigenvalues,
        eigenvectors,
    }
}

/// Random orthogonal matrix with orthonormal rows, from modified
/// Gram–Schmidt on a standard-normal matrix (re-orthogonalized once).
pub fn random_orthogonal(n: usize, rng: &mut crate::rng::Stream) -> Mat {
    let mut m = Mat::zeros(n, n);
    for v in m.data_mut() {
        *v = crate::rng::standard_normal(rng);
    }
    for _pass in 0..2 {
        for i in 0..n {
            for j in 0..i {
                let proj = dot(m.row(i), m.row(j));
                let (head, tail) = m.data_mut().split_at_mut(i * n);
                let row_j = &head[j * n..(j + 1) * n];
                let row_i = &mut tail[..n];
                for (a, &b) in row_i.iter_mut().zip(row_j) {
                    *a -= proj * b;
                }
            }
            let norm = dot(m.row(i), m.row(i)).sqrt();
            for v in m.row_mut(i) {
                *v /= norm;
            }
        }
    }
    m
}

/// Attempts a Cholesky factorization; `Ok(true)` means positive definite.
///
/// A pivot at or below `pivot_tol` reports not-positive-definite rather
/// than an error, so the caller can use this directly as a PD test.
pub fn cholesky_is_pd(matrix: &Mat, pivot_tol: f64) -> Result<bool> {
    if matrix.rows != matrix.cols {
        return Err(Error::Dimension("cholesky needs a square matrix".into()));
    }
    if !matrix.is_finite() {
        return Err(Error::NonFinite("cholesky input".into()));
    }
    let n = matrix.rows;
    let mut l = vec![0.0; n * n];
    for j in 0..n {
        let mut d = matrix[(j, j)];
        for k in 0..j {
            d -= l[j * n + k] * l[j * n + k];
        }
        if d <= pivot_tol {
            return Ok(false);
        }
        let dj = d.sqrt();
        l[j * n + j] = dj;
        for i in (j + 1)..n {
            let mut s = matrix[(i, j)];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            l[i * n + j] = s / dj;
        }
    }
    Ok(true)
}
