//! Covariance estimation, symmetric eigendecomposition, and PCA whitening.
//!
//! The spectrum of the data covariance matrix is the quantity the collapse
//! criterion consumes: its largest eigenvalue is the critical decoder
//! variance.

use crate::error::{Error, Result};
use crate::linalg::{gemm_nt_accum, gemm_tn_accum, jacobi_eigen_sym, Mat};

/// Relative symmetry tolerance for eigendecomposition inputs.
const SYMMETRY_TOL: f64 = 1e-9;
/// Eigenvalues below `CLAMP_REL · λ_max` in magnitude are treated as exactly
/// zero: the data lies in a subspace.
const CLAMP_REL: f64 = 1e-10;

/// A sample matrix: one sample per row, `M ≥ 2` rows, `N ≥ 1` finite columns.
#[derive(Debug, Clone, PartialEq)]
pub struct DataMatrix {
    values: Mat,
}

impl DataMatrix {
    pub fn new(values: Mat) -> Result<Self> {
        if values.rows() < 2 {
            return Err(Error::Dimension(format!(
                "a data matrix needs at least 2 samples, got {}",
                values.rows()
            )));
        }
        if values.cols() < 1 {
            return Err(Error::Dimension("a data matrix needs at least 1 column".into()));
        }
        if !values.is_finite() {
            return Err(Error::NonFinite("data matrix".into()));
        }
        Ok(DataMatrix { values })
    }

    pub fn from_vec(samples: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(Mat::from_vec(samples, dim, data))
    }

    /// Number of samples M.
    pub fn samples(&self) -> usize {
        self.values.rows()
    }

    /// Data dimension N.
    pub fn dim(&self) -> usize {
        self.values.cols()
    }

    pub fn matrix(&self) -> &Mat {
        &self.values
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.values.row(i)
    }
}

/// Eigenvalues and orthonormal basis of a data covariance matrix.
///
/// `eigenvalues[i]` is the variance along the principal direction stored in
/// row `i` of `basis`; eigenvalues are sorted descending and clamped
/// nonnegative. `mean` is the per-coordinate data mean used for whitening.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    pub eigenvalues: Vec<f64>,
    pub basis: Mat,
    pub mean: Vec<f64>,
}

impl Spectrum {
    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    /// Largest eigenvalue; the collapse criterion compares σ'² against this.
    pub fn max_eigenvalue(&self) -> f64 {
        self.eigenvalues.first().copied().unwrap_or(0.0)
    }

    /// Sum of eigenvalues, equal to Tr(Σ).
    pub fn trace(&self) -> f64 {
        self.eigenvalues.iter().sum()
    }
}

/// Per-coordinate mean and population covariance (1/M normalization).
///
/// The 1/M convention keeps Tr(Σ) equal to the mean squared deviation that
/// appears in the collapsed-extremum ELBO value, so reference lines match
/// empirical averages exactly.
pub fn estimate_covariance(data: &DataMatrix) -> Result<(Vec<f64>, Mat)> {
    let m = data.samples();
    let n = data.dim();
    if m < 2 {
        return Err(Error::Dimension("covariance needs at least 2 samples".into()));
    }

    let mut mean = vec![0.0; n];
    for i in 0..m {
        for (mv, &x) in mean.iter_mut().zip(data.row(i)) {
            *mv += x;
        }
    }
    for mv in mean.iter_mut() {
        *mv /= m as f64;
    }

    let mut centered = Mat::zeros(m, n);
    for i in 0..m {
        let row = centered.row_mut(i);
        for ((c, &x), &mu) in row.iter_mut().zip(data.row(i)).zip(&mean) {
            *c = x - mu;
        }
    }

    let mut cov = Mat::zeros(n, n);
    gemm_tn_accum(&mut cov, &centered, &centered);
    let inv_m = 1.0 / m as f64;
    for v in cov.data_mut() {
        *v *= inv_m;
    }
    cov.symmetrize();
    Ok((mean, cov))
}

/// Eigendecomposition of a symmetric nonnegative-definite matrix.
///
/// The mean of the returned spectrum is zero; use [`spectrum_of`] to carry
/// the data mean through for whitening. Eigenvector rows have their first
/// nonzero component nonnegative so output is reproducible.
pub fn eigendecompose_symmetric(matrix: &Mat) -> Result<Spectrum> {
    if matrix.rows() != matrix.cols() {
        return Err(Error::Dimension(format!(
            "expected square matrix, got {}x{}",
            matrix.rows(),
            matrix.cols()
        )));
    }
    if !matrix.is_finite() {
        return Err(Error::NonFinite("symmetric matrix".into()));
    }
    let scale = matrix.max_abs();
    let sym_tol = SYMMETRY_TOL * scale;
    let asym = matrix.max_asymmetry();
    if asym > sym_tol {
        return Err(Error::NotSymmetric {
            asymmetry: asym,
            tolerance: sym_tol,
        });
    }

    let mut work = matrix.clone();
    work.symmetrize();
    let eig = jacobi_eigen_sym(&work)?;

    let lambda_max = eig.eigenvalues.first().copied().unwrap_or(0.0).max(0.0);
    let clamp = CLAMP_REL * lambda_max;
    let mut eigenvalues = Vec::with_capacity(eig.eigenvalues.len());
    for &l in &eig.eigenvalues {
        if l < -clamp {
            return Err(Error::NegativeEigenvalue {
                value: l,
                threshold: clamp,
            });
        }
        eigenvalues.push(if l.abs() <= clamp { 0.0 } else { l });
    }

    let mut basis = eig.eigenvectors;
    fix_signs(&mut basis);

    Ok(Spectrum {
        eigenvalues,
        basis,
        mean: vec![0.0; matrix.rows()],
    })
}

/// First nonzero component of each eigenvector made nonnegative.
fn fix_signs(basis: &mut Mat) {
    let n = basis.cols();
    for i in 0..basis.rows() {
        let row = basis.row_mut(i);
        let lead = (0..n).find(|&j| row[j].abs() > 1e-12);
        if let Some(j) = lead {
            if row[j] < 0.0 {
                for v in row.iter_mut() {
                    *v = -*v;
                }
            }
        }
    }
}

/// Full pipeline: covariance of `data`, eigendecomposed, with the data mean
/// attached.
pub fn spectrum_of(data: &DataMatrix) -> Result<Spectrum> {
    let (mean, cov) = estimate_covariance(data)?;
    let mut spec = eigendecompose_symmetric(&cov)?;
    spec.mean = mean;
    Ok(spec)
}

/// PCA whitening: rotate into the principal basis and rescale each direction
/// to unit variance, `x̃_i = Σ_j U_ij (x_j − ⟨x_j⟩)/ξ_i`.
pub fn whiten(data: &DataMatrix, spectrum: &Spectrum) -> Result<DataMatrix> {
    let n = data.dim();
    if spectrum.dim() != n || spectrum.mean.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "spectrum dimension {} does not match data dimension {}",
            spectrum.dim(),
            n
        )));
    }
    if let Some(idx) = spectrum.eigenvalues.iter().position(|&l| l <= 0.0) {
        return Err(Error::DegenerateDirection { index: idx });
    }

    let m = data.samples();
    let mut centered = Mat::zeros(m, n);
    for i in 0..m {
        let row = centered.row_mut(i);
        for ((c, &x), &mu) in row.iter_mut().zip(data.row(i)).zip(&spectrum.mean) {
            *c = x - mu;
        }
    }

    // Row r of the output is centered_r · Uᵀ, then column i divided by ξ_i.
    let mut rotated = Mat::zeros(m, n);
    gemm_nt_accum(&mut rotated, &centered, &spectrum.basis);
    let inv_xi: Vec<f64> = spectrum.eigenvalues.iter().map(|&l| 1.0 / l.sqrt()).collect();
    for i in 0..m {
        for (v, &s) in rotated.row_mut(i).iter_mut().zip(&inv_xi) {
            *v *= s;
        }
    }
    DataMatrix::new(rotated)
}
