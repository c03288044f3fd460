//! Stability analysis of the collapsed extremum.
//!
//! Perturbations of the decoder mean and the encoder statistics around the
//! trivial solution expand in probabilists' Hermite polynomials; the
//! quadratic form of the second variation becomes an explicit block matrix
//! whose Schur complement is diagonal with entries `σ'² − ξ_i²`. Its
//! positive definiteness is exactly the collapse criterion, and this module
//! checks the analytic diagonal against a numeric factorization of the
//! assembled matrix.

use crate::error::{Error, Result};
use crate::linalg::{cholesky_is_pd, jacobi_eigen_sym, Mat};
use crate::spectrum::Spectrum;
use serde::{Deserialize, Serialize};

/// Largest side allowed for the numerically assembled block matrix; beyond
/// this the verdict relies on the analytic diagonal alone.
pub const MAX_NUMERIC_SIDE: usize = 4096;

/// Outcome of the positive-definiteness test at one `σ'²`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StabilityReport {
    pub sigma2: f64,
    pub eigenvalues_xi2: Vec<f64>,
    /// `σ'² − ξ_i²`, one entry per data dimension (repeated across latent
    /// blocks in the full matrix, stored once).
    pub schur_diagonal: Vec<f64>,
    pub positive_definite: bool,
    pub min_schur_entry: f64,
    /// Whether the numeric factorization route also ran (matrix within the
    /// size cap) and agreed.
    pub numeric_check: bool,
}

/// Probabilists' Hermite polynomial `H_n(x)` by upward recurrence
/// `H_{n+1}(x) = x·H_n(x) − n·H_{n−1}(x)`, with `H_0 = 1`, `H_1 = x`.
pub fn hermite_eval(order: i32, x: f64) -> Result<f64> {
    if order < 0 {
        return Err(Error::InvalidParameter(format!(
            "Hermite order must be nonnegative, got {order}"
        )));
    }
    let n = order as usize;
    if n == 0 {
        return Ok(1.0);
    }
    let mut prev = 1.0; // H_0
    let mut cur = x; // H_1
    for k in 1..n {
        let next = x * cur - k as f64 * prev;
        prev = cur;
        cur = next;
    }
    Ok(cur)
}

/// Gauss–Hermite nodes and weights for the standard normal weight
/// `φ(x) = e^{−x²/2}/√(2π)`.
///
/// Golub–Welsch on the Jacobi matrix of the monic recurrence
/// `x·H_n = H_{n+1} + n·H_{n−1}`: zero diagonal, off-diagonal `√k`. Because
/// the weight is already normalized (`∫φ = 1`), the weights are the squared
/// first eigenvector components with no further change of variables, and
/// they sum to one.
pub fn gauss_hermite_rule(points: usize) -> Result<Vec<(f64, f64)>> {
    if points == 0 {
        return Err(Error::InvalidParameter("quadrature needs at least one point".into()));
    }
    let mut jacobi = Mat::zeros(points, points);
    for k in 1..points {
        let b = (k as f64).sqrt();
        jacobi[(k - 1, k)] = b;
        jacobi[(k, k - 1)] = b;
    }
    let eig = jacobi_eigen_sym(&jacobi)?;
    let mut rule: Vec<(f64, f64)> = (0..points)
        .map(|i| {
            let node = eig.eigenvalues[i];
            let first = eig.eigenvectors[(i, 0)];
            (node, first * first)
        })
        .collect();
    rule.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    Ok(rule)
}

/// Quadrature estimate of `∫ H_m(x) H_n(x) φ(x) dx`, which equals `n!·δ_mn`.
pub fn hermite_orthogonality_check(m: i32, n: i32, quadrature_points: usize) -> Result<f64> {
    if m < 0 || n < 0 {
        return Err(Error::InvalidParameter("Hermite orders must be nonnegative".into()));
    }
    if m > 10 || n > 10 {
        return Err(Error::InvalidParameter(
            "orthogonality check limited to orders ≤ 10 (factorial growth)".into(),
        ));
    }
    let needed = 2 * m.max(n) as usize + 1;
    if quadrature_points < needed {
        return Err(Error::InvalidParameter(format!(
            "insufficient quadrature points: got {quadrature_points}, need at least {needed}"
        )));
    }
    let rule = gauss_hermite_rule(quadrature_points)?;
    let mut acc = 0.0;
    for (x, w) in rule {
        acc += w * hermite_eval(m, x)? * hermite_eval(n, x)?;
    }
    Ok(acc)
}

fn validate_sigma2(sigma2: f64) -> Result<()> {
    if !(sigma2 > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "decoder variance must be positive, got {sigma2}"
        )));
    }
    Ok(())
}

/// Assembles the symmetric `2Nn × 2Nn` second-variation block matrix
///
/// ```text
/// M = σ'⁻² ·  ( I_Nn                −I_n ⊗ (Uᵀ·Λ) )
///             ( −[I_n ⊗ (Uᵀ·Λ)]ᵀ    σ'²·I_Nn      )
/// ```
///
/// with `Λ = diag(ξ_1, …, ξ_N)` the square roots of the spectrum's
/// eigenvalues. The printed σ'⁻² prefactor is kept; positive definiteness is
/// unaffected by it.
pub fn build_stability_matrix(spectrum: &Spectrum, sigma2: f64, n_latent: usize) -> Result<Mat> {
    validate_sigma2(sigma2)?;
    if n_latent < 1 {
        return Err(Error::InvalidParameter("latent dimension must be at least 1".into()));
    }
    let n = spectrum.dim();
    if n == 0 {
        return Err(Error::InvalidParameter("empty spectrum".into()));
    }
    if let Some(&bad) = spectrum.eigenvalues.iter().find(|&&l| l < 0.0) {
        return Err(Error::NegativeEigenvalue {
            value: bad,
            threshold: 0.0,
        });
    }
    let block = n * n_latent;
    let side = 2 * block;
    if side > MAX_NUMERIC_SIDE {
        return Err(Error::Dimension(format!(
            "stability matrix side 2·N·n = {side} exceeds the numeric cap {MAX_NUMERIC_SIDE}; \
             use the analytic Schur diagonal instead"
        )));
    }

    let xi: Vec<f64> = spectrum.eigenvalues.iter().map(|&l| l.sqrt()).collect();
    // k_block = Uᵀ·Λ, with rows of `basis` holding the principal directions.
    let mut k_block = Mat::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            k_block[(i, j)] = spectrum.basis[(j, i)] * xi[j];
        }
    }

    let inv_s2 = 1.0 / sigma2;
    let mut m = Mat::zeros(side, side);
    for i in 0..block {
        m[(i, i)] = inv_s2;
        m[(block + i, block + i)] = 1.0;
    }
    // Kronecker structure: latent block b occupies rows/cols b·N .. (b+1)·N.
    for b in 0..n_latent {
        let off = b * n;
        for i in 0..n {
            for j in 0..n {
                let v = -inv_s2 * k_block[(i, j)];
                m[(off + i, block + off + j)] = v;
                m[(block + off + j, off + i)] = v;
            }
        }
    }
    Ok(m)
}

/// Analytic Schur complement diagonal of the stability matrix:
/// `σ'² − ξ_i²` for each data dimension, independent of the latent
/// dimension and of the basis.
pub fn schur_complement_diag(spectrum: &Spectrum, sigma2: f64) -> Result<Vec<f64>> {
    validate_sigma2(sigma2)?;
    Ok(spectrum.eigenvalues.iter().map(|&xi2| sigma2 - xi2).collect())
}

/// Positive-definiteness verdict computed two ways: the analytic Schur
/// diagonal and a numeric Cholesky of the assembled matrix. The two routes
/// must agree (a smallest-eigenvalue check arbitrates within `1e-9` of the
/// boundary); disagreement is reported as an internal error.
pub fn stability_verdict(spectrum: &Spectrum, sigma2: f64, n_latent: usize) -> Result<StabilityReport> {
    let schur = schur_complement_diag(spectrum, sigma2)?;
    if n_latent < 1 {
        return Err(Error::InvalidParameter("latent dimension must be at least 1".into()));
    }
    let min_schur = schur.iter().copied().fold(f64::INFINITY, f64::min);
    let analytic_pd = min_schur > 0.0;

    let side = 2 * spectrum.dim() * n_latent;
    let mut numeric_check = false;
    if side <= MAX_NUMERIC_SIDE {
        let m = build_stability_matrix(spectrum, sigma2, n_latent)?;
        let pivot_tol = 1e-12 * m.max_abs();
        let numeric_pd = cholesky_is_pd(&m, pivot_tol)?;
        if numeric_pd != analytic_pd {
            // Arbitrate with the smallest eigenvalue: exactly-critical
            // spectra sit on the boundary where the two routes may split on
            // rounding.
            let eig = jacobi_eigen_sym(&m)?;
            let min_eig = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
            let boundary_tol = 1e-9 * m.max_abs().max(1.0);
            if min_eig.abs() > boundary_tol && min_schur.abs() > boundary_tol {
                return Err(Error::Internal(format!(
                    "analytic PD test ({analytic_pd}) disagrees with numeric Cholesky \
                     ({numeric_pd}); min Schur entry {min_schur:.3e}, min eigenvalue {min_eig:.3e}"
                )));
            }
        }
        numeric_check = true;
    }

    Ok(StabilityReport {
        sigma2,
        eigenvalues_xi2: spectrum.eigenvalues.clone(),
        schur_diagonal: schur,
        positive_definite: analytic_pd,
        min_schur_entry: min_schur,
        numeric_check,
    })
}
