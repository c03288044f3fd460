//! Analytic predictions: the collapse threshold, the ELBO value on the
//! collapse line, the Gaussian log-likelihood reference, and the additive
//! constant relating the β-weighted objective to the plain one.

use crate::error::{Error, Result};
use crate::spectrum::Spectrum;
use serde::{Deserialize, Serialize};

/// Which hyperparameter is being swept or queried.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlParameter {
    DecoderVariance,
    Beta,
}

impl std::fmt::Display for ControlParameter {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ControlParameter::DecoderVariance => write!(f, "sigma2"),
            ControlParameter::Beta => write!(f, "beta"),
        }
    }
}

/// Outcome of the collapse criterion for one `(σ'², β)` query.
///
/// `collapsed` is strict: a query exactly on the boundary reports
/// `collapsed = false` with `margin = 0`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CollapsePrediction {
    /// Critical value of the queried control parameter.
    pub critical_value: f64,
    pub control: ControlParameter,
    pub collapsed: bool,
    /// Queried control value minus `critical_value`.
    pub margin: f64,
}

/// Collapse criterion: the trivial extremum is stable iff `β·σ'² > λ_max`.
///
/// `control` selects which parameter the reported critical value and margin
/// refer to; the collapse verdict itself only depends on the product.
pub fn predict_collapse(
    spectrum: &Spectrum,
    decoder_variance: f64,
    beta: f64,
    control: ControlParameter,
) -> Result<CollapsePrediction> {
    if !(decoder_variance > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "decoder variance must be positive, got {decoder_variance}"
        )));
    }
    if !(beta > 0.0) {
        return Err(Error::InvalidParameter(format!("beta must be positive, got {beta}")));
    }
    if spectrum.dim() == 0 {
        return Err(Error::InvalidParameter("empty spectrum".into()));
    }
    let lambda_max = spectrum.max_eigenvalue();
    let collapsed = beta * decoder_variance > lambda_max;
    let (critical_value, margin) = match control {
        ControlParameter::DecoderVariance => (lambda_max / beta, decoder_variance - lambda_max / beta),
        ControlParameter::Beta => (lambda_max / decoder_variance, beta - lambda_max / decoder_variance),
    };
    Ok(CollapsePrediction {
        critical_value,
        control,
        collapsed,
        margin,
    })
}

/// Per-sample ELBO value at the collapsed extremum, in nats:
/// `−(N/2)·ln(2πσ'²) − Tr(Σ)/(2σ'²)`.
pub fn collapse_line(data_dim: usize, decoder_variance: f64, trace: f64) -> Result<f64> {
    if data_dim < 1 {
        return Err(Error::InvalidParameter("data dimension must be at least 1".into()));
    }
    if !(decoder_variance > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "decoder variance must be positive, got {decoder_variance}"
        )));
    }
    if !(trace >= 0.0) {
        return Err(Error::InvalidParameter(format!("trace must be nonnegative, got {trace}")));
    }
    let n = data_dim as f64;
    Ok(-0.5 * n * (2.0 * std::f64::consts::PI * decoder_variance).ln() - trace / (2.0 * decoder_variance))
}

/// Expected log-likelihood per sample of the generating Gaussian:
/// `−(N/2)·ln(2πe) − ½·Σ ln ξ_i²`. The ELBO's upper bound for Gaussian data.
pub fn gaussian_loglik_reference(spectrum: &Spectrum) -> Result<f64> {
    if spectrum.dim() == 0 {
        return Err(Error::InvalidParameter("empty spectrum".into()));
    }
    if let Some(idx) = spectrum.eigenvalues.iter().position(|&l| l <= 0.0) {
        return Err(Error::DegenerateDirection { index: idx });
    }
    let n = spectrum.dim() as f64;
    let log_det: f64 = spectrum.eigenvalues.iter().map(|&l| l.ln()).sum();
    Ok(-0.5 * n * (2.0 * std::f64::consts::PI * std::f64::consts::E).ln() - 0.5 * log_det)
}

/// Additive constant `C` with `L_β(θ; σ'², β) = β·L_G(θ; βσ'²) + C` for all
/// parameters: `C = −(N/2)·ln(2πσ'²) + β·(N/2)·ln(2πβσ'²)`.
pub fn beta_equivalence_constant(data_dim: usize, decoder_variance: f64, beta: f64) -> Result<f64> {
    if !(decoder_variance > 0.0) || !(beta > 0.0) {
        return Err(Error::InvalidParameter(
            "decoder variance and beta must be positive".into(),
        ));
    }
    let n = data_dim as f64;
    let two_pi = 2.0 * std::f64::consts::PI;
    Ok(-0.5 * n * (two_pi * decoder_variance).ln() + beta * 0.5 * n * (two_pi * beta * decoder_variance).ln())
}
