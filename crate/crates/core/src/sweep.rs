//! Control-parameter sweeps, empirical critical-point estimation, and
//! piecewise fits of the KL order parameter.
//!
//! Grid points and replicates are embarrassingly parallel; per-run seeds
//! derive from `(grid index, replicate index)`, never from scheduling, so a
//! sweep is bit-reproducible under any thread count.

use crate::criterion::{collapse_line, gaussian_loglik_reference, predict_collapse, ControlParameter};
use crate::error::{Error, Result};
use crate::rng;
use crate::spectrum::{spectrum_of, DataMatrix};
use crate::vae::{train, RunMetrics, VaeHyperParams};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

const TAG_SWEEP: u64 = 20;

fn default_replicates() -> usize {
    3
}
/// KL below this (nats/sample) counts as collapsed; matches the
/// collapse-detection rule used for latent variances.
pub fn default_kl_threshold() -> f64 {
    0.01
}

/// One sweep: vary `control` over `grid`, train `replicates` runs per point.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepPlan {
    pub control: ControlParameter,
    pub grid: Vec<f64>,
    pub base: VaeHyperParams,
    #[serde(default = "default_replicates")]
    pub replicates: usize,
    #[serde(default = "default_kl_threshold")]
    pub kl_threshold: f64,
}

impl SweepPlan {
    pub fn validate(&self) -> Result<()> {
        self.base.validate()?;
        if self.grid.is_empty() {
            return Err(Error::InvalidParameter("sweep grid is empty".into()));
        }
        if self.grid.iter().any(|&v| !(v > 0.0)) {
            return Err(Error::InvalidParameter("grid values must be positive".into()));
        }
        if self.grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidParameter("grid must be strictly increasing".into()));
        }
        if self.replicates < 1 {
            return Err(Error::InvalidParameter("need at least one replicate".into()));
        }
        if !(self.kl_threshold > 0.0) {
            return Err(Error::InvalidParameter("kl_threshold must be positive".into()));
        }
        Ok(())
    }

    fn hyper_for(&self, grid_index: usize, replicate: usize) -> VaeHyperParams {
        let mut hyper = self.base.clone();
        match self.control {
            ControlParameter::DecoderVariance => hyper.decoder_variance = self.grid[grid_index],
            ControlParameter::Beta => hyper.beta = self.grid[grid_index],
        }
        hyper.seed = rng::derive_seed(
            self.base.seed,
            &[TAG_SWEEP, grid_index as u64, replicate as u64],
        );
        hyper
    }
}

/// Converged measurements at one grid point with analytic reference lines.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRecord {
    pub control: ControlParameter,
    pub control_value: f64,
    /// Componentwise median over successful replicates.
    pub metrics: RunMetrics,
    /// Final metrics of every successful replicate, in replicate order.
    pub replicate_metrics: Vec<RunMetrics>,
    pub replicates_failed: usize,
    pub collapse_line: f64,
    pub loglik_reference: Option<f64>,
    pub predicted_collapsed: bool,
}

/// Trains every `(grid point, replicate)` pair (in parallel under the
/// ambient rayon pool) and aggregates medians plus reference lines.
pub fn run_sweep(plan: &SweepPlan, data: &DataMatrix) -> Result<Vec<SweepRecord>> {
    plan.validate()?;
    if data.dim() != plan.base.data_dim {
        return Err(Error::ShapeMismatch(format!(
            "data dimension {} != configured data_dim {}",
            data.dim(),
            plan.base.data_dim
        )));
    }
    let spectrum = spectrum_of(data)?;

    let jobs: Vec<(usize, usize)> = (0..plan.grid.len())
        .flat_map(|g| (0..plan.replicates).map(move |r| (g, r)))
        .collect();
    let outcomes: Vec<(usize, usize, Result<crate::vae::TrainReport>)> = jobs
        .par_iter()
        .map(|&(g, r)| {
            let hyper = plan.hyper_for(g, r);
            (g, r, train(&hyper, data, |_| {}))
        })
        .collect();

    let mut records = Vec::with_capacity(plan.grid.len());
    for g in 0..plan.grid.len() {
        let mut finals: Vec<RunMetrics> = Vec::new();
        let mut failed = 0usize;
        for (_, _, outcome) in outcomes.iter().filter(|(jg, _, _)| *jg == g) {
            match outcome {
                Ok(report) => match (&report.divergence, &report.final_metrics) {
                    (None, Some(fm)) => finals.push(fm.clone()),
                    _ => failed += 1,
                },
                Err(_) => failed += 1,
            }
        }
        if finals.is_empty() {
            return Err(Error::InsufficientData(format!(
                "all {failed} replicates failed at grid point {}",
                plan.grid[g]
            )));
        }
        let metrics = median_metrics(&finals);
        let (sigma2, beta) = match plan.control {
            ControlParameter::DecoderVariance => (plan.grid[g], plan.base.beta),
            ControlParameter::Beta => (plan.base.decoder_variance, plan.grid[g]),
        };
        let line = collapse_line(plan.base.data_dim, sigma2, spectrum.trace())?;
        let prediction = predict_collapse(&spectrum, sigma2, beta, plan.control)?;
        records.push(SweepRecord {
            control: plan.control,
            control_value: plan.grid[g],
            metrics,
            replicate_metrics: finals,
            replicates_failed: failed,
            collapse_line: line,
            loglik_reference: gaussian_loglik_reference(&spectrum).ok(),
            predicted_collapsed: prediction.collapsed,
        });
    }
    Ok(records)
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

fn median_metrics(finals: &[RunMetrics]) -> RunMetrics {
    let pick = |f: &dyn Fn(&RunMetrics) -> f64| {
        let mut v: Vec<f64> = finals.iter().map(f).collect();
        median(&mut v)
    };
    let n_lat = finals[0].mean_latent_variances.len();
    let variances = (0..n_lat)
        .map(|j| {
            let mut v: Vec<f64> = finals.iter().map(|m| m.mean_latent_variances[j]).collect();
            median(&mut v)
        })
        .collect();
    RunMetrics {
        epoch: finals.iter().map(|m| m.epoch).max().unwrap_or(0),
        elbo: pick(&|m| m.elbo),
        recon_term: pick(&|m| m.recon_term),
        kl_term: pick(&|m| m.kl_term),
        mean_latent_variances: variances,
    }
}

/// Control value where the KL order parameter first drops below the
/// threshold, refined by linear interpolation between the two straddling
/// grid points.
pub fn estimate_critical_point(records: &[SweepRecord], kl_threshold: f64) -> Result<f64> {
    if records.len() < 4 {
        return Err(Error::InsufficientData(format!(
            "critical-point estimation needs at least 4 records, got {}",
            records.len()
        )));
    }
    if records.windows(2).any(|w| w[0].control_value >= w[1].control_value) {
        return Err(Error::InvalidParameter("records must be sorted by control value".into()));
    }
    let above = records.iter().any(|r| r.metrics.kl_term > kl_threshold);
    let below = records.iter().any(|r| r.metrics.kl_term < kl_threshold);
    let exact = records.iter().find(|r| r.metrics.kl_term == kl_threshold);
    if let Some(hit) = exact {
        return Ok(hit.control_value);
    }
    if !above || !below {
        return Err(Error::NoBracket(
            "need KL on both sides of the threshold".into(),
        ));
    }

    for pair in records.windows(2) {
        let (lo, hi) = (&pair[0], &pair[1]);
        if lo.metrics.kl_term > kl_threshold && hi.metrics.kl_term < kl_threshold {
            let span = lo.metrics.kl_term - hi.metrics.kl_term;
            let frac = (lo.metrics.kl_term - kl_threshold) / span;
            return Ok(lo.control_value + frac * (hi.control_value - lo.control_value));
        }
    }
    Err(Error::NoBracket(
        "KL never crosses the threshold between consecutive grid points".into(),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitFamily {
    /// `a·x² + b·x + c`
    Quadratic,
    /// `a·x^b + d`
    PowerLaw,
    /// `a·e^{b·x} + d`
    Exponential,
}

impl std::fmt::Display for FitFamily {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            FitFamily::Quadratic => write!(f, "quadratic"),
            FitFamily::PowerLaw => write!(f, "power_law"),
            FitFamily::Exponential => write!(f, "exponential"),
        }
    }
}

/// Fit of the sub-critical KL branch. The right branch is identically zero,
/// so a nonzero left derivative at the critical point certifies the
/// non-analyticity.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PiecewiseFit {
    pub family: FitFamily,
    /// `[a, b, c]` for the quadratic, `[a, b, d]` for power law and
    /// exponential.
    pub coefficients: Vec<f64>,
    pub critical_point: f64,
    pub left_derivative_at_critical: f64,
    pub residual_rms: f64,
    pub points_used: usize,
}

/// Least-squares fit of the chosen family to every sub-critical KL value
/// (control < critical). At least 3 of those points must carry KL above
/// the threshold, or the branch is too trivial to certify anything.
pub fn fit_kl_branch(
    records: &[SweepRecord],
    critical: f64,
    family: FitFamily,
    kl_threshold: f64,
) -> Result<PiecewiseFit> {
    let pts: Vec<(f64, f64)> = records
        .iter()
        .filter(|r| r.control_value < critical)
        .map(|r| (r.control_value, r.metrics.kl_term))
        .collect();
    let informative = pts.iter().filter(|(_, kl)| *kl > kl_threshold).count();
    if informative < 3 {
        return Err(Error::InsufficientData(format!(
            "insufficient sub-critical points: need at least 3 with KL above {kl_threshold}, got {informative}"
        )));
    }
    let xs: Vec<f64> = pts.iter().map(|p| p.0).collect();
    let ys: Vec<f64> = pts.iter().map(|p| p.1).collect();

    let coefficients = match family {
        FitFamily::Quadratic => fit_quadratic(&xs, &ys)?,
        FitFamily::PowerLaw => fit_nonlinear(&xs, &ys, family)?,
        FitFamily::Exponential => fit_nonlinear(&xs, &ys, family)?,
    };

    let model = |x: f64| eval_family(family, &coefficients, x);
    let sse: f64 = xs
        .iter()
        .zip(&ys)
        .map(|(&x, &y)| {
            let r = model(x) - y;
            r * r
        })
        .sum();
    let residual_rms = (sse / xs.len() as f64).sqrt();
    let left_derivative_at_critical = eval_family_derivative(family, &coefficients, critical);

    Ok(PiecewiseFit {
        family,
        coefficients,
        critical_point: critical,
        left_derivative_at_critical,
        residual_rms,
        points_used: xs.len(),
    })
}

pub fn eval_family(family: FitFamily, p: &[f64], x: f64) -> f64 {
    match family {
        FitFamily::Quadratic => p[0] * x * x + p[1] * x + p[2],
        FitFamily::PowerLaw => p[0] * x.powf(p[1]) + p[2],
        FitFamily::Exponential => p[0] * (p[1] * x).exp() + p[2],
    }
}

fn eval_family_derivative(family: FitFamily, p: &[f64], x: f64) -> f64 {
    match family {
        FitFamily::Quadratic => 2.0 * p[0] * x + p[1],
        FitFamily::PowerLaw => p[0] * p[1] * x.powf(p[1] - 1.0),
        FitFamily::Exponential => p[0] * p[1] * (p[1] * x).exp(),
    }
}

/// Linear least squares on the quadratic basis via 3×3 normal equations.
fn fit_quadratic(xs: &[f64], ys: &[f64]) -> Result<Vec<f64>> {
    let mut ata = [[0.0f64; 3]; 3];
    let mut aty = [0.0f64; 3];
    for (&x, &y) in xs.iter().zip(ys) {
        let basis = [x * x, x, 1.0];
        for i in 0..3 {
            for j in 0..3 {
                ata[i][j] += basis[i] * basis[j];
            }
            aty[i] += basis[i] * y;
        }
    }
    solve3(ata, aty)
        .map(|p| p.to_vec())
        .ok_or_else(|| Error::FitFailed("singular normal equations (degenerate grid)".into()))
}

/// 3×3 linear solve with partial pivoting; `None` when singular.
fn solve3(mut a: [[f64; 3]; 3], mut b: [f64; 3]) -> Option<[f64; 3]> {
    for col in 0..3 {
        let pivot = (col..3).max_by(|&i, &j| a[i][col].abs().partial_cmp(&a[j][col].abs()).unwrap())?;
        if a[pivot][col].abs() < 1e-300 {
            return None;
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in (col + 1)..3 {
            let f = a[row][col] / a[col][col];
            for k in col..3 {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = [0.0f64; 3];
    for row in (0..3).rev() {
        let mut acc = b[row];
        for k in (row + 1)..3 {
            acc -= a[row][k] * x[k];
        }
        if a[row][row] == 0.0 {
            return None;
        }
        x[row] = acc / a[row][row];
    }
    if x.iter().all(|v| v.is_finite()) {
        Some(x)
    } else {
        None
    }
}

/// Levenberg–Marquardt with five multi-starts for the two nonlinear
/// families; the paper gives no fitting procedure, so the solver and starts
/// are pinned here.
fn fit_nonlinear(xs: &[f64], ys: &[f64], family: FitFamily) -> Result<Vec<f64>> {
    let y_min = ys.iter().cloned().fold(f64::INFINITY, f64::min);
    let y_max = ys.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let x_min = xs.iter().cloned().fold(f64::INFINITY, f64::min);
    let spread = (y_max - y_min).max(1e-6);

    let slopes = [-2.0, -1.0, -0.5, -0.25, 1.0];
    let starts: Vec<[f64; 3]> = slopes
        .iter()
        .map(|&b| {
            let base = match family {
                FitFamily::PowerLaw => x_min.powf(b),
                _ => (b * x_min).exp(),
            };
            [spread / base.max(1e-12), b, y_min.min(0.0)]
        })
        .collect();

    let mut best: Option<([f64; 3], f64)> = None;
    for start in starts {
        if let Some((p, sse)) = lm_minimize(xs, ys, family, start) {
            if best.as_ref().map_or(true, |(_, s)| sse < *s) {
                best = Some((p, sse));
            }
        }
    }
    best.map(|(p, _)| p.to_vec())
        .ok_or_else(|| Error::FitFailed("nonlinear fit did not converge from any start".into()))
}

fn residuals_sse(xs: &[f64], ys: &[f64], family: FitFamily, p: &[f64; 3]) -> f64 {
    xs.iter()
        .zip(ys)
        .map(|(&x, &y)| {
            let r = eval_family(family, p, x) - y;
            r * r
        })
        .sum()
}

fn lm_minimize(xs: &[f64], ys: &[f64], family: FitFamily, mut p: [f64; 3]) -> Option<([f64; 3], f64)> {
    let mut sse = residuals_sse(xs, ys, family, &p);
    if !sse.is_finite() {
        return None;
    }
    let mut damping = 1e-3;
    for _ in 0..200 {
        // Assemble JᵀJ and Jᵀr with the analytic Jacobian.
        let mut jtj = [[0.0f64; 3]; 3];
        let mut jtr = [0.0f64; 3];
        for (&x, &y) in xs.iter().zip(ys) {
            let (f, grad) = match family {
                FitFamily::PowerLaw => {
                    let xb = x.powf(p[1]);
                    (p[0] * xb + p[2], [xb, p[0] * xb * x.ln(), 1.0])
                }
                FitFamily::Exponential => {
                    let e = (p[1] * x).exp();
                    (p[0] * e + p[2], [e, p[0] * x * e, 1.0])
                }
                FitFamily::Quadratic => (p[0] * x * x + p[1] * x + p[2], [x * x, x, 1.0]),
            };
            let r = f - y;
            for i in 0..3 {
                for j in 0..3 {
                    jtj[i][j] += grad[i] * grad[j];
                }
                jtr[i] -= grad[i] * r;
            }
        }

        let mut improved = false;
        for _ in 0..24 {
            let mut damped = jtj;
            for (i, row) in damped.iter_mut().enumerate() {
                row[i] += damping * (1.0 + jtj[i][i]);
            }
            if let Some(step) = solve3(damped, jtr) {
                let cand = [p[0] + step[0], p[1] + step[1], p[2] + step[2]];
                let cand_sse = residuals_sse(xs, ys, family, &cand);
                if cand_sse.is_finite() && cand_sse < sse {
                    let rel = (sse - cand_sse) / sse.max(1e-300);
                    p = cand;
                    sse = cand_sse;
                    damping = (damping * 0.3).max(1e-12);
                    improved = true;
                    if rel < 1e-14 || sse < 1e-28 {
                        return Some((p, sse));
                    }
                    break;
                }
            }
            damping *= 10.0;
            if damping > 1e12 {
                return Some((p, sse));
            }
        }
        if !improved {
            return Some((p, sse));
        }
    }
    Some((p, sse))
}

/// CSV rendering of sweep records: one row per grid point with the columns
/// `control, elbo, recon, kl, var_1..var_n, collapse_line, loglik_ref,
/// predicted_collapsed`.
pub fn records_to_csv(records: &[SweepRecord]) -> String {
    let mut out = String::new();
    if records.is_empty() {
        return out;
    }
    let n_lat = records[0].metrics.mean_latent_variances.len();
    out.push_str("control,elbo,recon,kl");
    for j in 1..=n_lat {
        out.push_str(&format!(",var_{j}"));
    }
    out.push_str(",collapse_line,loglik_ref,predicted_collapsed\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{},{}",
            r.control_value, r.metrics.elbo, r.metrics.recon_term, r.metrics.kl_term
        ));
        for v in &r.metrics.mean_latent_variances {
            out.push_str(&format!(",{v}"));
        }
        match r.loglik_reference {
            Some(ll) => out.push_str(&format!(",{},{}", r.collapse_line, ll)),
            None => out.push_str(&format!(",{},", r.collapse_line)),
        }
        out.push_str(&format!(",{}\n", r.predicted_collapsed));
    }
    out
}
