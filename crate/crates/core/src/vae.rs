//! Deep Gaussian VAE: objective, gradients, training loop, and order
//! parameters.
//!
//! The per-sample objective is
//!
//! ```text
//! elbo(x) = −(N/2)·ln(2πσ'²) − ‖x − f(z)‖²/(2σ'²) − β·KL(q(z|x) ‖ N(0,I))
//! ```
//!
//! with one reparameterized Monte Carlo draw `z = μ(x) + σ(x)⊙ε` per datum
//! per step and the KL term in closed form. The additive normalization
//! constant is kept inside the reconstruction term so trained ELBO curves
//! compare directly against the collapse line.

use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::nn::{adam_step, Activation, AdamConfig, AdamState, Mlp, MlpGrads};
use crate::rng::{self, Stream};
use crate::spectrum::DataMatrix;
use serde::{Deserialize, Serialize};

const TAG_INIT: u64 = 0;
const TAG_SHUFFLE: u64 = 1;
const TAG_TRAIN_NOISE: u64 = 2;
const TAG_EVAL_NOISE: u64 = 3;
const TAG_FINAL_EVAL: u64 = 4;

/// Per-epoch metrics are evaluated on at most this many rows (a fixed
/// prefix) with noise drawn once per run, so the early-stop signal is not
/// dominated by Monte Carlo jitter. Final metrics always use the full
/// dataset.
const EPOCH_EVAL_MAX_ROWS: usize = 16_384;

/// Epoch-over-epoch ELBO change below this, five epochs in a row, stops
/// training early.
const EARLY_STOP_DELTA: f64 = 1e-5;
const EARLY_STOP_PATIENCE: usize = 5;

/// Rows processed per evaluation chunk.
const EVAL_CHUNK: usize = 4096;

fn default_beta() -> f64 {
    1.0
}
fn default_encoder_widths() -> Vec<usize> {
    vec![256, 128]
}
fn default_decoder_widths() -> Vec<usize> {
    vec![128, 256]
}
fn default_batch_size() -> usize {
    256
}
fn default_epochs() -> usize {
    100
}
fn default_final_eval_samples() -> usize {
    8
}

/// One experiment's configuration.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct VaeHyperParams {
    pub data_dim: usize,
    pub latent_dim: usize,
    pub decoder_variance: f64,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_encoder_widths")]
    pub encoder_widths: Vec<usize>,
    #[serde(default = "default_decoder_widths")]
    pub decoder_widths: Vec<usize>,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub adam: AdamConfig,
    /// Monte Carlo samples per datum for the final full-dataset evaluation.
    #[serde(default = "default_final_eval_samples")]
    pub final_eval_samples: usize,
}

impl VaeHyperParams {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim < 1 || self.data_dim <= self.latent_dim {
            return Err(Error::InvalidParameter(format!(
                "need data_dim > latent_dim >= 1, got N={} n={}",
                self.data_dim, self.latent_dim
            )));
        }
        if !(self.decoder_variance > 0.0) {
            return Err(Error::InvalidParameter("decoder variance must be positive".into()));
        }
        if !(self.beta > 0.0) {
            return Err(Error::InvalidParameter("beta must be positive".into()));
        }
        if self.encoder_widths.is_empty() || self.decoder_widths.is_empty() {
            return Err(Error::InvalidParameter("encoder and decoder need hidden layers".into()));
        }
        if self.batch_size < 1 || self.epochs < 1 || self.final_eval_samples < 1 {
            return Err(Error::InvalidParameter(
                "batch size, epochs and eval samples must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Encoder trunk with separate mean / log-variance heads, plus the decoder.
///
/// The encoder outputs ln σ² so optimization is unconstrained; variances are
/// exponentiated where needed.
#[derive(Debug, Clone)]
pub struct VaeModel {
    pub trunk: Mlp,
    pub head_mu: Mlp,
    pub head_logvar: Mlp,
    pub decoder: Mlp,
    pub hyper: VaeHyperParams,
}

impl VaeModel {
    /// He/Xavier-initialized model from the run seed.
    pub fn init(hyper: VaeHyperParams) -> Result<Self> {
        hyper.validate()?;
        let mut r = rng::stream(hyper.seed, &[TAG_INIT]);
        let trunk_shape: Vec<(usize, Activation)> =
            hyper.encoder_widths.iter().map(|&w| (w, Activation::ReLU)).collect();
        let trunk = Mlp::init(hyper.data_dim, &trunk_shape, &mut r)?;
        let trunk_out = hyper.encoder_widths[hyper.encoder_widths.len() - 1];
        let head_mu = Mlp::init(trunk_out, &[(hyper.latent_dim, Activation::Identity)], &mut r)?;
        let head_logvar = Mlp::init(trunk_out, &[(hyper.latent_dim, Activation::Identity)], &mut r)?;
        let mut dec_shape: Vec<(usize, Activation)> =
            hyper.decoder_widths.iter().map(|&w| (w, Activation::ReLU)).collect();
        dec_shape.push((hyper.data_dim, Activation::Identity));
        let decoder = Mlp::init(hyper.latent_dim, &dec_shape, &mut r)?;
        Ok(VaeModel {
            trunk,
            head_mu,
            head_logvar,
            decoder,
            hyper,
        })
    }

    /// The engineered collapsed solution: `f ≡ given constant`, `μ ≡ 0`,
    /// `ln σ² ≡ 0`. All weights zero; the decoder's output bias carries the
    /// constant.
    pub fn engineered_trivial(hyper: VaeHyperParams, decoder_constant: &[f64]) -> Result<Self> {
        if decoder_constant.len() != hyper.data_dim {
            return Err(Error::ShapeMismatch("decoder constant length must equal data_dim".into()));
        }
        let mut model = VaeModel::init(hyper)?;
        for net in [&mut model.trunk, &mut model.head_mu, &mut model.head_logvar, &mut model.decoder] {
            for layer in net.layers_mut() {
                for w in layer.weight.data_mut() {
                    *w = 0.0;
                }
                for b in layer.bias.iter_mut() {
                    *b = 0.0;
                }
            }
        }
        let last = model.decoder.layers_mut().last_mut().unwrap();
        last.bias.copy_from_slice(decoder_constant);
        Ok(model)
    }

    /// Posterior statistics `(μ, ln σ²)` for a batch.
    pub fn encode(&self, batch: &Mat) -> Result<(Mat, Mat)> {
        let (trunk_out, _) = self.trunk.forward(batch)?;
        let (mu, _) = self.head_mu.forward(&trunk_out)?;
        let (logvar, _) = self.head_logvar.forward(&trunk_out)?;
        Ok((mu, logvar))
    }

    /// Decoder mean `f(z)`.
    pub fn decode(&self, z: &Mat) -> Result<Mat> {
        Ok(self.decoder.forward(z)?.0)
    }
}

/// Closed-form KL divergence to the standard normal prior:
/// `½·Σ_j (σ_j² + μ_j² − 1 − ln σ_j²)`; zero exactly at `(μ, σ²) = (0, 1)`.
pub fn kl_closed_form(mu: &[f64], sigma2: &[f64]) -> Result<f64> {
    if mu.len() != sigma2.len() {
        return Err(Error::ShapeMismatch("mu and sigma2 lengths differ".into()));
    }
    let mut acc = 0.0;
    for (&m, &s2) in mu.iter().zip(sigma2) {
        if !(s2 > 0.0) {
            return Err(Error::InvalidParameter(format!("posterior variance must be positive, got {s2}")));
        }
        acc += s2 + m * m - 1.0 - s2.ln();
    }
    Ok(0.5 * acc)
}

/// Gradients for the four networks of a [`VaeModel`].
#[derive(Debug, Clone)]
pub struct VaeGradients {
    pub trunk: MlpGrads,
    pub head_mu: MlpGrads,
    pub head_logvar: MlpGrads,
    pub decoder: MlpGrads,
}

/// Negative per-sample ELBO for one minibatch with externally supplied
/// reparameterization noise, plus gradients for every parameter.
pub fn elbo_batch(model: &VaeModel, batch: &Mat, noise: &Mat) -> Result<(f64, VaeGradients)> {
    let hyper = &model.hyper;
    let b = batch.rows();
    if b == 0 {
        return Err(Error::InvalidParameter("empty batch".into()));
    }
    if batch.cols() != hyper.data_dim {
        return Err(Error::ShapeMismatch(format!(
            "batch width {} != data_dim {}",
            batch.cols(),
            hyper.data_dim
        )));
    }
    if noise.rows() != b || noise.cols() != hyper.latent_dim {
        return Err(Error::ShapeMismatch(format!(
            "noise is {}x{}, expected {}x{}",
            noise.rows(),
            noise.cols(),
            b,
            hyper.latent_dim
        )));
    }

    let (trunk_out, trunk_tape) = model.trunk.forward(batch)?;
    let (mu, mu_tape) = model.head_mu.forward(&trunk_out)?;
    let (logvar, logvar_tape) = model.head_logvar.forward(&trunk_out)?;
    if !mu.is_finite() {
        return Err(Error::NonFinite("encoder mean head output".into()));
    }
    if !logvar.is_finite() {
        return Err(Error::NonFinite("encoder log-variance head output".into()));
    }

    // z = μ + σ ⊙ ε with σ = exp(ln σ² / 2).
    let n_lat = hyper.latent_dim;
    let mut sigma = Mat::zeros(b, n_lat);
    let mut z = Mat::zeros(b, n_lat);
    for i in 0..b * n_lat {
        let s = (0.5 * logvar.data()[i]).exp();
        sigma.data_mut()[i] = s;
        z.data_mut()[i] = mu.data()[i] + s * noise.data()[i];
    }
    if !z.is_finite() {
        return Err(Error::NonFinite("latent sample (exp overflow in encoder variance)".into()));
    }

    let (recon, dec_tape) = model.decoder.forward(&z)?;
    if !recon.is_finite() {
        return Err(Error::NonFinite("decoder output".into()));
    }

    let s2 = hyper.decoder_variance;
    let inv_b = 1.0 / b as f64;
    let norm_const = 0.5 * hyper.data_dim as f64 * (2.0 * std::f64::consts::PI * s2).ln();

    // Loss pieces, averaged per sample.
    let mut sq_err = 0.0;
    for (r, x) in recon.data().iter().zip(batch.data()) {
        let d = r - x;
        sq_err += d * d;
    }
    let recon_loss = norm_const + sq_err * inv_b / (2.0 * s2);

    let mut kl_sum = 0.0;
    for i in 0..b * n_lat {
        let m = mu.data()[i];
        let s = logvar.data()[i];
        kl_sum += s.exp() + m * m - 1.0 - s;
    }
    let kl = 0.5 * kl_sum * inv_b;
    let loss = recon_loss + hyper.beta * kl;

    // Backward. d loss / d f = (f − x) / (σ'² · B).
    let mut d_recon = Mat::zeros(b, hyper.data_dim);
    let scale = inv_b / s2;
    for ((d, &r), &x) in d_recon.data_mut().iter_mut().zip(recon.data()).zip(batch.data()) {
        *d = (r - x) * scale;
    }
    let (dec_grads, dz) = model.decoder.backward(&dec_tape, &d_recon)?;

    // d loss / d μ = dz + β·μ/B;  d loss / d lnσ² = dz⊙ε⊙σ/2 + β(σ²−1)/(2B).
    let mut d_mu = Mat::zeros(b, n_lat);
    let mut d_logvar = Mat::zeros(b, n_lat);
    let half_beta_inv_b = 0.5 * hyper.beta * inv_b;
    for i in 0..b * n_lat {
        let s = sigma.data()[i];
        d_mu.data_mut()[i] = dz.data()[i] + hyper.beta * inv_b * mu.data()[i];
        d_logvar.data_mut()[i] =
            dz.data()[i] * noise.data()[i] * s * 0.5 + half_beta_inv_b * (s * s - 1.0);
    }
    let (mu_grads, d_trunk_mu) = model.head_mu.backward(&mu_tape, &d_mu)?;
    let (logvar_grads, d_trunk_lv) = model.head_logvar.backward(&logvar_tape, &d_logvar)?;

    let mut d_trunk = d_trunk_mu;
    for (a, &b_) in d_trunk.data_mut().iter_mut().zip(d_trunk_lv.data()) {
        *a += b_;
    }
    let (trunk_grads, _) = model.trunk.backward(&trunk_tape, &d_trunk)?;

    Ok((
        loss,
        VaeGradients {
            trunk: trunk_grads,
            head_mu: mu_grads,
            head_logvar: logvar_grads,
            decoder: dec_grads,
        },
    ))
}

/// Per-evaluation metrics, per sample in nats. `elbo = recon_term − β·kl_term`
/// with the `−(N/2)ln(2πσ'²)` constant inside `recon_term`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RunMetrics {
    pub epoch: usize,
    pub elbo: f64,
    pub recon_term: f64,
    pub kl_term: f64,
    pub mean_latent_variances: Vec<f64>,
}

/// Full evaluation pass: reconstruction by `samples` Monte Carlo draws per
/// datum, KL and latent variances in closed form. The encoder runs once per
/// datum; only the decoder repeats per draw.
pub fn evaluate(model: &VaeModel, data: &DataMatrix, samples: usize, rng: &mut Stream) -> Result<RunMetrics> {
    let hyper = &model.hyper;
    if data.dim() != hyper.data_dim {
        return Err(Error::ShapeMismatch("data dimension mismatch".into()));
    }
    if samples < 1 {
        return Err(Error::InvalidParameter("need at least one evaluation sample".into()));
    }
    let m = data.samples();
    let n_lat = hyper.latent_dim;
    let s2 = hyper.decoder_variance;
    let norm_const = 0.5 * hyper.data_dim as f64 * (2.0 * std::f64::consts::PI * s2).ln();

    let mut sq_err_total = 0.0;
    let mut kl_total = 0.0;
    let mut var_sums = vec![0.0; n_lat];

    let mut start = 0;
    while start < m {
        let rows = EVAL_CHUNK.min(m - start);
        let mut chunk = Mat::zeros(rows, data.dim());
        for i in 0..rows {
            chunk.row_mut(i).copy_from_slice(data.row(start + i));
        }
        let (mu, logvar) = model.encode(&chunk)?;
        if !mu.is_finite() || !logvar.is_finite() {
            return Err(Error::NonFinite("encoder output during evaluation".into()));
        }

        for i in 0..rows * n_lat {
            let mv = mu.data()[i];
            let lv = logvar.data()[i];
            kl_total += 0.5 * (lv.exp() + mv * mv - 1.0 - lv);
            var_sums[i % n_lat] += lv.exp();
        }

        let mut z = Mat::zeros(rows, n_lat);
        for _ in 0..samples {
            for i in 0..rows * n_lat {
                let s = (0.5 * logvar.data()[i]).exp();
                z.data_mut()[i] = mu.data()[i] + s * rng::standard_normal(rng);
            }
            let recon = model.decode(&z)?;
            if !recon.is_finite() {
                return Err(Error::NonFinite("decoder output during evaluation".into()));
            }
            for (r, x) in recon.data().iter().zip(chunk.data()) {
                let d = r - x;
                sq_err_total += d * d;
            }
        }
        start += rows;
    }

    let recon_term = norm_const + sq_err_total / (2.0 * s2 * (m * samples) as f64);
    let kl_term = kl_total / m as f64;
    let recon_term = -recon_term;
    Ok(RunMetrics {
        epoch: 0,
        elbo: recon_term - hyper.beta * kl_term,
        recon_term,
        kl_term,
        mean_latent_variances: var_sums.iter().map(|v| v / m as f64).collect(),
    })
}

/// Mean posterior variance `⟨σ_j²⟩` per latent dimension over a dataset.
pub fn measure_latent_variances(model: &VaeModel, data: &DataMatrix) -> Result<Vec<f64>> {
    let n_lat = model.hyper.latent_dim;
    let m = data.samples();
    let mut sums = vec![0.0; n_lat];
    let mut start = 0;
    while start < m {
        let rows = EVAL_CHUNK.min(m - start);
        let mut chunk = Mat::zeros(rows, data.dim());
        for i in 0..rows {
            chunk.row_mut(i).copy_from_slice(data.row(start + i));
        }
        let (_, logvar) = model.encode(&chunk)?;
        for i in 0..rows * n_lat {
            sums[i % n_lat] += logvar.data()[i].exp();
        }
        start += rows;
    }
    Ok(sums.iter().map(|v| v / m as f64).collect())
}

/// Result of one training run. On divergence, `divergence` names the cause,
/// `epoch_metrics` holds what was measured up to the abort, and
/// `final_metrics` is absent.
#[derive(Debug, Clone)]
pub struct TrainReport {
    pub model: VaeModel,
    pub epoch_metrics: Vec<RunMetrics>,
    pub final_metrics: Option<RunMetrics>,
    pub divergence: Option<String>,
}

impl TrainReport {
    pub fn diverged(&self) -> bool {
        self.divergence.is_some()
    }
}

/// Minibatch Adam on the negative ELBO.
///
/// Per-epoch metrics go to `on_epoch` (and the report) as they are
/// measured; the final entry in the report is a fresh-noise full-dataset
/// evaluation. Deterministic given the seed regardless of thread context.
pub fn train(
    hyper: &VaeHyperParams,
    data: &DataMatrix,
    mut on_epoch: impl FnMut(&RunMetrics),
) -> Result<TrainReport> {
    hyper.validate()?;
    if data.dim() != hyper.data_dim {
        return Err(Error::ShapeMismatch(format!(
            "data dimension {} != configured data_dim {}",
            data.dim(),
            hyper.data_dim
        )));
    }

    let mut model = VaeModel::init(hyper.clone())?;
    let mut states = [
        AdamState::new(&model.trunk),
        AdamState::new(&model.head_mu),
        AdamState::new(&model.head_logvar),
        AdamState::new(&model.decoder),
    ];

    let m = data.samples();
    let batch = hyper.batch_size.min(m);
    let mut shuffle_rng = rng::stream(hyper.seed, &[TAG_SHUFFLE]);
    let mut noise_rng = rng::stream(hyper.seed, &[TAG_TRAIN_NOISE]);

    // Fixed evaluation subset and noise: a stable scalar for early stopping.
    let eval_rows = m.min(EPOCH_EVAL_MAX_ROWS);
    let eval_data = {
        let mut mat = Mat::zeros(eval_rows, data.dim());
        for i in 0..eval_rows {
            mat.row_mut(i).copy_from_slice(data.row(i));
        }
        DataMatrix::new(mat)?
    };
    let eval_seed = rng::derive_seed(hyper.seed, &[TAG_EVAL_NOISE]);

    let mut indices: Vec<usize> = (0..m).collect();
    let mut metrics: Vec<RunMetrics> = Vec::with_capacity(hyper.epochs);
    let mut stall = 0usize;
    let mut divergence: Option<String> = None;

    'epochs: for epoch in 0..hyper.epochs {
        rng::shuffle(&mut shuffle_rng, &mut indices);
        let mut start = 0;
        while start < m {
            let rows = batch.min(m - start);
            let mut x = Mat::zeros(rows, data.dim());
            for i in 0..rows {
                x.row_mut(i).copy_from_slice(data.row(indices[start + i]));
            }
            let mut noise = Mat::zeros(rows, hyper.latent_dim);
            rng::fill_standard_normal(&mut noise_rng, noise.data_mut());

            let step = elbo_batch(&model, &x, &noise).and_then(|(loss, grads)| {
                if !loss.is_finite() {
                    return Err(Error::NonFinite("training loss".into()));
                }
                adam_step(&mut model.trunk, &grads.trunk, &mut states[0], &hyper.adam)?;
                adam_step(&mut model.head_mu, &grads.head_mu, &mut states[1], &hyper.adam)?;
                adam_step(&mut model.head_logvar, &grads.head_logvar, &mut states[2], &hyper.adam)?;
                adam_step(&mut model.decoder, &grads.decoder, &mut states[3], &hyper.adam)?;
                Ok(())
            });
            if let Err(e) = step {
                divergence = Some(format!("epoch {epoch}: {e}"));
                break 'epochs;
            }
            start += rows;
        }

        let mut eval_rng = rng::stream_from_raw(eval_seed);
        let mut epoch_metrics = match evaluate(&model, &eval_data, 1, &mut eval_rng) {
            Ok(metrics) => metrics,
            Err(e) => {
                divergence = Some(format!("epoch {epoch} evaluation: {e}"));
                break 'epochs;
            }
        };
        epoch_metrics.epoch = epoch;
        on_epoch(&epoch_metrics);

        if let Some(prev) = metrics.last() {
            if (epoch_metrics.elbo - prev.elbo).abs() < EARLY_STOP_DELTA {
                stall += 1;
            } else {
                stall = 0;
            }
        }
        metrics.push(epoch_metrics);
        if stall >= EARLY_STOP_PATIENCE {
            break;
        }
    }

    let final_metrics = if divergence.is_none() {
        let mut final_rng = rng::stream(hyper.seed, &[TAG_FINAL_EVAL]);
        match evaluate(&model, data, hyper.final_eval_samples, &mut final_rng) {
            Ok(mut fm) => {
                fm.epoch = metrics.last().map(|r| r.epoch).unwrap_or(0);
                Some(fm)
            }
            Err(e) => {
                divergence = Some(format!("final evaluation: {e}"));
                None
            }
        }
    } else {
        None
    };

    Ok(TrainReport {
        model,
        epoch_metrics: metrics,
        final_metrics,
        divergence,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::criterion::{beta_equivalence_constant, collapse_line};
    use crate::spectrum::spectrum_of;

    fn tiny_hyper(seed: u64) -> VaeHyperParams {
        VaeHyperParams {
            data_dim: 5,
            latent_dim: 2,
            decoder_variance: 1.0,
            beta: 1.0,
            encoder_widths: vec![6, 5],
            decoder_widths: vec![5, 6],
            batch_size: 4,
            epochs: 1,
            seed,
            adam: AdamConfig::default(),
            final_eval_samples: 2,
        }
    }

    fn synthetic_data(m: usize, n: usize, lambda: f64, seed: u64) -> DataMatrix {
        let xi: Vec<f64> = (0..n).map(|i| (-lambda * i as f64 / 2.0).exp()).collect();
        let mut r = rng::stream(seed, &[100]);
        let mut data = Vec::with_capacity(m * n);
        for _ in 0..m {
            for &s in &xi {
                data.push(s * rng::standard_normal(&mut r));
            }
        }
        DataMatrix::from_vec(m, n, data).unwrap()
    }

    #[test]
    fn kl_closed_form_values() {
        assert_eq!(kl_closed_form(&[0.0], &[1.0]).unwrap(), 0.0);
        assert!((kl_closed_form(&[1.0], &[1.0]).unwrap() - 0.5).abs() < 1e-15);
        let e = std::f64::consts::E;
        assert!((kl_closed_form(&[0.0], &[e]).unwrap() - 0.35914091422952255).abs() < 1e-14);
        assert!(kl_closed_form(&[0.0], &[0.0]).is_err());
        assert!(kl_closed_form(&[0.0], &[-1.0]).is_err());
        assert!(kl_closed_form(&[0.0, 0.0], &[1.0]).is_err());
    }

    #[test]
    fn kl_nonnegative_and_zero_only_at_prior() {
        let mut r = rng::stream(8, &[0]);
        for _ in 0..200 {
            let mu: Vec<f64> = (0..3).map(|_| rng::standard_normal(&mut r)).collect();
            let s2: Vec<f64> = (0..3).map(|_| rng::standard_normal(&mut r).abs() + 1e-3).collect();
            let kl = kl_closed_form(&mu, &s2).unwrap();
            assert!(kl >= 0.0);
            let off_prior = mu.iter().any(|&m| m.abs() > 1e-9)
                || s2.iter().any(|&v| (v - 1.0).abs() > 1e-9);
            if off_prior {
                assert!(kl > 0.0);
            }
        }
    }

    #[test]
    fn constant_prior_encoder_has_zero_kl() {
        let hyper = tiny_hyper(1);
        let model = VaeModel::engineered_trivial(hyper, &[0.0; 5]).unwrap();
        let data = synthetic_data(16, 5, 0.1, 2);
        let mut r = rng::stream(3, &[0]);
        let metrics = evaluate(&model, &data, 2, &mut r).unwrap();
        assert_eq!(metrics.kl_term, 0.0);
        for v in &metrics.mean_latent_variances {
            assert!((v - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn unit_mean_shift_gives_half_nat() {
        // μ_j = 1 on a single latent dimension, σ = 1: KL = ½ per sample.
        let hyper = tiny_hyper(4);
        let mut model = VaeModel::engineered_trivial(hyper, &[0.0; 5]).unwrap();
        model.head_mu.layers_mut()[0].bias[0] = 1.0;
        let data = synthetic_data(16, 5, 0.1, 5);
        let mut r = rng::stream(6, &[0]);
        let metrics = evaluate(&model, &data, 1, &mut r).unwrap();
        assert!((metrics.kl_term - 0.5).abs() < 1e-12);
    }

    #[test]
    fn trivial_solution_matches_collapse_line() {
        // The engineered collapsed model's ELBO equals the collapse line
        // computed from the empirical trace exactly, and the line from the
        // target spectrum within 3 standard errors.
        let n = 8;
        let m = 4000;
        let data = synthetic_data(m, n, 0.1, 7);
        let spec = spectrum_of(&data).unwrap();
        let hyper = VaeHyperParams {
            data_dim: n,
            latent_dim: 4,
            decoder_variance: 1.3,
            ..tiny_hyper(8)
        };
        let sigma2 = hyper.decoder_variance;
        let model = VaeModel::engineered_trivial(hyper, &spec.mean).unwrap();
        let mut r = rng::stream(9, &[0]);
        let metrics = evaluate(&model, &data, 4, &mut r).unwrap();

        let line_empirical = collapse_line(n, sigma2, spec.trace()).unwrap();
        assert!(
            (metrics.elbo - line_empirical).abs() < 1e-10,
            "{} vs {line_empirical}",
            metrics.elbo
        );

        // Against the generating spectrum: Monte Carlo (data-sampling) error.
        let target_trace: f64 = (0..n).map(|i| (-0.1 * i as f64).exp()).sum();
        let line_target = collapse_line(n, sigma2, target_trace).unwrap();
        let norm_const = 0.5 * n as f64 * (2.0 * std::f64::consts::PI * sigma2).ln();
        let per_sample: Vec<f64> = (0..m)
            .map(|i| {
                let sq: f64 = data
                    .row(i)
                    .iter()
                    .zip(&spec.mean)
                    .map(|(x, mu)| (x - mu) * (x - mu))
                    .sum();
                -norm_const - sq / (2.0 * sigma2)
            })
            .collect();
        let mean: f64 = per_sample.iter().sum::<f64>() / m as f64;
        let var: f64 = per_sample.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (m - 1) as f64;
        let se = (var / m as f64).sqrt();
        assert!(
            (metrics.elbo - line_target).abs() < 3.0 * se,
            "elbo {} vs target line {line_target} (3se = {})",
            metrics.elbo,
            3.0 * se
        );
    }

    #[test]
    fn elbo_batch_validates_shapes() {
        let hyper = tiny_hyper(10);
        let model = VaeModel::init(hyper).unwrap();
        let x = Mat::zeros(3, 5);
        assert!(elbo_batch(&model, &x, &Mat::zeros(3, 3)).is_err());
        assert!(elbo_batch(&model, &x, &Mat::zeros(2, 2)).is_err());
        assert!(elbo_batch(&model, &Mat::zeros(3, 4), &Mat::zeros(3, 2)).is_err());
    }

    /// Central finite differences of the full ELBO objective over every
    /// parameter of every network, with the noise matrix held fixed.
    fn elbo_finite_difference_check(model: &VaeModel, x: &Mat, noise: &Mat, tol: f64) {
        let loss_of = |m: &VaeModel| elbo_batch(m, x, noise).unwrap().0;
        let (_, grads) = elbo_batch(model, x, noise).unwrap();
        let nets: [(&str, fn(&mut VaeModel) -> &mut Mlp, &MlpGrads); 4] = [
            ("trunk", |m| &mut m.trunk, &grads.trunk),
            ("head_mu", |m| &mut m.head_mu, &grads.head_mu),
            ("head_logvar", |m| &mut m.head_logvar, &grads.head_logvar),
            ("decoder", |m| &mut m.decoder, &grads.decoder),
        ];
        let h = 1e-5;
        let mut worst = 0.0_f64;
        for (name, get, g) in nets {
            for li in 0..g.layers.len() {
                let nw = g.layers[li].weight.data().len();
                let nb = g.layers[li].bias.len();
                for pi in 0..nw + nb {
                    let perturb = |m: &mut VaeModel, delta: f64| {
                        let layer = &mut get(m).layers_mut()[li];
                        if pi < nw {
                            layer.weight.data_mut()[pi] += delta;
                        } else {
                            layer.bias[pi - nw] += delta;
                        }
                    };
                    let mut plus = model.clone();
                    perturb(&mut plus, h);
                    let mut minus = model.clone();
                    perturb(&mut minus, -h);
                    let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
                    let an = if pi < nw {
                        g.layers[li].weight.data()[pi]
                    } else {
                        g.layers[li].bias[pi - nw]
                    };
                    let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-3);
                    if rel > worst {
                        worst = rel;
                    }
                    assert!(rel < tol, "{name} layer {li} param {pi}: fd {fd} vs {an}");
                }
            }
        }
        let _ = worst;
    }

    /// Moves every bias off zero so no ReLU pre-activation sits exactly on
    /// the kink, where central differences and the subgradient convention
    /// legitimately disagree.
    fn nudge_biases(model: &mut VaeModel) {
        let mut k = 0u32;
        for net in [
            &mut model.trunk,
            &mut model.head_mu,
            &mut model.head_logvar,
            &mut model.decoder,
        ] {
            for layer in net.layers_mut() {
                for b in layer.bias.iter_mut() {
                    k += 1;
                    *b += 0.05 + 0.013 * f64::from(k % 7);
                }
            }
        }
    }

    #[test]
    fn elbo_gradient_matches_finite_differences() {
        for seed in 0..3 {
            let mut hyper = tiny_hyper(20 + seed);
            hyper.beta = 1.0 + seed as f64 * 0.5;
            hyper.decoder_variance = 0.5 + seed as f64 * 0.4;
            let mut model = VaeModel::init(hyper).unwrap();
            nudge_biases(&mut model);
            let mut r = rng::stream(30 + seed, &[0]);
            let mut x = Mat::zeros(4, 5);
            rng::fill_standard_normal(&mut r, x.data_mut());
            let mut noise = Mat::zeros(4, 2);
            rng::fill_standard_normal(&mut r, noise.data_mut());
            elbo_finite_difference_check(&model, &x, &noise, 1e-4);
        }
    }

    #[test]
    fn beta_equivalence_identity_holds() {
        // elbo_β(σ'², β) = β·elbo_G(βσ'²) + C with identical parameters and
        // noise.
        for seed in 0..10 {
            let mut hyper = tiny_hyper(50 + seed);
            hyper.decoder_variance = 0.4 + 0.3 * seed as f64;
            hyper.beta = 0.5 + 0.35 * seed as f64;
            let model = VaeModel::init(hyper.clone()).unwrap();

            let mut plain_hyper = hyper.clone();
            plain_hyper.decoder_variance = hyper.beta * hyper.decoder_variance;
            plain_hyper.beta = 1.0;
            let mut plain = model.clone();
            plain.hyper = plain_hyper;

            let mut r = rng::stream(60 + seed, &[0]);
            let mut x = Mat::zeros(6, 5);
            rng::fill_standard_normal(&mut r, x.data_mut());
            let mut noise = Mat::zeros(6, 2);
            rng::fill_standard_normal(&mut r, noise.data_mut());

            let (loss_beta, _) = elbo_batch(&model, &x, &noise).unwrap();
            let (loss_plain, _) = elbo_batch(&plain, &x, &noise).unwrap();
            let c = beta_equivalence_constant(5, hyper.decoder_variance, hyper.beta).unwrap();
            let elbo_beta = -loss_beta;
            let elbo_plain = -loss_plain;
            let lhs = elbo_beta;
            let rhs = hyper.beta * elbo_plain + c;
            assert!(
                (lhs - rhs).abs() <= 1e-8 * (1.0 + lhs.abs()),
                "seed {seed}: {lhs} vs {rhs}"
            );
        }
    }

    #[test]
    fn monte_carlo_kl_matches_closed_form() {
        // E[ln q(z) − ln p(z)] over z ~ q, estimated by sampling.
        let mut r = rng::stream(70, &[0]);
        for _ in 0..2 {
            let dim = 3;
            let mu: Vec<f64> = (0..dim).map(|_| rng::standard_normal(&mut r)).collect();
            let s2: Vec<f64> = (0..dim).map(|_| rng::standard_normal(&mut r).abs() + 0.2).collect();
            let closed = kl_closed_form(&mu, &s2).unwrap();

            let draws = 1_000_000;
            let mut sum = 0.0;
            let mut sumsq = 0.0;
            for _ in 0..draws {
                let mut term = 0.0;
                for j in 0..dim {
                    let eps = rng::standard_normal(&mut r);
                    let sd = s2[j].sqrt();
                    let z = mu[j] + sd * eps;
                    // ln q − ln p for this coordinate.
                    let ln_q = -0.5 * (2.0 * std::f64::consts::PI * s2[j]).ln() - 0.5 * eps * eps;
                    let ln_p = -0.5 * (2.0 * std::f64::consts::PI).ln() - 0.5 * z * z;
                    term += ln_q - ln_p;
                }
                sum += term;
                sumsq += term * term;
            }
            let mean = sum / draws as f64;
            let var = (sumsq / draws as f64 - mean * mean).max(0.0);
            let se = (var / draws as f64).sqrt();
            assert!(
                (mean - closed).abs() < 4.0 * se,
                "MC {mean} vs closed {closed} (4se = {})",
                4.0 * se
            );
        }
    }

    #[test]
    fn training_collapses_above_threshold() {
        let data = synthetic_data(6000, 8, 0.1, 80);
        let hyper = VaeHyperParams {
            data_dim: 8,
            latent_dim: 4,
            decoder_variance: 2.0,
            beta: 1.0,
            encoder_widths: vec![64, 32],
            decoder_widths: vec![32, 64],
            batch_size: 128,
            epochs: 60,
            seed: 81,
            adam: AdamConfig {
                learning_rate: 2e-3,
                ..AdamConfig::default()
            },
            final_eval_samples: 4,
        };
        let report = train(&hyper, &data, |_| {}).unwrap();
        assert!(!report.diverged());
        let fm = report.final_metrics.unwrap();
        assert!(fm.kl_term < 0.01, "kl = {}", fm.kl_term);
        for v in &fm.mean_latent_variances {
            assert!((0.95..=1.05).contains(v), "variances = {:?}", fm.mean_latent_variances);
        }
    }

    #[test]
    fn training_stays_informative_below_threshold() {
        let data = synthetic_data(6000, 8, 0.1, 82);
        let hyper = VaeHyperParams {
            data_dim: 8,
            latent_dim: 4,
            decoder_variance: 0.5,
            beta: 1.0,
            encoder_widths: vec![64, 32],
            decoder_widths: vec![32, 64],
            batch_size: 128,
            epochs: 30,
            seed: 83,
            adam: AdamConfig::default(),
            final_eval_samples: 4,
        };
        let report = train(&hyper, &data, |_| {}).unwrap();
        assert!(!report.diverged());
        let fm = report.final_metrics.unwrap();
        assert!(fm.kl_term > 0.1, "kl = {}", fm.kl_term);
    }

    #[test]
    fn zero_covariance_data_collapses() {
        // Identical points: λ_max = 0, any σ'² > 0 collapses.
        let point = [0.7, -0.3, 1.1, 0.0, 0.25];
        let mut data = Vec::new();
        for _ in 0..500 {
            data.extend_from_slice(&point);
        }
        let data = DataMatrix::from_vec(500, 5, data).unwrap();
        let hyper = VaeHyperParams {
            data_dim: 5,
            latent_dim: 2,
            decoder_variance: 0.3,
            beta: 1.0,
            encoder_widths: vec![16, 8],
            decoder_widths: vec![8, 16],
            batch_size: 64,
            epochs: 250,
            seed: 84,
            adam: AdamConfig {
                learning_rate: 2e-3,
                ..AdamConfig::default()
            },
            final_eval_samples: 4,
        };
        let report = train(&hyper, &data, |_| {}).unwrap();
        let fm = report.final_metrics.unwrap();
        assert!(fm.kl_term < 0.01, "kl = {}", fm.kl_term);
    }

    #[test]
    fn latent_variance_measurement() {
        let hyper = tiny_hyper(90);
        let model = VaeModel::engineered_trivial(hyper.clone(), &[0.0; 5]).unwrap();
        let data = synthetic_data(64, 5, 0.1, 91);
        let vars = measure_latent_variances(&model, &data).unwrap();
        assert!(vars.iter().all(|&v| v == 1.0));

        let fresh = VaeModel::init(hyper).unwrap();
        let vars = measure_latent_variances(&fresh, &data).unwrap();
        assert!(vars.iter().all(|&v| v > 0.0));
    }

    #[test]
    fn training_is_deterministic() {
        let data = synthetic_data(512, 5, 0.1, 92);
        let hyper = VaeHyperParams {
            epochs: 3,
            batch_size: 64,
            ..tiny_hyper(93)
        };
        let a = train(&hyper, &data, |_| {}).unwrap();
        let b = train(&hyper, &data, |_| {}).unwrap();
        let fa = a.final_metrics.unwrap();
        let fb = b.final_metrics.unwrap();
        assert_eq!(fa.elbo.to_bits(), fb.elbo.to_bits());
        assert_eq!(fa.kl_term.to_bits(), fb.kl_term.to_bits());
        for (x, y) in a
            .model
            .decoder
            .layers()
            .iter()
            .zip(b.model.decoder.layers())
        {
            for (u, v) in x.weight.data().iter().zip(y.weight.data()) {
                assert_eq!(u.to_bits(), v.to_bits());
            }
        }
    }

    #[test]
    fn divergent_training_reports_partial_metrics() {
        let data = synthetic_data(256, 5, 0.1, 94);
        let hyper = VaeHyperParams {
            epochs: 50,
            batch_size: 64,
            adam: AdamConfig {
                learning_rate: 1e12,
                ..AdamConfig::default()
            },
            ..tiny_hyper(95)
        };
        let report = train(&hyper, &data, |_| {}).unwrap();
        assert!(report.diverged(), "expected divergence with lr = 1e12");
        assert!(report.final_metrics.is_none());
    }

    #[test]
    fn hyper_validation() {
        let mut h = tiny_hyper(96);
        h.latent_dim = 5; // equals data_dim
        assert!(h.validate().is_err());
        let mut h = tiny_hyper(97);
        h.decoder_variance = 0.0;
        assert!(h.validate().is_err());
        let mut h = tiny_hyper(98);
        h.beta = -1.0;
        assert!(h.validate().is_err());
    }
}
