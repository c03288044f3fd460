//! JSON spectrum files. The documented keys are `eigenvalues`, `trace`, and
//! `max_eigenvalue`; `basis` and `mean` are carried along so downstream
//! commands can rebuild the full spectrum, and default to the identity and
//! zero when absent from hand-written files.

use anyhow::Context;
use clab_core::linalg::Mat;
use clab_core::spectrum::Spectrum;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Serialize, Deserialize)]
pub struct SpectrumFile {
    pub eigenvalues: Vec<f64>,
    pub trace: f64,
    pub max_eigenvalue: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub basis: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean: Option<Vec<f64>>,
}

impl SpectrumFile {
    pub fn from_spectrum(spec: &Spectrum) -> Self {
        let n = spec.dim();
        let basis = (0..n).map(|i| spec.basis.row(i).to_vec()).collect();
        SpectrumFile {
            eigenvalues: spec.eigenvalues.clone(),
            trace: spec.trace(),
            max_eigenvalue: spec.max_eigenvalue(),
            basis: Some(basis),
            mean: Some(spec.mean.clone()),
        }
    }

    pub fn into_spectrum(self) -> anyhow::Result<Spectrum> {
        let n = self.eigenvalues.len();
        anyhow::ensure!(n > 0, "spectrum file has no eigenvalues");
        let basis = match self.basis {
            Some(rows) => {
                anyhow::ensure!(
                    rows.len() == n && rows.iter().all(|r| r.len() == n),
                    "basis must be {n}x{n}"
                );
                Mat::from_vec(n, n, rows.into_iter().flatten().collect())
            }
            None => Mat::identity(n),
        };
        let mean = self.mean.unwrap_or_else(|| vec![0.0; n]);
        anyhow::ensure!(mean.len() == n, "mean length must match eigenvalue count");
        Ok(Spectrum {
            eigenvalues: self.eigenvalues,
            basis,
            mean,
        })
    }
}

pub fn save_spectrum(path: &Path, spec: &Spectrum) -> anyhow::Result<()> {
    let file = SpectrumFile::from_spectrum(spec);
    std::fs::write(path, serde_json::to_string_pretty(&file)?)
        .with_context(|| format!("cannot write spectrum to {}", path.display()))?;
    Ok(())
}

pub fn load_spectrum(path: &Path) -> anyhow::Result<Spectrum> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read spectrum file {}", path.display()))?;
    let file: SpectrumFile = serde_json::from_str(&text)
        .with_context(|| format!("malformed spectrum JSON in {}", path.display()))?;
    file.into_spectrum()
}
