//! Principal component projection of embeddings to a few dimensions.

use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use super::EvalError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// k rows of length D, orthonormal, by descending variance.
    pub components: Vec<Vec<f64>>,
    /// Sample variance (n − 1 denominator) along each component.
    pub variances: Vec<f64>,
    /// `variances[i]` over the total variance.
    pub explained: Vec<f64>,
}

/// Fits `k` components to the rows of `data`. The sign of each component
/// is chosen so that its largest-magnitude entry is positive (the first such
/// entry on exact ties).
pub fn pca_fit(data: &[Vec<f64>], k: usize) -> Result<PcaModel, EvalError> {
    let n = data.len();
    if n < 2 {
        return Err(EvalError::Pca(format!("need at least 2 samples, got {n}")));
    }
    let d = data[0].len();
    if d == 0 || data.iter().any(|r| r.len() != d) {
        return Err(EvalError::Pca("rows must share a nonzero length".into()));
    }
    if k == 0 || k > (n - 1).min(d) {
        return Err(EvalError::Pca(format!("k = {k} must lie in 1..={}", (n - 1).min(d))));
    }
    let mut mean = vec![0.0; d];
    for r in data {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let x = DMatrix::from_fn(n, d, |i, j| data[i][j] - mean[j]);
    let cov = (x.transpose() * &x) / (n as f64 - 1.0);
    let total: f64 = cov.diagonal().sum();
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut components = Vec::with_capacity(k);
    let mut variances = Vec::with_capacity(k);
    for &i in order.iter().take(k) {
        let mut c: Vec<f64> = eig.eigenvectors.column(i).iter().copied().collect();
        let lead = c
            .iter()
            .enumerate()
            .fold(0, |best, (j, v)| if v.abs() > c[best].abs() { j } else { best });
        if c[lead] < 0.0 {
            c.iter_mut().for_each(|v| *v = -*v);
        }
        components.push(c);
        variances.push(eig.eigenvalues[i].max(0.0));
    }
    let explained = variances
        .iter()
        .map(|v| if total > 0.0 { v / total } else { 0.0 })
        .collect();
    Ok(PcaModel {
        mean,
        components,
        variances,
        explained,
    })
}

impl PcaModel {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn k(&self) -> usize {
        self.components.len()
    }

    pub fn project(&self, data: &[Vec<f64>]) -> Result<Vec<Vec<f64>>, EvalError> {
        data.iter()
            .map(|r| {
                if r.len() != self.dim() {
                    return Err(EvalError::Pca(format!("row of length {} for a {}-D model", r.len(), self.dim())));
                }
                Ok(self
                    .components
                    .iter()
                    .map(|c| c.iter().zip(r).zip(&self.mean).map(|((c, x), m)| c * (x - m)).sum())
                    .collect())
            })
            .collect()
    }

    /// `mean + componentsᵀ · coords`
    pub fn reconstruct(&self, coords: &[f64]) -> Vec<f64> {
        let mut out = self.mean.clone();
        for (c, &a) in self.components.iter().zip(coords) {
            for (o, v) in out.iter_mut().zip(c) {
                *o += a * v;
            }
        }
        out
    }
}

/// Writes `subject,x,y` rows for a 2-component model.
pub fn emit_scatter(model: &PcaModel, data: &[Vec<f64>], labels: &[String], path: &Path) -> Result<(), EvalError> {
    if model.k() != 2 {
        return Err(EvalError::Pca(format!("scatter needs k = 2, model has {}", model.k())));
    }
    if labels.is_empty() || labels.len() != data.len() {
        return Err(EvalError::Pca(format!("{} labels for {} embeddings", labels.len(), data.len())));
    }
    let coords = model.project(data)?;
    let mut w = csv::Writer::from_path(path).map_err(|e| EvalError::Csv(path.display().to_string(), e))?;
    let csv_err = |e| EvalError::Csv(path.display().to_string(), e);
    w.write_record(["subject", "x", "y"]).map_err(csv_err)?;
    for (label, c) in labels.iter().zip(&coords) {
        w.write_record([label.clone(), c[0].to_string(), c[1].to_string()]).map_err(csv_err)?;
    }
    w.flush().map_err(|e| EvalError::Io(path.display().to_string(), e))
}
