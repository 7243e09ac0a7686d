//! Identification accuracy, matching-strategy comparison, training sweeps and
//! PCA projection of embeddings.

mod experiment;
mod pca;

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use experiment::{
    build_assets, run_experiment, strategy_compare, sweep, write_sweep_csv, AssetFace, ExperimentAssets,
    ExperimentConfig, ExperimentOutcome, Strategy, SweepAxes, SweepRow, SWEEP_HEADER, write_loss_csv,
};
pub use pca::{emit_scatter, pca_fit, PcaModel};

use crate::augmentation::AugmentError;
use crate::embedding::{EmbedError, Embedding};
use crate::identity::{IdentityDatabase, IdentityError};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("no queries to evaluate")]
    NoQueries,
    #[error("strategy {0} unavailable: {1}")]
    Unavailable(String, String),
    #[error("pca: {0}")]
    Pca(String),
    #[error("{0}")]
    Csv(String, #[source] csv::Error),
    #[error("{0}")]
    Io(String, #[source] std::io::Error),
    #[error(transparent)]
    Identity(#[from] IdentityError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
}

/// A query embedding with its ground-truth subject.
#[derive(Clone, Debug)]
pub struct Query {
    pub id: String,
    pub subject: String,
    pub embedding: Embedding,
}

/// What produced a report.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Fingerprint {
    pub strategy: String,
    pub dim: usize,
    pub frontalization: bool,
    pub composition: String,
    pub backbone: String,
    pub epochs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub query: String,
    pub truth: String,
    pub predicted: Option<String>,
    pub similarity: Option<f64>,
}

impl SampleRecord {
    pub fn correct(&self) -> bool {
        self.predicted.as_deref() == Some(self.truth.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub fingerprint: Fingerprint,
    pub records: Vec<SampleRecord>,
    pub n_correct: usize,
    pub n_total: usize,
    pub accuracy: f64,
    /// truth → predicted → count; an empty database predicts `""`.
    pub confusion: BTreeMap<String, BTreeMap<String, usize>>,
}

/// Closed-set identification of every query; a prediction is correct when
/// the best-scoring enrolled subject is the query's own.
pub fn evaluate(db: &IdentityDatabase, queries: &[Query], fingerprint: Fingerprint) -> Result<EvalReport, EvalError> {
    if queries.is_empty() {
        return Err(EvalError::NoQueries);
    }
    let mut records = Vec::with_capacity(queries.len());
    let mut confusion: BTreeMap<String, BTreeMap<String, usize>> = BTreeMap::new();
    for q in queries {
        let m = db.identify(&q.embedding, None)?;
        let (predicted, similarity) = match m.best {
            Some((s, cs)) => (Some(s), Some(cs)),
            None => (None, None),
        };
        *confusion
            .entry(q.subject.clone())
            .or_default()
            .entry(predicted.clone().unwrap_or_default())
            .or_default() += 1;
        records.push(SampleRecord {
            query: q.id.clone(),
            truth: q.subject.clone(),
            predicted,
            similarity,
        });
    }
    let n_correct = records.iter().filter(|r| r.correct()).count();
    let n_total = records.len();
    Ok(EvalReport {
        fingerprint,
        records,
        n_correct,
        n_total,
        accuracy: n_correct as f64 / n_total as f64,
        confusion,
    })
}

impl EvalReport {
    /// Per-sample CSV: `query,truth,predicted,similarity,correct`.
    pub fn write_records_csv(&self, path: &Path) -> Result<(), EvalError> {
        let p = path.display().to_string();
        let mut w = csv::Writer::from_path(path).map_err(|e| EvalError::Csv(p.clone(), e))?;
        w.write_record(["query", "truth", "predicted", "similarity", "correct"])
            .map_err(|e| EvalError::Csv(p.clone(), e))?;
        for r in &self.records {
            w.write_record([
                r.query.clone(),
                r.truth.clone(),
                r.predicted.clone().unwrap_or_default(),
                r.similarity.map(|s| s.to_string()).unwrap_or_default(),
                r.correct().to_string(),
            ])
            .map_err(|e| EvalError::Csv(p.clone(), e))?;
        }
        w.flush().map_err(|e| EvalError::Io(p, e))
    }
}
