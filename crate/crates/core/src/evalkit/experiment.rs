//! Synthetic experiment assets, matching strategies and sweeps over
//! training configurations.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{evaluate, EvalError, EvalReport, Fingerprint, Query};
use crate::augmentation::{builtin_templates, expand_dataset, run_pipeline, KeypointSource, MaskTemplate, PipelineConfig};
use crate::embedding::{
    train_embedding, Composition, EmbedError, EmbeddingConfig, EmbeddingModel, LabeledFace, TrainOptions,
};
use crate::identity::{sha256_hex, EnrollMeta, IdentityDatabase};
use crate::imaging::FaceImage;
use crate::keypoints::KeypointSet;
use crate::synth::Cohort;

/// Enrollment set ↔ query set pairing.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    /// Enroll augmented diver faces, query with diver faces.
    DiverDiver,
    /// Enroll the unprocessed regular faces, query with diver faces.
    RegularDiver,
    /// Enroll regular faces, query with externally converted (mask removed)
    /// diver faces.
    RegularDemasked,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::DiverDiver, Strategy::RegularDiver, Strategy::RegularDemasked];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::DiverDiver => "diver-diver",
            Strategy::RegularDiver => "regular-diver",
            Strategy::RegularDemasked => "regular-demasked",
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Strategy::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| format!("unknown strategy {s:?} (expected diver-diver, regular-diver or regular-demasked)"))
    }
}

/// The seeded synthetic identification experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub subjects: usize,
    pub image_size: usize,
    pub cohort_seed: u64,
    /// Photos per subject that are augmented into the training set.
    pub base_photos: usize,
    /// Held-out photos per subject used as queries.
    pub query_photos: usize,
    /// Photo index of the first held-out view.
    pub query_offset: usize,
    pub expand_seed: u64,
    /// Query `j` of subject `s` is augmented with seed `query_seed + 10·s + j`.
    pub query_seed: u64,
    pub enroll_per_subject: usize,
    pub composition: Composition,
    pub embedding: EmbeddingConfig,
    pub train: TrainOptions,
    pub pipeline: PipelineConfig,
    /// Converted queries for the regular↔demasked strategy.
    pub demasked_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            subjects: 10,
            image_size: 64,
            cohort_seed: 2024,
            base_photos: 4,
            query_photos: 4,
            query_offset: 10,
            expand_seed: 5,
            query_seed: 1000,
            enroll_per_subject: 2,
            composition: Composition::DiverOnly,
            embedding: EmbeddingConfig {
                dim: 512,
                classes: 10,
                input_size: 32,
                ..Default::default()
            },
            train: TrainOptions::default(),
            pipeline: PipelineConfig::default(),
            demasked_dir: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AssetFace {
    pub subject: usize,
    pub image: FaceImage,
    pub keypoints: Option<KeypointSet>,
}

/// Training faces, per-subject enrollment candidates and held-out queries.
#[derive(Clone, Debug)]
pub struct ExperimentAssets {
    pub subject_ids: Vec<String>,
    /// The expanded set: originals and their diver variants.
    pub training: Vec<LabeledFace>,
    /// Unprocessed base photos, in subject then photo order.
    pub regular: Vec<AssetFace>,
    /// Diver variants of the base photos, in expansion order.
    pub diver: Vec<AssetFace>,
    /// Held-out diver queries with their ids.
    pub queries: Vec<(String, AssetFace)>,
    /// Externally converted queries for [`Strategy::RegularDemasked`].
    pub demasked: Option<Vec<(String, AssetFace)>>,
}

pub fn build_assets(cfg: &ExperimentConfig, templates: &[MaskTemplate]) -> Result<ExperimentAssets, EvalError> {
    if cfg.query_offset < cfg.base_photos {
        return Err(EmbedError::Config(format!(
            "query_offset {} overlaps the {} base photos",
            cfg.query_offset, cfg.base_photos
        ))
        .into());
    }
    let cohort = Cohort::new(cfg.subjects, cfg.image_size, cfg.cohort_seed);
    let mut photos = Vec::new();
    for s in 0..cfg.subjects {
        for k in 0..cfg.base_photos {
            let (img, kps) = cohort.photo(s, k)?;
            photos.push((s, img, kps));
        }
    }
    let sources: Vec<(FaceImage, KeypointSource)> = photos
        .iter()
        .map(|(_, img, k)| (img.clone(), KeypointSource::Given(k)))
        .collect();
    let expanded = expand_dataset(&sources, templates, &cfg.pipeline, cfg.expand_seed)?;
    let mut assets = ExperimentAssets {
        subject_ids: (0..cfg.subjects).map(Cohort::subject_id).collect(),
        training: Vec::with_capacity(expanded.len()),
        regular: Vec::new(),
        diver: Vec::new(),
        queries: Vec::new(),
        demasked: None,
    };
    for e in expanded {
        let subject = photos[e.base_index].0;
        let face = AssetFace {
            subject,
            image: e.image,
            keypoints: e.keypoints,
        };
        assets.training.push(LabeledFace {
            image: face.image.clone(),
            label: subject,
            keypoints: face.keypoints.clone(),
            diver: e.variant.is_some(),
        });
        if e.variant.is_some() {
            assets.diver.push(face);
        } else {
            assets.regular.push(face);
        }
    }
    for s in 0..cfg.subjects {
        for j in 0..cfg.query_photos {
            let (img, kps) = cohort.photo(s, cfg.query_offset + j)?;
            let seed = cfg.query_seed + (10 * s + j) as u64;
            let out = run_pipeline(&img, KeypointSource::Given(&kps), templates, &cfg.pipeline, seed, false)?;
            assets.queries.push((
                format!("{}/q{j}", Cohort::subject_id(s)),
                AssetFace {
                    subject: s,
                    image: out.image,
                    keypoints: out.keypoints,
                },
            ));
        }
    }
    Ok(assets)
}

impl ExperimentAssets {
    /// Loads converted queries from `<dir>/<subject_id>/*.png`.
    pub fn import_demasked(&mut self, dir: &Path) -> Result<usize, EvalError> {
        let mut out = Vec::new();
        for (s, id) in self.subject_ids.iter().enumerate() {
            let sub = dir.join(id);
            let Ok(entries) = std::fs::read_dir(&sub) else { continue };
            let mut files: Vec<PathBuf> = entries
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "png"))
                .collect();
            files.sort();
            for f in files {
                let image = FaceImage::load(&f).map_err(EmbedError::from)?;
                let name = f.file_stem().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
                out.push((
                    format!("{id}/{name}"),
                    AssetFace {
                        subject: s,
                        image,
                        keypoints: None,
                    },
                ));
            }
        }
        let n = out.len();
        self.demasked = Some(out);
        Ok(n)
    }

    fn enroll_set(&self, diver: bool, per_subject: usize) -> Vec<&AssetFace> {
        let pool = if diver { &self.diver } else { &self.regular };
        let mut taken = vec![0usize; self.subject_ids.len()];
        pool.iter()
            .filter(|f| {
                let keep = taken[f.subject] < per_subject;
                taken[f.subject] += keep as usize;
                keep
            })
            .collect()
    }
}

fn embed_all(model: &EmbeddingModel, faces: &[&AssetFace]) -> Result<Vec<crate::embedding::Embedding>, EvalError> {
    let items: Vec<(FaceImage, Option<KeypointSet>)> = faces.iter().map(|f| (f.image.clone(), f.keypoints.clone())).collect();
    Ok(model.extract_batch(&items)?)
}

fn run_strategy(
    model: &EmbeddingModel,
    assets: &ExperimentAssets,
    strategy: Strategy,
    per_subject: usize,
    fingerprint: &Fingerprint,
) -> Result<(EvalReport, IdentityDatabase), EvalError> {
    let queries: &[(String, AssetFace)] = match strategy {
        Strategy::DiverDiver | Strategy::RegularDiver => &assets.queries,
        Strategy::RegularDemasked => match &assets.demasked {
            Some(q) if !q.is_empty() => q,
            _ => {
                return Err(EvalError::Unavailable(
                    strategy.to_string(),
                    "no converted (demasked) images were supplied".into(),
                ))
            }
        },
    };
    if queries.is_empty() {
        return Err(EvalError::Unavailable(strategy.to_string(), "no query images".into()));
    }
    let enroll = assets.enroll_set(strategy == Strategy::DiverDiver, per_subject);
    if enroll.is_empty() {
        return Err(EvalError::Unavailable(strategy.to_string(), "no enrollment images".into()));
    }
    let enrolled = embed_all(model, &enroll)?;
    let mut db = IdentityDatabase::new(model.config.dim);
    for (face, emb) in enroll.iter().zip(enrolled) {
        let meta = EnrollMeta {
            source_hashes: vec![sha256_hex(face.image.data())],
            enrolled_at: 0,
            source: if strategy == Strategy::DiverDiver {
                "augmentation-pipeline".into()
            } else {
                "regular".into()
            },
        };
        db.enroll(&assets.subject_ids[face.subject], vec![emb], Some(meta))?;
    }
    let qfaces: Vec<&AssetFace> = queries.iter().map(|(_, f)| f).collect();
    let qemb = embed_all(model, &qfaces)?;
    let qs: Vec<Query> = queries
        .iter()
        .zip(qemb)
        .map(|((id, f), embedding)| Query {
            id: id.clone(),
            subject: assets.subject_ids[f.subject].clone(),
            embedding,
        })
        .collect();
    let fp = Fingerprint {
        strategy: strategy.to_string(),
        ..fingerprint.clone()
    };
    Ok((evaluate(&db, &qs, fp)?, db))
}

/// Evaluates each strategy with the same model and assets, enrolling
/// `per_subject` images per subject.
pub fn strategy_compare(
    model: &EmbeddingModel,
    assets: &ExperimentAssets,
    strategies: &[Strategy],
    per_subject: usize,
    fingerprint: &Fingerprint,
) -> Result<Vec<EvalReport>, EvalError> {
    strategies
        .iter()
        .map(|&s| run_strategy(model, assets, s, per_subject, fingerprint).map(|r| r.0))
        .collect()
}

pub struct ExperimentOutcome {
    pub model: EmbeddingModel,
    pub history: Vec<f64>,
    pub reports: Vec<EvalReport>,
    pub databases: Vec<IdentityDatabase>,
}

fn fingerprint_of(cfg: &EmbeddingConfig, composition: Composition, epochs: usize) -> Fingerprint {
    Fingerprint {
        strategy: String::new(),
        dim: cfg.dim,
        frontalization: cfg.preprocess.frontalize,
        composition: composition_name(composition).into(),
        backbone: cfg.backbone.clone(),
        epochs,
    }
}

fn composition_name(c: Composition) -> &'static str {
    match c {
        Composition::DiverOnly => "diver-only",
        Composition::DiverAndRegular => "diver-and-regular",
    }
}

/// Builds the assets, trains one model and evaluates `strategies`. With
/// `out_dir` the checkpoint, loss history, databases and reports are
/// written there.
pub fn run_experiment(cfg: &ExperimentConfig, strategies: &[Strategy], out_dir: Option<&Path>) -> Result<ExperimentOutcome, EvalError> {
    let templates = builtin_templates();
    let mut assets = build_assets(cfg, &templates)?;
    if let Some(dir) = &cfg.demasked_dir {
        let n = assets.import_demasked(dir)?;
        log::info!("imported {n} converted queries from {}", dir.display());
    }
    let ecfg = EmbeddingConfig {
        classes: cfg.subjects,
        ..cfg.embedding.clone()
    };
    let train = cfg.composition.select(&assets.training);
    let trained = train_embedding(&train, &ecfg, &cfg.train)?;
    let fp = fingerprint_of(&ecfg, cfg.composition, cfg.train.epochs);
    let mut reports = Vec::new();
    let mut databases = Vec::new();
    for &s in strategies {
        let (r, db) = run_strategy(&trained.model, &assets, s, cfg.enroll_per_subject, &fp)?;
        reports.push(r);
        databases.push(db);
    }
    if let Some(dir) = out_dir {
        let io = |p: &Path| {
            let p = p.display().to_string();
            move |e| EvalError::Io(p, e)
        };
        std::fs::create_dir_all(dir).map_err(io(dir))?;
        trained.model.save(&dir.join("embedding.dvnn"))?;
        write_loss_csv(&dir.join("loss.csv"), &trained.history)?;
        for (r, db) in reports.iter().zip(&databases) {
            let stem = &r.fingerprint.strategy;
            db.save(&dir.join(format!("{stem}.dvdb")))?;
            r.write_records_csv(&dir.join(format!("{stem}.samples.csv")))?;
        }
        let p = dir.join("reports.json");
        std::fs::write(&p, serde_json::to_vec_pretty(&reports).expect("serializable")).map_err(io(&p))?;
    }
    Ok(ExperimentOutcome {
        model: trained.model,
        history: trained.history,
        reports,
        databases,
    })
}

/// `epoch,loss` rows.
pub fn write_loss_csv(path: &Path, history: &[f64]) -> Result<(), EvalError> {
    let p = path.display().to_string();
    let mut w = csv::Writer::from_path(path).map_err(|e| EvalError::Csv(p.clone(), e))?;
    w.write_record(["epoch", "loss"]).map_err(|e| EvalError::Csv(p.clone(), e))?;
    for (i, l) in history.iter().enumerate() {
        w.write_record([i.to_string(), l.to_string()]).map_err(|e| EvalError::Csv(p.clone(), e))?;
    }
    w.flush().map_err(|e| EvalError::Io(p, e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepAxes {
    pub dims: Vec<usize>,
    pub frontalization: Vec<bool>,
    pub compositions: Vec<Composition>,
    pub backbones: Vec<String>,
}

impl Default for SweepAxes {
    fn default() -> Self {
        Self {
            dims: vec![512],
            frontalization: vec![false],
            compositions: vec![Composition::DiverOnly],
            backbones: vec!["toy-cnn".into()],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub cell_id: String,
    pub backbone: String,
    pub dim: usize,
    pub frontalization: bool,
    pub composition: Composition,
    /// `None` when the cell was infeasible and skipped.
    pub report: Option<EvalReport>,
    pub loss_history_path: Option<PathBuf>,
}

pub const SWEEP_HEADER: [&str; 9] = [
    "cell_id",
    "backbone",
    "D",
    "frontalization",
    "composition",
    "accuracy",
    "n_correct",
    "n_total",
    "loss_history_path",
];

/// Trains and evaluates (diver↔diver) one model per grid cell, all with
/// `base.train.seed`. Cells run in parallel. Infeasible cells are skipped
/// with a warning.
pub fn sweep(
    assets: &ExperimentAssets,
    base: &ExperimentConfig,
    axes: &SweepAxes,
    out_dir: &Path,
) -> Result<Vec<SweepRow>, EvalError> {
    std::fs::create_dir_all(out_dir).map_err(|e| EvalError::Io(out_dir.display().to_string(), e))?;
    let mut cells = Vec::new();
    for b in &axes.backbones {
        for &d in &axes.dims {
            for &f in &axes.frontalization {
                for &c in &axes.compositions {
                    cells.push((format!("cell{:02}", cells.len()), b.clone(), d, f, c));
                }
            }
        }
    }
    let run = |(id, backbone, dim, front, comp): &(String, String, usize, bool, Composition)| -> Result<SweepRow, EvalError> {
        let mut cfg = EmbeddingConfig {
            dim: *dim,
            backbone: backbone.clone(),
            classes: assets.subject_ids.len(),
            ..base.embedding.clone()
        };
        cfg.preprocess.frontalize = *front;
        let mut row = SweepRow {
            cell_id: id.clone(),
            backbone: backbone.clone(),
            dim: *dim,
            frontalization: *front,
            composition: *comp,
            report: None,
            loss_history_path: None,
        };
        let faces = comp.select(&assets.training);
        let trained = match train_embedding(&faces, &cfg, &base.train) {
            Ok(t) => t,
            Err(e @ (EmbedError::SmallClass { .. } | EmbedError::Preprocess(_))) => {
                log::warn!("{id}: skipped ({e})");
                return Ok(row);
            }
            Err(e) => return Err(e.into()),
        };
        let path = out_dir.join(format!("{id}.loss.csv"));
        write_loss_csv(&path, &trained.history)?;
        let fp = fingerprint_of(&cfg, *comp, base.train.epochs);
        let (report, _) = run_strategy(&trained.model, assets, Strategy::DiverDiver, base.enroll_per_subject, &fp)?;
        row.report = Some(report);
        row.loss_history_path = Some(path);
        Ok(row)
    };
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get()).min(cells.len().max(1));
    let mut results: Vec<Option<Result<SweepRow, EvalError>>> = (0..cells.len()).map(|_| None).collect();
    std::thread::scope(|s| {
        let chunk = cells.len().div_ceil(threads).max(1);
        for (part, slots) in cells.chunks(chunk).zip(results.chunks_mut(chunk)) {
            let run = &run;
            s.spawn(move || {
                for (cell, slot) in part.iter().zip(slots) {
                    *slot = Some(run(cell));
                }
            });
        }
    });
    results.into_iter().map(|r| r.expect("cell ran")).collect()
}

pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<(), EvalError> {
    let p = path.display().to_string();
    let csv_err = |e| EvalError::Csv(p.clone(), e);
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(SWEEP_HEADER).map_err(csv_err)?;
    for r in rows {
        let (acc, nc, nt) = match &r.report {
            Some(rep) => (rep.accuracy.to_string(), rep.n_correct.to_string(), rep.n_total.to_string()),
            None => ("skipped".into(), String::new(), String::new()),
        };
        let loss = r
            .loss_history_path
            .as_ref()
            .and_then(|p| p.file_name())
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        w.write_record([
            r.cell_id.clone(),
            r.backbone.clone(),
            r.dim.to_string(),
            r.frontalization.to_string(),
            composition_name(r.composition).to_string(),
            acc,
            nc,
            nt,
            loss,
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| EvalError::Io(p.clone(), e))
}
