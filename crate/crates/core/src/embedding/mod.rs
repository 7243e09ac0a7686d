//! Face embeddings: a small convolutional backbone ending in an
//! l2-normalized D-wide layer, trained with additive angular margin loss.

mod arcface;

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use arcface::{arcface_logits, arcface_loss, ArcFaceGrad, ArcFaceObjective, ArcMargin, COS_EPS, UNIT_TOLERANCE};

use crate::augmentation::{frontalize, AugmentError, Reference3DModel};
use crate::imaging::{crop, resize, FaceImage, ImagingError};
use crate::keypoints::KeypointSet;
use crate::nnet::{load_checkpoint, save_network, LayerSpec, Network, NnError, OptimizerState, Param, Tensor};

pub const EMBEDDING_DIMS: [usize; 4] = [128, 256, 512, 1024];

#[derive(Debug, thiserror::Error)]
pub enum EmbedError {
    #[error("invalid embedding config: {0}")]
    Config(String),
    #[error("unknown backbone {0:?} (known: {known})", known = backbone_ids().join(", "))]
    UnknownBackbone(String),
    #[error("embedding norm {0} is not 1")]
    NotUnit(f64),
    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("class {class} has {count} sample(s); at least 2 are required")]
    SmallClass { class: usize, count: usize },
    #[error("degenerate embedding: {0}")]
    Degenerate(String),
    #[error("preprocessing: {0}")]
    Preprocess(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Imaging(#[from] ImagingError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
}

/// Image preparation ahead of the backbone.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Preprocess {
    /// Crop to the central square of the shorter side before resizing.
    pub center_crop: bool,
    /// Frontalize against the reference model (needs keypoints).
    pub frontalize: bool,
}

impl Default for Preprocess {
    fn default() -> Self {
        Self {
            center_crop: true,
            frontalize: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbeddingConfig {
    pub dim: usize,
    #[serde(flatten)]
    pub arc: ArcMargin,
    pub classes: usize,
    /// Square input side in pixels; a multiple of 16.
    pub input_size: usize,
    pub backbone: String,
    pub preprocess: Preprocess,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        Self {
            dim: 512,
            arc: ArcMargin::default(),
            classes: 2,
            input_size: 112,
            backbone: "toy-cnn".into(),
            preprocess: Preprocess::default(),
        }
    }
}

impl EmbeddingConfig {
    pub fn validate(&self) -> Result<(), EmbedError> {
        let bad = |m: String| Err(EmbedError::Config(m));
        if !EMBEDDING_DIMS.contains(&self.dim) {
            return bad(format!("dim must be one of {EMBEDDING_DIMS:?}, got {}", self.dim));
        }
        if !(self.arc.margin >= 0.0 && self.arc.margin < std::f64::consts::FRAC_PI_2) {
            return bad(format!("margin must lie in [0, pi/2), got {}", self.arc.margin));
        }
        if !(self.arc.scale > 0.0 && self.arc.scale.is_finite()) {
            return bad(format!("scale must be > 0, got {}", self.arc.scale));
        }
        if self.classes < 2 {
            return bad(format!("need >= 2 classes, got {}", self.classes));
        }
        if self.input_size < 16 || self.input_size % 16 != 0 {
            return bad(format!("input size must be a positive multiple of 16, got {}", self.input_size));
        }
        backbone_channels(&self.backbone)?;
        Ok(())
    }
}

/// Unit-norm feature vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding(Vec<f32>);

impl Embedding {
    /// Accepts `values` whose norm is within 1e-6 of 1.
    pub fn new(values: Vec<f32>) -> Result<Self, EmbedError> {
        let n = norm(&values);
        if !((n - 1.0).abs() <= 1e-6) {
            return Err(EmbedError::NotUnit(n));
        }
        Ok(Self(values))
    }

    /// Scales `values` to unit norm; zero or non-finite vectors are rejected.
    pub fn normalized(values: &[f64]) -> Result<Self, EmbedError> {
        let n = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(n > 0.0 && n.is_finite()) {
            return Err(EmbedError::Degenerate(format!("vector norm {n}")));
        }
        let v: Vec<f32> = values.iter().map(|x| (x / n) as f32).collect();
        Self::new(v)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }
}

fn norm(v: &[f32]) -> f64 {
    v.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt()
}

/// Channel widths of the four conv blocks for each registered backbone.
const BACKBONES: [(&str, [usize; 4]); 3] = [
    ("toy-cnn", [8, 16, 32, 32]),
    ("toy-cnn-lite", [4, 8, 16, 16]),
    ("toy-cnn-wide", [16, 32, 64, 64]),
];

pub fn backbone_ids() -> Vec<&'static str> {
    BACKBONES.iter().map(|b| b.0).collect()
}

fn backbone_channels(id: &str) -> Result<[usize; 4], EmbedError> {
    BACKBONES
        .iter()
        .find(|b| b.0 == id)
        .map(|b| b.1)
        .ok_or_else(|| EmbedError::UnknownBackbone(id.to_string()))
}

/// Four conv3×3 + relu + 2×2 pool blocks, flatten, dense D, l2norm.
pub fn backbone_layers(id: &str, dim: usize, input_size: usize) -> Result<Vec<LayerSpec>, EmbedError> {
    let channels = backbone_channels(id)?;
    let mut layers = Vec::new();
    let mut c_in = 3;
    for c in channels {
        layers.extend([LayerSpec::conv3x3(c_in, c), LayerSpec::Relu, LayerSpec::pool2()]);
        c_in = c;
    }
    let side = input_size / 16;
    layers.extend([LayerSpec::Flatten, LayerSpec::dense(c_in * side * side, dim), LayerSpec::L2Norm]);
    Ok(layers)
}

pub fn build_backbone(cfg: &EmbeddingConfig, seed: u64) -> Result<Network<f32>, EmbedError> {
    let layers = backbone_layers(&cfg.backbone, cfg.dim, cfg.input_size)?;
    Ok(Network::new(vec![3, cfg.input_size, cfg.input_size], layers, seed)?)
}

fn init_head(classes: usize, dim: usize, seed: u64) -> Param<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6172_6366);
    let bound = (6.0 / dim as f64).sqrt();
    let data = (0..classes * dim).map(|_| rng.gen_range(-bound..bound) as f32).collect();
    Param::new("arcface.weight", Tensor::new(vec![classes, dim], data).expect("sized"))
}

/// Center crop (optional), frontalization (optional), resize to the input size.
pub fn preprocess(
    img: &FaceImage,
    kps: Option<&KeypointSet>,
    flags: Preprocess,
    size: usize,
) -> Result<FaceImage, EmbedError> {
    let mut img = img.to_rgb();
    if flags.frontalize {
        let k = kps.ok_or_else(|| EmbedError::Preprocess("frontalization needs keypoints".into()))?;
        let model = Reference3DModel::for_frame(img.width(), img.height());
        img = frontalize(&img, k, &model)?;
    }
    if flags.center_crop && img.width() != img.height() {
        let s = img.width().min(img.height());
        img = crop(&img, (img.width() - s) / 2, (img.height() - s) / 2, s, s)?;
    }
    Ok(resize(&img, size, size)?)
}

fn input_tensor(imgs: &[FaceImage]) -> Tensor<f32> {
    let (w, h) = (imgs[0].width(), imgs[0].height());
    let plane = w * h;
    let mut data = vec![0.0f32; imgs.len() * 3 * plane];
    for (n, img) in imgs.iter().enumerate() {
        let base = n * 3 * plane;
        for (i, px) in img.data().chunks_exact(3).enumerate() {
            for c in 0..3 {
                data[base + c * plane + i] = px[c] as f32 / 127.5 - 1.0;
            }
        }
    }
    Tensor::new(vec![imgs.len(), 3, h, w], data).expect("sized")
}

/// A face image with its class label and optional landmarks.
#[derive(Clone, Debug)]
pub struct LabeledFace {
    pub image: FaceImage,
    pub label: usize,
    pub keypoints: Option<KeypointSet>,
    /// Whether the image is a diver (augmented) face.
    pub diver: bool,
}

/// Which faces enter training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Composition {
    DiverOnly,
    DiverAndRegular,
}

impl Composition {
    /// Filters `faces`; the loss and everything downstream is unaffected.
    pub fn select<'a>(&self, faces: &'a [LabeledFace]) -> Vec<&'a LabeledFace> {
        faces
            .iter()
            .filter(|f| *self == Composition::DiverAndRegular || f.diver)
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 32,
            lr: 1e-3,
            seed: 0,
        }
    }
}

/// Backbone, class weights and (after training) optimizer state.
#[derive(Clone, Debug)]
pub struct EmbeddingModel {
    pub config: EmbeddingConfig,
    pub backbone: Network<f32>,
    pub head: Param<f32>,
    pub optimizer: Option<OptimizerState<f32>>,
}

const CONFIG_RECORD: &str = "embed.config";

impl EmbeddingModel {
    pub fn new(config: EmbeddingConfig, seed: u64) -> Result<Self, EmbedError> {
        config.validate()?;
        Ok(Self {
            backbone: build_backbone(&config, seed)?,
            head: init_head(config.classes, config.dim, seed),
            config,
            optimizer: None,
        })
    }

    /// Embedding of one image. Fails when the backbone's pre-normalization
    /// activation is all zeros.
    pub fn extract(&self, img: &FaceImage, kps: Option<&KeypointSet>) -> Result<Embedding, EmbedError> {
        let x = preprocess(img, kps, self.config.preprocess, self.config.input_size)?;
        self.embed_prepared(&[x]).map(|mut v| v.remove(0))
    }

    /// Batched extraction; work is split across available threads.
    pub fn extract_batch(&self, items: &[(FaceImage, Option<KeypointSet>)]) -> Result<Vec<Embedding>, EmbedError> {
        let threads = std::thread::available_parallelism().map_or(1, |n| n.get()).min(items.len().max(1));
        let chunk = items.len().div_ceil(threads).max(1);
        let run = |part: &[(FaceImage, Option<KeypointSet>)]| -> Result<Vec<Embedding>, EmbedError> {
            let mut out = Vec::with_capacity(part.len());
            for group in part.chunks(32) {
                let prepared = group
                    .iter()
                    .map(|(img, k)| preprocess(img, k.as_ref(), self.config.preprocess, self.config.input_size))
                    .collect::<Result<Vec<_>, _>>()?;
                out.extend(self.embed_prepared(&prepared)?);
            }
            Ok(out)
        };
        if threads <= 1 {
            return run(items);
        }
        let parts: Vec<Result<Vec<Embedding>, EmbedError>> = std::thread::scope(|s| {
            let handles: Vec<_> = items.chunks(chunk).map(|p| s.spawn(move || run(p))).collect();
            handles.into_iter().map(|h| h.join().expect("extraction thread")).collect()
        });
        let mut out = Vec::with_capacity(items.len());
        for p in parts {
            out.extend(p?);
        }
        Ok(out)
    }

    fn embed_prepared(&self, prepared: &[FaceImage]) -> Result<Vec<Embedding>, EmbedError> {
        let out = self.backbone.infer(&input_tensor(prepared))?;
        (0..prepared.len())
            .map(|i| {
                let row = out.row(i);
                if row.iter().all(|&v| v == 0.0) {
                    return Err(EmbedError::Degenerate("backbone activation is all zeros".into()));
                }
                Embedding::new(row.to_vec())
            })
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<(), EmbedError> {
        let json = serde_json::to_vec(&self.config).expect("config serializes");
        let mut extra = vec![
            (CONFIG_RECORD.to_string(), Tensor::vector(json.iter().map(|&b| b as f32).collect())),
            (self.head.name.clone(), {
                let mut t = self.head.value.clone();
                t.clear_grad();
                t
            }),
        ];
        if let Some(o) = &self.optimizer {
            extra.extend(o.to_records());
        }
        save_network(path, &self.backbone, &extra)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, EmbedError> {
        let records = load_checkpoint(path)?;
        let find = |name: &str| records.iter().find(|(n, _)| n == name).map(|(_, t)| t);
        let cfg_bytes: Vec<u8> = find(CONFIG_RECORD)
            .ok_or_else(|| NnError::Checkpoint(format!("missing {CONFIG_RECORD}")))?
            .data()
            .iter()
            .map(|&v| v as u8)
            .collect();
        let config: EmbeddingConfig = serde_json::from_slice(&cfg_bytes)
            .map_err(|e| NnError::Checkpoint(format!("{CONFIG_RECORD}: {e}")))?;
        let mut model = Self::new(config, 0)?;
        model.backbone.load_state(&records)?;
        let head = find("arcface.weight").ok_or_else(|| NnError::Checkpoint("missing arcface.weight".into()))?;
        if head.shape() != model.head.value.shape() {
            return Err(NnError::Checkpoint(format!(
                "arcface.weight has shape {:?}, config implies {:?}",
                head.shape(),
                model.head.value.shape()
            ))
            .into());
        }
        model.head.value = head.clone();
        model.optimizer = OptimizerState::from_records(&records)?;
        Ok(model)
    }
}

/// Trained model plus the mean loss of every epoch.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: EmbeddingModel,
    pub history: Vec<f64>,
}

/// Trains backbone and class weights jointly with Adam. Deterministic in
/// `opts.seed`. Every class in `0..cfg.classes` needs at least two faces.
pub fn train_embedding(faces: &[&LabeledFace], cfg: &EmbeddingConfig, opts: &TrainOptions) -> Result<TrainOutcome, EmbedError> {
    cfg.validate()?;
    let mut counts = vec![0usize; cfg.classes];
    for f in faces {
        *counts.get_mut(f.label).ok_or(EmbedError::Label {
            label: f.label,
            classes: cfg.classes,
        })? += 1;
    }
    if let Some((class, &count)) = counts.iter().enumerate().find(|(_, &c)| c < 2) {
        return Err(EmbedError::SmallClass { class, count });
    }
    let mut model = EmbeddingModel::new(cfg.clone(), opts.seed)?;
    let prepared: Vec<FaceImage> = faces
        .iter()
        .map(|f| preprocess(&f.image, f.keypoints.as_ref(), cfg.preprocess, cfg.input_size))
        .collect::<Result<_, _>>()?;
    let mut opt = OptimizerState::adam(opts.lr)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x656d_6264);
    let mut order: Vec<usize> = (0..faces.len()).collect();
    let mut history = Vec::with_capacity(opts.epochs);
    let batch = opts.batch_size.max(1);
    for epoch in 0..opts.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(batch) {
            let imgs: Vec<FaceImage> = chunk.iter().map(|&i| prepared[i].clone()).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| faces[i].label).collect();
            model.backbone.zero_grad();
            let feats = model.backbone.forward(&input_tensor(&imgs))?;
            if model.backbone.take_zero_row_flag() {
                log::warn!("epoch {epoch}: a sample produced an all-zero embedding");
            }
            let f64_feats: Vec<f64> = feats.data().iter().map(|&v| v as f64).collect();
            let w: Vec<f64> = model.head.value.data().iter().map(|&v| v as f64).collect();
            let r = arcface_loss(&f64_feats, &labels, &w, cfg.dim, cfg.arc)?;
            let g = Tensor::new(feats.shape().to_vec(), r.grad_features.iter().map(|&v| v as f32).collect())?;
            model.backbone.backward(&g)?;
            for (dst, src) in model.head.value.grad_mut().iter_mut().zip(&r.grad_weights) {
                *dst = *src as f32;
            }
            let mut params: Vec<&mut Param<f32>> = model.backbone.params_mut().iter_mut().collect();
            params.push(&mut model.head);
            opt.update(&mut params)?;
            total += r.loss * chunk.len() as f64;
        }
        let mean = total / faces.len() as f64;
        log::debug!("embedding epoch {epoch}: loss {mean:.5}");
        history.push(mean);
    }
    model.optimizer = Some(opt);
    Ok(TrainOutcome { model, history })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> EmbeddingConfig {
        EmbeddingConfig {
            dim: 128,
            classes: 2,
            input_size: 16,
            ..Default::default()
        }
    }

    #[test]
    fn batch_output_is_unit_rows() {
        let cfg = EmbeddingConfig {
            input_size: 32,
            ..small_cfg()
        };
        let net = build_backbone(&cfg, 3).unwrap();
        let x = Tensor::new(vec![8, 3, 32, 32], (0..8 * 3 * 32 * 32).map(|i| ((i * 37) % 101) as f32 / 50.0 - 1.0).collect()).unwrap();
        let out = net.infer(&x).unwrap();
        assert_eq!(out.shape(), &[8, 128]);
        for i in 0..8 {
            assert!((norm(out.row(i)) - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn default_is_512_wide() {
        let cfg = EmbeddingConfig {
            classes: 3,
            ..Default::default()
        };
        assert_eq!(build_backbone(&cfg, 0).unwrap().output_shape(), &[512]);
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = EmbeddingModel::new(small_cfg(), 9).unwrap();
        let b = EmbeddingModel::new(small_cfg(), 9).unwrap();
        assert_eq!(a.backbone.state(), b.backbone.state());
        assert_eq!(a.head.value, b.head.value);
    }

    #[test]
    fn config_validation() {
        for bad in [
            EmbeddingConfig { dim: 100, ..small_cfg() },
            EmbeddingConfig { classes: 1, ..small_cfg() },
            EmbeddingConfig { input_size: 20, ..small_cfg() },
            EmbeddingConfig {
                arc: ArcMargin { margin: 2.0, scale: 64.0 },
                ..small_cfg()
            },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
        let unknown = EmbeddingConfig {
            backbone: "resnet-50".into(),
            ..small_cfg()
        };
        assert!(matches!(unknown.validate(), Err(EmbedError::UnknownBackbone(_))));
    }

    #[test]
    fn single_sample_class_rejected() {
        let img = FaceImage::filled(16, 16, &[10, 20, 30]).unwrap();
        let faces: Vec<LabeledFace> = [0, 0, 1]
            .iter()
            .map(|&label| LabeledFace {
                image: img.clone(),
                label,
                keypoints: None,
                diver: false,
            })
            .collect();
        let refs: Vec<&LabeledFace> = faces.iter().collect();
        let r = train_embedding(&refs, &small_cfg(), &TrainOptions::default());
        assert!(matches!(r, Err(EmbedError::SmallClass { class: 1, count: 1 })));
    }

    #[test]
    fn embedding_norm_contract() {
        assert!(Embedding::new(vec![0.6, 0.8]).is_ok());
        assert!(Embedding::new(vec![0.6, 0.81]).is_err());
        assert!(Embedding::normalized(&[0.0, 0.0]).is_err());
        let e = Embedding::normalized(&[3.0, 4.0, 12.0]).unwrap();
        assert!((e.norm() - 1.0).abs() < 1e-6);
    }
}
