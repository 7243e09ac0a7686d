//! Fifteen-point facial landmarks and the convolutional regressor that
//! predicts them from a 96×96 grayscale face.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imaging::{resize, to_grayscale, FaceImage, ImagingError};
use crate::nnet::{
    load_checkpoint, mse_loss, save_network, LayerSpec, Network, NnError, OptimizerState, Tensor,
};

pub const KEYPOINT_COUNT: usize = 15;
/// Side length of the regressor's square grayscale input.
pub const KEYPOINT_INPUT: usize = 96;

#[derive(Debug, Error)]
pub enum KeypointError {
    #[error("unknown keypoint name {0:?}")]
    UnknownName(String),
    #[error("keypoint {0} is not finite")]
    NonFinite(KeypointName),
    #[error("keypoint file: {0}")]
    Annotation(String),
    #[error("line {line}: {msg}")]
    Csv { line: u64, msg: String },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("sample {index}: {msg}")]
    Sample { index: usize, msg: String },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Imaging(#[from] ImagingError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Landmark names in canonical order. "Left" is the subject's left, which
/// appears on the right side of a frontal photo.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeypointName {
    LeftEyeCenter,
    RightEyeCenter,
    LeftEyeInnerCorner,
    RightEyeInnerCorner,
    LeftEyeOuterCorner,
    RightEyeOuterCorner,
    LeftEyebrowInnerEnd,
    RightEyebrowInnerEnd,
    LeftEyebrowOuterEnd,
    RightEyebrowOuterEnd,
    NoseTip,
    MouthLeftCorner,
    MouthRightCorner,
    MouthCenterTopLip,
    MouthCenterBottomLip,
}

impl KeypointName {
    pub const ALL: [KeypointName; KEYPOINT_COUNT] = [
        KeypointName::LeftEyeCenter,
        KeypointName::RightEyeCenter,
        KeypointName::LeftEyeInnerCorner,
        KeypointName::RightEyeInnerCorner,
        KeypointName::LeftEyeOuterCorner,
        KeypointName::RightEyeOuterCorner,
        KeypointName::LeftEyebrowInnerEnd,
        KeypointName::RightEyebrowInnerEnd,
        KeypointName::LeftEyebrowOuterEnd,
        KeypointName::RightEyebrowOuterEnd,
        KeypointName::NoseTip,
        KeypointName::MouthLeftCorner,
        KeypointName::MouthRightCorner,
        KeypointName::MouthCenterTopLip,
        KeypointName::MouthCenterBottomLip,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            KeypointName::LeftEyeCenter => "left_eye_center",
            KeypointName::RightEyeCenter => "right_eye_center",
            KeypointName::LeftEyeInnerCorner => "left_eye_inner_corner",
            KeypointName::RightEyeInnerCorner => "right_eye_inner_corner",
            KeypointName::LeftEyeOuterCorner => "left_eye_outer_corner",
            KeypointName::RightEyeOuterCorner => "right_eye_outer_corner",
            KeypointName::LeftEyebrowInnerEnd => "left_eyebrow_inner_end",
            KeypointName::RightEyebrowInnerEnd => "right_eyebrow_inner_end",
            KeypointName::LeftEyebrowOuterEnd => "left_eyebrow_outer_end",
            KeypointName::RightEyebrowOuterEnd => "right_eyebrow_outer_end",
            KeypointName::NoseTip => "nose_tip",
            KeypointName::MouthLeftCorner => "mouth_left_corner",
            KeypointName::MouthRightCorner => "mouth_right_corner",
            KeypointName::MouthCenterTopLip => "mouth_center_top_lip",
            KeypointName::MouthCenterBottomLip => "mouth_center_bottom_lip",
        }
    }

    /// Bilateral counterpart; midline points map to themselves.
    pub fn mirror(self) -> KeypointName {
        use KeypointName::*;
        match self {
            LeftEyeCenter => RightEyeCenter,
            RightEyeCenter => LeftEyeCenter,
            LeftEyeInnerCorner => RightEyeInnerCorner,
            RightEyeInnerCorner => LeftEyeInnerCorner,
            LeftEyeOuterCorner => RightEyeOuterCorner,
            RightEyeOuterCorner => LeftEyeOuterCorner,
            LeftEyebrowInnerEnd => RightEyebrowInnerEnd,
            RightEyebrowInnerEnd => LeftEyebrowInnerEnd,
            LeftEyebrowOuterEnd => RightEyebrowOuterEnd,
            RightEyebrowOuterEnd => LeftEyebrowOuterEnd,
            MouthLeftCorner => MouthRightCorner,
            MouthRightCorner => MouthLeftCorner,
            other => other,
        }
    }
}

impl fmt::Display for KeypointName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for KeypointName {
    type Err = KeypointError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        KeypointName::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| KeypointError::UnknownName(s.to_string()))
    }
}

/// Fifteen (x, y) landmarks in source-image pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KeypointSet {
    points: [(f64, f64); KEYPOINT_COUNT],
}

impl KeypointSet {
    pub fn new(points: [(f64, f64); KEYPOINT_COUNT]) -> Result<Self, KeypointError> {
        for (name, &(x, y)) in KeypointName::ALL.iter().zip(&points) {
            if !x.is_finite() || !y.is_finite() {
                return Err(KeypointError::NonFinite(*name));
            }
        }
        Ok(Self { points })
    }

    /// From 30 interleaved values `x0, y0, x1, y1, ...`.
    pub fn from_flat(values: &[f64]) -> Result<Self, KeypointError> {
        if values.len() != 2 * KEYPOINT_COUNT {
            return Err(KeypointError::Annotation(format!(
                "expected {} coordinates, got {}",
                2 * KEYPOINT_COUNT,
                values.len()
            )));
        }
        let mut points = [(0.0, 0.0); KEYPOINT_COUNT];
        for (i, p) in points.iter_mut().enumerate() {
            *p = (values[2 * i], values[2 * i + 1]);
        }
        Self::new(points)
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.points.iter().flat_map(|&(x, y)| [x, y]).collect()
    }

    pub fn points(&self) -> &[(f64, f64); KEYPOINT_COUNT] {
        &self.points
    }

    pub fn get(&self, name: KeypointName) -> (f64, f64) {
        self.points[name.index()]
    }

    pub fn iter(&self) -> impl Iterator<Item = (KeypointName, (f64, f64))> + '_ {
        KeypointName::ALL.into_iter().zip(self.points.iter().copied())
    }

    /// Applies `f` to every point.
    pub fn map(&self, mut f: impl FnMut(f64, f64) -> (f64, f64)) -> KeypointSet {
        let mut points = self.points;
        for p in points.iter_mut() {
            *p = f(p.0, p.1);
        }
        KeypointSet { points }
    }

    /// `(min_x, min_y, max_x, max_y)`.
    pub fn bounding_box(&self) -> (f64, f64, f64, f64) {
        self.points.iter().fold(
            (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY),
            |(a, b, c, d), &(x, y)| (a.min(x), b.min(y), c.max(x), d.max(y)),
        )
    }

    pub fn max_distance(&self, other: &KeypointSet) -> f64 {
        self.points
            .iter()
            .zip(&other.points)
            .map(|(a, b)| ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt())
            .fold(0.0, f64::max)
    }

    /// Manual-annotation JSON: an object mapping each canonical name to `[x, y]`.
    pub fn to_json(&self) -> String {
        let map: BTreeMap<&str, [f64; 2]> =
            self.iter().map(|(k, (x, y))| (k.as_str(), [x, y])).collect();
        serde_json::to_string_pretty(&map).expect("map of floats serializes")
    }

    pub fn from_json(text: &str) -> Result<KeypointSet, KeypointError> {
        let map: BTreeMap<String, [f64; 2]> =
            serde_json::from_str(text).map_err(|e| KeypointError::Annotation(e.to_string()))?;
        let mut points = [(f64::NAN, f64::NAN); KEYPOINT_COUNT];
        for (name, [x, y]) in &map {
            let k: KeypointName = name.parse()?;
            points[k.index()] = (*x, *y);
        }
        if let Some(missing) = KeypointName::ALL.iter().find(|k| points[k.index()].0.is_nan()) {
            return Err(KeypointError::Annotation(format!("missing {missing}")));
        }
        KeypointSet::new(points)
    }

    pub fn load_json(path: &Path) -> Result<KeypointSet, KeypointError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save_json(&self, path: &Path) -> Result<(), KeypointError> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }
}

/// Grayscale 96×96 faces with landmarks inside `[0, 96)`.
#[derive(Clone, Debug, Default)]
pub struct KeypointDataset {
    samples: Vec<(FaceImage, KeypointSet)>,
}

impl KeypointDataset {
    pub fn new(samples: Vec<(FaceImage, KeypointSet)>) -> Result<Self, KeypointError> {
        for (i, (img, kps)) in samples.iter().enumerate() {
            if img.width() != KEYPOINT_INPUT || img.height() != KEYPOINT_INPUT || img.channels() != 1 {
                return Err(KeypointError::Sample {
                    index: i,
                    msg: format!(
                        "image is {}x{}x{}, expected {KEYPOINT_INPUT}x{KEYPOINT_INPUT} gray",
                        img.width(),
                        img.height(),
                        img.channels()
                    ),
                });
            }
            let lim = KEYPOINT_INPUT as f64;
            if let Some((k, _)) = kps
                .iter()
                .find(|(_, (x, y))| !(0.0..lim).contains(x) || !(0.0..lim).contains(y))
            {
                return Err(KeypointError::Sample {
                    index: i,
                    msg: format!("{k} outside [0, {KEYPOINT_INPUT})"),
                });
            }
        }
        Ok(Self { samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[(FaceImage, KeypointSet)] {
        &self.samples
    }
}

/// Result of CSV ingestion.
#[derive(Clone, Debug)]
pub struct CsvLoad {
    pub dataset: KeypointDataset,
    /// Rows skipped because a coordinate was blank.
    pub dropped: usize,
}

/// Reads the public 15-keypoint CSV layout: 30 coordinate columns (matched
/// by `<name>_x` / `<name>_y` header when present, canonical order otherwise)
/// and an `Image` column of 9216 space-separated gray levels.
pub fn load_keypoint_csv(path: &Path) -> Result<CsvLoad, KeypointError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)
        .map_err(|e| KeypointError::Csv {
            line: 1,
            msg: e.to_string(),
        })?;
    let headers = reader
        .headers()
        .map_err(|e| KeypointError::Csv {
            line: 1,
            msg: e.to_string(),
        })?
        .clone();
    let mut columns = [0usize; 2 * KEYPOINT_COUNT];
    let named = KeypointName::ALL.iter().all(|k| {
        headers.iter().any(|h| h == format!("{}_x", k.as_str()))
            && headers.iter().any(|h| h == format!("{}_y", k.as_str()))
    });
    let image_col;
    if named {
        for (i, k) in KeypointName::ALL.iter().enumerate() {
            columns[2 * i] = headers.iter().position(|h| h == format!("{}_x", k.as_str())).unwrap();
            columns[2 * i + 1] = headers.iter().position(|h| h == format!("{}_y", k.as_str())).unwrap();
        }
        image_col = headers
            .iter()
            .position(|h| h.eq_ignore_ascii_case("image"))
            .ok_or(KeypointError::Csv {
                line: 1,
                msg: "no Image column".into(),
            })?;
    } else {
        if headers.len() != 2 * KEYPOINT_COUNT + 1 {
            return Err(KeypointError::Csv {
                line: 1,
                msg: format!("expected 31 columns, header has {}", headers.len()),
            });
        }
        for (i, c) in columns.iter_mut().enumerate() {
            *c = i;
        }
        image_col = 2 * KEYPOINT_COUNT;
    }

    let mut samples = Vec::new();
    let mut dropped = 0;
    for rec in reader.records() {
        let rec = rec.map_err(|e| KeypointError::Csv {
            line: e.position().map(|p| p.line()).unwrap_or(0),
            msg: e.to_string(),
        })?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let err = |msg: String| KeypointError::Csv { line, msg };
        if rec.len() != headers.len() {
            return Err(err(format!("{} fields, header has {}", rec.len(), headers.len())));
        }
        let mut coords = Vec::with_capacity(2 * KEYPOINT_COUNT);
        let mut blank = false;
        for &c in &columns {
            let field = rec[c].trim();
            if field.is_empty() {
                blank = true;
                break;
            }
            coords.push(
                field
                    .parse::<f64>()
                    .map_err(|_| err(format!("bad coordinate {field:?} in column {}", &headers[c])))?,
            );
        }
        if blank {
            dropped += 1;
            continue;
        }
        let pixels: Vec<u8> = rec[image_col]
            .split_whitespace()
            .map(|v| {
                v.parse::<f64>()
                    .map(crate::imaging::round_half_up)
                    .map_err(|_| err(format!("bad pixel value {v:?}")))
            })
            .collect::<Result<_, _>>()?;
        if pixels.len() != KEYPOINT_INPUT * KEYPOINT_INPUT {
            return Err(err(format!(
                "image has {} values, expected {}",
                pixels.len(),
                KEYPOINT_INPUT * KEYPOINT_INPUT
            )));
        }
        let img = FaceImage::new(KEYPOINT_INPUT, KEYPOINT_INPUT, 1, pixels)?;
        let kps = KeypointSet::from_flat(&coords).map_err(|e| err(e.to_string()))?;
        samples.push((img, kps));
    }
    if dropped > 0 {
        log::info!("{}: dropped {dropped} rows with missing coordinates", path.display());
    }
    let dataset = KeypointDataset::new(samples)?;
    Ok(CsvLoad { dataset, dropped })
}

/// Layer stack: four conv3×3 (16, 32, 64, 128 channels) each followed by
/// relu and 2×2 max-pool, then dense 512 → 128 → 30.
pub fn keypoint_layers() -> Vec<LayerSpec> {
    let mut layers = Vec::new();
    let mut c_in = 1;
    for c_out in [16, 32, 64, 128] {
        layers.push(LayerSpec::conv3x3(c_in, c_out));
        layers.push(LayerSpec::Relu);
        layers.push(LayerSpec::pool2());
        c_in = c_out;
    }
    let side = KEYPOINT_INPUT / 16;
    layers.push(LayerSpec::Flatten);
    layers.push(LayerSpec::dense(128 * side * side, 512));
    layers.push(LayerSpec::Relu);
    layers.push(LayerSpec::dense(512, 128));
    layers.push(LayerSpec::Relu);
    layers.push(LayerSpec::dense(128, 2 * KEYPOINT_COUNT));
    layers
}

pub fn build_keypoint_net(seed: u64) -> Network<f32> {
    Network::new(vec![1, KEYPOINT_INPUT, KEYPOINT_INPUT], keypoint_layers(), seed)
        .expect("keypoint layer stack is consistent")
}

/// Pixel → [−1, 1] for the 96-pixel training frame.
pub fn normalize_coord(v: f64) -> f64 {
    v / (KEYPOINT_INPUT as f64 / 2.0) - 1.0
}

pub fn denormalize_coord(u: f64) -> f64 {
    (u + 1.0) * (KEYPOINT_INPUT as f64 / 2.0)
}

fn gray_tensor(imgs: &[&FaceImage]) -> Tensor<f32> {
    let plane = KEYPOINT_INPUT * KEYPOINT_INPUT;
    let mut data = Vec::with_capacity(imgs.len() * plane);
    for img in imgs {
        data.extend(img.data().iter().map(|&v| v as f32 / 255.0));
    }
    Tensor::new(vec![imgs.len(), 1, KEYPOINT_INPUT, KEYPOINT_INPUT], data).expect("sized")
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct KeypointTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for KeypointTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 32,
            lr: 1e-3,
            seed: 0,
        }
    }
}

/// A trained (or initialized) landmark regressor.
#[derive(Clone, Debug)]
pub struct KeypointRegressor {
    pub network: Network<f32>,
    pub optimizer: Option<OptimizerState<f32>>,
}

impl KeypointRegressor {
    pub fn new(seed: u64) -> Self {
        Self {
            network: build_keypoint_net(seed),
            optimizer: None,
        }
    }

    /// Predicts landmarks in the source image's pixel frame. The image is
    /// grayscaled and resized to 96×96 first.
    pub fn predict(&self, img: &FaceImage) -> Result<KeypointSet, KeypointError> {
        let gray = resize(&to_grayscale(img), KEYPOINT_INPUT, KEYPOINT_INPUT)?;
        let out = self.network.infer(&gray_tensor(&[&gray]))?;
        let sx = img.width() as f64 / KEYPOINT_INPUT as f64;
        let sy = img.height() as f64 / KEYPOINT_INPUT as f64;
        let flat: Vec<f64> = out
            .data()
            .chunks_exact(2)
            .flat_map(|p| {
                let x = denormalize_coord(p[0] as f64);
                let y = denormalize_coord(p[1] as f64);
                [(x + 0.5) * sx - 0.5, (y + 0.5) * sy - 0.5]
            })
            .collect();
        KeypointSet::from_flat(&flat)
    }

    pub fn save(&self, path: &Path) -> Result<(), KeypointError> {
        let extra = self.optimizer.as_ref().map(|o| o.to_records()).unwrap_or_default();
        save_network(path, &self.network, &extra)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, KeypointError> {
        let records = load_checkpoint(path)?;
        let mut network = build_keypoint_net(0);
        network.load_state(&records)?;
        let optimizer = OptimizerState::from_records(&records)?;
        Ok(Self { network, optimizer })
    }
}

/// Mean-squared-error training on normalized coordinates. Returns the
/// regressor and the per-epoch mean training loss.
pub fn train_keypoints(
    dataset: &KeypointDataset,
    cfg: &KeypointTrainConfig,
) -> Result<(KeypointRegressor, Vec<f64>), KeypointError> {
    let reg = KeypointRegressor::new(cfg.seed);
    continue_training(reg, dataset, cfg)
}

/// Runs `cfg.epochs` more epochs on an existing regressor, keeping its
/// optimizer state (and step counter) when present.
pub fn continue_training(
    mut reg: KeypointRegressor,
    dataset: &KeypointDataset,
    cfg: &KeypointTrainConfig,
) -> Result<(KeypointRegressor, Vec<f64>), KeypointError> {
    if dataset.is_empty() {
        return Err(KeypointError::EmptyDataset);
    }
    let mut opt = match reg.optimizer.take() {
        Some(o) => o,
        None => OptimizerState::adam(cfg.lr)?,
    };
    let targets: Vec<Vec<f32>> = dataset
        .samples()
        .iter()
        .map(|(_, k)| k.to_flat().into_iter().map(|v| normalize_coord(v) as f32).collect())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6b70_7473);
    rng.set_stream(opt.step);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let batch = cfg.batch_size.max(1);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(batch) {
            let imgs: Vec<&FaceImage> = chunk.iter().map(|&i| &dataset.samples()[i].0).collect();
            let x = gray_tensor(&imgs);
            let t = Tensor::new(
                vec![chunk.len(), 2 * KEYPOINT_COUNT],
                chunk.iter().flat_map(|&i| targets[i].iter().copied()).collect(),
            )?;
            reg.network.zero_grad();
            let out = reg.network.forward(&x)?;
            let loss = mse_loss(&out, &t)?;
            reg.network.backward(&loss.grad)?;
            let mut params: Vec<_> = reg.network.params_mut().iter_mut().collect();
            opt.update(&mut params)?;
            total += loss.value * chunk.len() as f64;
        }
        let mean = total / dataset.len() as f64;
        if !mean.is_finite() {
            return Err(NnError::NonFinite(format!("keypoint loss at epoch {epoch}")).into());
        }
        log::debug!("keypoints epoch {epoch}: mse {mean:.6}");
        history.push(mean);
    }
    reg.optimizer = Some(opt);
    Ok((reg, history))
}
