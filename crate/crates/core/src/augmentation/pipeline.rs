//! The staged diver-face pipeline and dataset expansion.

use std::path::Path;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::color::{underwater_colorize, UnderwaterParams};
use super::crop::{auto_crop, tight_crop_rect, DEFAULT_TIGHT_MARGIN};
use super::fisheye::{fisheye, FisheyeParams};
use super::frontalize::frontalize;
use super::mask::{apply_mask, MaskTemplate, TemplateKind};
use super::model::Reference3DModel;
use super::AugmentError;
use crate::imaging::{crop, gray_world_balance, FaceImage};
use crate::keypoints::{KeypointRegressor, KeypointSet};

/// Stage letters and names in execution order.
pub const STAGE_NAMES: [(char, &str); 7] = [
    ('a', "frontalize"),
    ('b', "auto-crop"),
    ('c', "color-correct"),
    ('d', "mask"),
    ('e', "colorize"),
    ('f', "fisheye"),
    ('g', "tight-crop"),
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct StageToggles {
    pub frontalize: bool,
    pub auto_crop: bool,
    pub color_correct: bool,
    pub mask: bool,
    pub colorize: bool,
    pub fisheye: bool,
    pub tight_crop: bool,
}

impl Default for StageToggles {
    fn default() -> Self {
        Self::all(true)
    }
}

impl StageToggles {
    pub fn all(on: bool) -> Self {
        Self {
            frontalize: on,
            auto_crop: on,
            color_correct: on,
            mask: on,
            colorize: on,
            fisheye: on,
            tight_crop: on,
        }
    }

    fn as_array(&self) -> [bool; 7] {
        [
            self.frontalize,
            self.auto_crop,
            self.color_correct,
            self.mask,
            self.colorize,
            self.fisheye,
            self.tight_crop,
        ]
    }
}

/// Which template of a kind to composite.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateChoice {
    None,
    Random,
    /// Position among the templates of that kind.
    Index(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub stages: StageToggles,
    pub underwater: UnderwaterParams,
    pub fisheye_k: f64,
    pub tight_margin: f64,
    pub auto_crop_margin: f64,
    /// Relative jitter applied to depth, veil weight and fisheye strength.
    pub jitter: f64,
    pub mask: TemplateChoice,
    pub snorkel: TemplateChoice,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            stages: StageToggles::default(),
            underwater: UnderwaterParams::default(),
            fisheye_k: 0.25,
            tight_margin: DEFAULT_TIGHT_MARGIN,
            auto_crop_margin: 0.45,
            jitter: 0.15,
            mask: TemplateChoice::Random,
            snorkel: TemplateChoice::Random,
        }
    }
}

/// Where keypoints for the input come from.
#[derive(Clone, Copy, Debug)]
pub enum KeypointSource<'a> {
    /// Known keypoints, tracked geometrically through every stage.
    Given(&'a KeypointSet),
    /// Regressed on the (color-corrected) input and again in stage (c).
    Regressor(&'a KeypointRegressor),
    Unavailable,
}

#[derive(Clone, Debug)]
pub struct PipelineOutput {
    pub image: FaceImage,
    pub keypoints: Option<KeypointSet>,
    /// Output of every executed stage, tagged by letter.
    pub stages: Vec<(char, FaceImage)>,
    pub mask: Option<String>,
    pub snorkel: Option<String>,
}

impl PipelineOutput {
    /// Writes `<dir>/<stem>.stage_<x>.png` for every recorded stage.
    pub fn write_stages(&self, dir: &Path, stem: &str) -> Result<(), AugmentError> {
        for (letter, img) in &self.stages {
            img.save(&dir.join(format!("{stem}.stage_{letter}.png")))?;
        }
        Ok(())
    }
}

/// Independent per-item seed derived from a master seed.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(index);
    rng.next_u64()
}

fn pick<'t>(
    templates: &'t [MaskTemplate],
    kind: TemplateKind,
    choice: TemplateChoice,
    draw: f64,
) -> Result<Option<&'t MaskTemplate>, AugmentError> {
    let of_kind: Vec<&MaskTemplate> = templates.iter().filter(|t| t.kind == kind).collect();
    let idx = match choice {
        TemplateChoice::None => return Ok(None),
        TemplateChoice::Random => {
            if of_kind.is_empty() {
                return Err(AugmentError::Template(format!("no {kind:?} templates loaded")));
            }
            ((draw * of_kind.len() as f64) as usize).min(of_kind.len() - 1)
        }
        TemplateChoice::Index(i) => i,
    };
    of_kind
        .get(idx)
        .copied()
        .map(Some)
        .ok_or_else(|| AugmentError::Template(format!("{kind:?} index {idx} out of range ({} loaded)", of_kind.len())))
}

fn jittered(value: f64, jitter: f64, draw: f64) -> f64 {
    value * (1.0 + jitter * (2.0 * draw - 1.0))
}

fn need<'k>(kps: &'k Option<KeypointSet>, stage: &'static str) -> Result<&'k KeypointSet, AugmentError> {
    kps.as_ref().ok_or_else(|| AugmentError::Stage {
        stage,
        source: Box::new(AugmentError::InvalidParams("keypoints unavailable".into())),
    })
}

fn in_stage<T>(stage: &'static str, r: Result<T, AugmentError>) -> Result<T, AugmentError> {
    r.map_err(|e| AugmentError::Stage {
        stage,
        source: Box::new(e),
    })
}

/// Runs the enabled stages (a)→(g) on `img`. Template choices and parameter
/// jitter come from a generator seeded with `seed`, so equal inputs give
/// bit-identical outputs. Stage images are kept when `keep_stages` is set.
pub fn run_pipeline(
    img: &FaceImage,
    source: KeypointSource<'_>,
    templates: &[MaskTemplate],
    config: &PipelineConfig,
    seed: u64,
    keep_stages: bool,
) -> Result<PipelineOutput, AugmentError> {
    if !(config.jitter >= 0.0 && config.jitter < 1.0) {
        return Err(AugmentError::InvalidParams(format!("jitter must lie in [0, 1), got {}", config.jitter)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draws: [f64; 5] = std::array::from_fn(|_| rng.gen::<f64>());

    let regress = |stage: &'static str, image: &FaceImage| -> Result<KeypointSet, AugmentError> {
        match source {
            KeypointSource::Regressor(r) => in_stage(stage, r.predict(image).map_err(Into::into)),
            _ => unreachable!(),
        }
    };

    let mut image = img.clone();
    let mut kps: Option<KeypointSet> = match source {
        KeypointSource::Given(k) => Some(k.clone()),
        KeypointSource::Regressor(_) if config.stages.frontalize => {
            Some(regress(STAGE_NAMES[0].1, &gray_world_balance(img))?)
        }
        _ => None,
    };
    let mut out = PipelineOutput {
        image: img.clone(),
        keypoints: None,
        stages: Vec::new(),
        mask: None,
        snorkel: None,
    };
    let enabled = config.stages.as_array();
    for (i, &(letter, name)) in STAGE_NAMES.iter().enumerate() {
        if !enabled[i] {
            continue;
        }
        match letter {
            'a' => {
                let detected = need(&kps, name)?;
                let model = Reference3DModel::for_frame(image.width(), image.height());
                image = in_stage(name, frontalize(&image, detected, &model))?;
                kps = Some(model.reference_keypoints());
            }
            'b' => {
                let k = need(&kps, name)?;
                let (cropped, moved) = in_stage(name, auto_crop(&image, k, config.auto_crop_margin))?;
                image = cropped;
                kps = Some(moved);
            }
            'c' => {
                image = gray_world_balance(&image);
                if let KeypointSource::Regressor(_) = source {
                    kps = Some(regress(name, &image)?);
                }
            }
            'd' => {
                let k = need(&kps, name)?.clone();
                let mask = in_stage(name, pick(templates, TemplateKind::Mask, config.mask, draws[0]))?;
                let snorkel = in_stage(name, pick(templates, TemplateKind::Snorkel, config.snorkel, draws[1]))?;
                for t in [mask, snorkel].into_iter().flatten() {
                    image = in_stage(name, apply_mask(&image, &k, t))?;
                }
                out.mask = mask.map(|t| t.name.clone());
                out.snorkel = snorkel.map(|t| t.name.clone());
            }
            'e' => {
                let mut p = config.underwater;
                p.depth = jittered(p.depth, config.jitter, draws[2]);
                p.beta = jittered(p.beta, config.jitter, draws[3]).clamp(0.0, 1.0);
                image = in_stage(name, underwater_colorize(&image, &p))?;
            }
            'f' => {
                let k = jittered(config.fisheye_k, config.jitter, draws[4]);
                let p = FisheyeParams::for_image(image.width(), image.height(), k);
                image = in_stage(name, fisheye(&image, &p))?;
                kps = kps.map(|set| set.map(|x, y| p.dest_point(x, y).unwrap_or((x, y))));
            }
            'g' => {
                let k = need(&kps, name)?;
                let (x0, y0, x1, y1) =
                    in_stage(name, tight_crop_rect(image.width(), image.height(), k, config.tight_margin))?;
                image = in_stage(name, crop(&image, x0, y0, x1 - x0 + 1, y1 - y0 + 1).map_err(Into::into))?;
                kps = kps.map(|set| set.map(|x, y| (x - x0 as f64, y - y0 as f64)));
            }
            _ => unreachable!(),
        }
        if keep_stages {
            out.stages.push((letter, image.clone()));
        }
    }
    out.image = image;
    out.keypoints = kps;
    Ok(out)
}

/// One entry of an expanded dataset.
#[derive(Clone, Debug)]
pub struct ExpandedSample {
    pub base_index: usize,
    /// `(mask, snorkel)` template names; `None` for the retained original.
    pub variant: Option<(String, String)>,
    pub image: FaceImage,
    /// Tracked landmarks when the base face had them.
    pub keypoints: Option<KeypointSet>,
}

/// Keeps every base face and adds one diver variant per (mask, snorkel)
/// pair. Each base image draws from its own generator derived from
/// `(seed, index)`, so the result does not depend on thread scheduling.
pub fn expand_dataset(
    bases: &[(FaceImage, KeypointSource<'_>)],
    templates: &[MaskTemplate],
    config: &PipelineConfig,
    seed: u64,
) -> Result<Vec<ExpandedSample>, AugmentError> {
    let masks = templates.iter().filter(|t| t.kind == TemplateKind::Mask).count();
    let snorkels = templates.iter().filter(|t| t.kind == TemplateKind::Snorkel).count();
    if masks == 0 || snorkels == 0 {
        return Err(AugmentError::Template("expansion needs at least one mask and one snorkel".into()));
    }
    let one = |i: usize| -> Result<Vec<ExpandedSample>, AugmentError> {
        let (img, source) = &bases[i];
        let image_seed = derive_seed(seed, i as u64);
        let mut out = vec![ExpandedSample {
            base_index: i,
            variant: None,
            image: img.clone(),
            keypoints: match source {
                KeypointSource::Given(k) => Some((*k).clone()),
                _ => None,
            },
        }];
        for m in 0..masks {
            for s in 0..snorkels {
                let cfg = PipelineConfig {
                    mask: TemplateChoice::Index(m),
                    snorkel: TemplateChoice::Index(s),
                    ..config.clone()
                };
                let r = run_pipeline(img, *source, templates, &cfg, derive_seed(image_seed, (m * snorkels + s) as u64), false)?;
                out.push(ExpandedSample {
                    base_index: i,
                    variant: Some((r.mask.unwrap_or_default(), r.snorkel.unwrap_or_default())),
                    image: r.image,
                    keypoints: r.keypoints,
                });
            }
        }
        Ok(out)
    };
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get()).min(bases.len().max(1));
    let results: Vec<Result<Vec<ExpandedSample>, AugmentError>> = if threads <= 1 {
        (0..bases.len()).map(one).collect()
    } else {
        let mut slots: Vec<Option<Result<Vec<ExpandedSample>, AugmentError>>> = (0..bases.len()).map(|_| None).collect();
        std::thread::scope(|scope| {
            let chunk = bases.len().div_ceil(threads);
            for (c, part) in slots.chunks_mut(chunk).enumerate() {
                let one = &one;
                scope.spawn(move || {
                    for (j, slot) in part.iter_mut().enumerate() {
                        *slot = Some(one(c * chunk + j));
                    }
                });
            }
        });
        slots.into_iter().map(|s| s.expect("filled")).collect()
    };
    let mut out = Vec::new();
    for r in results {
        out.extend(r?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augmentation::builtin_templates;

    fn face() -> (FaceImage, KeypointSet) {
        let model = Reference3DModel::canonical(64);
        let data = (0..64 * 64)
            .flat_map(|i| {
                let (x, y) = (i % 64, i / 64);
                [(x * 4) as u8, (y * 4) as u8, ((x + y) * 2) as u8]
            })
            .collect();
        (FaceImage::new(64, 64, 3, data).unwrap(), model.reference_keypoints())
    }

    #[test]
    fn all_disabled_is_identity() {
        let (img, k) = face();
        let cfg = PipelineConfig {
            stages: StageToggles::all(false),
            ..Default::default()
        };
        let out = run_pipeline(&img, KeypointSource::Given(&k), &[], &cfg, 1, true).unwrap();
        assert_eq!(out.image, img);
        assert!(out.stages.is_empty());
    }

    #[test]
    fn deterministic_given_seed() {
        let (img, k) = face();
        let t = builtin_templates();
        let cfg = PipelineConfig::default();
        let a = run_pipeline(&img, KeypointSource::Given(&k), &t, &cfg, 42, true).unwrap();
        let b = run_pipeline(&img, KeypointSource::Given(&k), &t, &cfg, 42, true).unwrap();
        assert_eq!(a.image, b.image);
        assert_eq!(a.stages.len(), 7);
        assert_eq!(a.stages.iter().map(|s| s.0).collect::<String>(), "abcdefg");
    }

    #[test]
    fn mask_without_keypoints_names_stage() {
        let (img, _) = face();
        let cfg = PipelineConfig {
            stages: StageToggles {
                mask: true,
                ..StageToggles::all(false)
            },
            ..Default::default()
        };
        let err = run_pipeline(&img, KeypointSource::Unavailable, &builtin_templates(), &cfg, 0, false).unwrap_err();
        assert!(err.to_string().starts_with("stage mask"), "{err}");
    }

    #[test]
    fn expansion_counts() {
        let (img, k) = face();
        let bases = vec![(img.clone(), KeypointSource::Given(&k)), (img, KeypointSource::Given(&k))];
        let cfg = PipelineConfig {
            stages: StageToggles {
                frontalize: false,
                fisheye: false,
                ..Default::default()
            },
            ..Default::default()
        };
        let out = expand_dataset(&bases, &builtin_templates(), &cfg, 3).unwrap();
        assert_eq!(out.len(), 2 + 8 * 2);
        assert_eq!(out.iter().filter(|s| s.variant.is_none()).count(), 2);
        let pairs: std::collections::BTreeSet<_> = out.iter().filter_map(|s| s.variant.clone()).collect();
        assert_eq!(pairs.len(), 8);
    }
}
