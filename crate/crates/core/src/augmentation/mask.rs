//! Keypoint-anchored RGBA overlays (dive masks and snorkels).

use std::path::{Path, PathBuf};

use nalgebra::{Matrix2, Matrix2x3};
use serde::{Deserialize, Serialize};

use super::AugmentError;
use crate::imaging::{alpha_composite, warp_affine, AffineTransform, FaceImage};
use crate::keypoints::{KeypointName, KeypointSet};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateKind {
    Mask,
    Snorkel,
}

/// A template-space point tied to a keypoint.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Anchor {
    pub x: f64,
    pub y: f64,
    pub keypoint: KeypointName,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    kind: TemplateKind,
    anchors: Vec<Anchor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskTemplate {
    pub name: String,
    pub kind: TemplateKind,
    pub image: FaceImage,
    pub anchors: Vec<Anchor>,
}

impl MaskTemplate {
    pub fn new(name: impl Into<String>, kind: TemplateKind, image: FaceImage, anchors: Vec<Anchor>) -> Result<Self, AugmentError> {
        let name = name.into();
        if image.channels() != 4 {
            return Err(AugmentError::Template(format!("{name}: overlay must be RGBA")));
        }
        let pts: Vec<(f64, f64)> = anchors.iter().map(|a| (a.x, a.y)).collect();
        check_spread(&pts).map_err(|e| AugmentError::Template(format!("{name}: {e}")))?;
        Ok(Self {
            name,
            kind,
            image,
            anchors,
        })
    }

    /// Reads `<stem>.png` with its `<stem>.json` sidecar.
    pub fn load(png: &Path) -> Result<Self, AugmentError> {
        let sidecar = png.with_extension("json");
        let text = std::fs::read_to_string(&sidecar).map_err(|source| AugmentError::Io {
            path: sidecar.display().to_string(),
            source,
        })?;
        let meta: Sidecar = serde_json::from_str(&text).map_err(|source| AugmentError::Json {
            path: sidecar.display().to_string(),
            source,
        })?;
        let image = FaceImage::load(png)?.to_rgba();
        let name = png.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        Self::new(name, meta.kind, image, meta.anchors)
    }

    /// Writes `<dir>/<name>.png` and `<dir>/<name>.json`.
    pub fn save(&self, dir: &Path) -> Result<PathBuf, AugmentError> {
        let png = dir.join(format!("{}.png", self.name));
        self.image.save(&png)?;
        let sidecar = Sidecar {
            kind: self.kind,
            anchors: self.anchors.clone(),
        };
        let json = serde_json::to_string_pretty(&sidecar).expect("serializable");
        let path = png.with_extension("json");
        std::fs::write(&path, json).map_err(|source| AugmentError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Ok(png)
    }
}

/// Loads every `*.png` with a sidecar in `dir`, sorted by file name.
pub fn load_bundle(dir: &Path) -> Result<Vec<MaskTemplate>, AugmentError> {
    let io = |source| AugmentError::Io {
        path: dir.display().to_string(),
        source,
    };
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(io)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "png") && p.with_extension("json").exists())
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(AugmentError::Template(format!("no templates in {}", dir.display())));
    }
    paths.iter().map(|p| MaskTemplate::load(p)).collect()
}

fn check_spread(pts: &[(f64, f64)]) -> Result<(), String> {
    if pts.len() < 3 {
        return Err(format!("need >= 3 anchors, got {}", pts.len()));
    }
    if pts.iter().any(|p| !(p.0.is_finite() && p.1.is_finite())) {
        return Err("non-finite anchor".into());
    }
    let n = pts.len() as f64;
    let (mx, my) = (pts.iter().map(|p| p.0).sum::<f64>() / n, pts.iter().map(|p| p.1).sum::<f64>() / n);
    let mut cov = Matrix2::zeros();
    for p in pts {
        let d = nalgebra::Vector2::new(p.0 - mx, p.1 - my);
        cov += d * d.transpose();
    }
    let eig = cov.symmetric_eigenvalues();
    let (lo, hi) = (eig.min(), eig.max());
    if !(hi > 0.0) || lo / hi < 1e-8 {
        return Err("anchors are collinear".into());
    }
    Ok(())
}

/// Least-squares affine map taking `src[i]` to `dst[i]`.
pub fn fit_affine(src: &[(f64, f64)], dst: &[(f64, f64)]) -> Result<AffineTransform, AugmentError> {
    if src.len() != dst.len() {
        return Err(AugmentError::Degenerate(format!("{} sources vs {} targets", src.len(), dst.len())));
    }
    check_spread(src).map_err(AugmentError::Degenerate)?;
    let n = src.len() as f64;
    let ms = (src.iter().map(|p| p.0).sum::<f64>() / n, src.iter().map(|p| p.1).sum::<f64>() / n);
    let md = (dst.iter().map(|p| p.0).sum::<f64>() / n, dst.iter().map(|p| p.1).sum::<f64>() / n);
    // Centered normal equations: A · Σ s sᵀ = Σ d sᵀ.
    let mut sst = Matrix2::zeros();
    let mut dst_s = Matrix2::zeros();
    for (s, d) in src.iter().zip(dst) {
        let sv = nalgebra::Vector2::new(s.0 - ms.0, s.1 - ms.1);
        let dv = nalgebra::Vector2::new(d.0 - md.0, d.1 - md.1);
        sst += sv * sv.transpose();
        dst_s += dv * sv.transpose();
    }
    let inv = sst
        .try_inverse()
        .ok_or_else(|| AugmentError::Degenerate("anchors are collinear".into()))?;
    let a = dst_s * inv;
    let t = nalgebra::Vector2::new(md.0, md.1) - a * nalgebra::Vector2::new(ms.0, ms.1);
    let m = Matrix2x3::from_columns(&[a.column(0).into(), a.column(1).into(), t]);
    let out = AffineTransform::new([[m[(0, 0)], m[(0, 1)], m[(0, 2)]], [m[(1, 0)], m[(1, 1)], m[(1, 2)]]]);
    if !out.is_finite() {
        return Err(AugmentError::Degenerate("non-finite fit".into()));
    }
    Ok(out)
}

/// Transparent border added around a template before warping so that
/// clamp-to-edge sampling outside it stays transparent.
const PAD: usize = 2;

fn padded(img: &FaceImage) -> FaceImage {
    let (w, h) = (img.width() + 2 * PAD, img.height() + 2 * PAD);
    let mut out = FaceImage::filled(w, h, &[0, 0, 0, 0]).expect("nonzero size");
    for y in 0..img.height() {
        for x in 0..img.width() {
            out.pixel_mut(x + PAD, y + PAD).copy_from_slice(img.pixel(x, y));
        }
    }
    out
}

/// Template → image transform fitted on the anchors.
pub fn template_transform(kps: &KeypointSet, template: &MaskTemplate) -> Result<AffineTransform, AugmentError> {
    let src: Vec<(f64, f64)> = template.anchors.iter().map(|a| (a.x, a.y)).collect();
    let dst: Vec<(f64, f64)> = template.anchors.iter().map(|a| kps.get(a.keypoint)).collect();
    fit_affine(&src, &dst)
}

/// Composites `template` onto `img`, placed by the least-squares affine fit
/// from its anchors to `kps`. The result is RGB.
pub fn apply_mask(img: &FaceImage, kps: &KeypointSet, template: &MaskTemplate) -> Result<FaceImage, AugmentError> {
    let fwd = template_transform(kps, template)?;
    // image → padded template coordinates
    let back = AffineTransform::translation(PAD as f64, PAD as f64).then_after(&fwd.inverse()?);
    let overlay = warp_affine(&padded(&template.image), &back, img.width(), img.height())?;
    let base = if img.channels() == 3 { img.clone() } else { img.to_rgb() };
    Ok(alpha_composite(&base, &overlay)?)
}
