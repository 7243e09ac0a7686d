//! Procedurally drawn placeholder templates: four dive masks and two
//! snorkels on a square canvas whose anchors sit at the reference-view
//! keypoint positions.

use std::path::{Path, PathBuf};

use super::mask::{Anchor, MaskTemplate, TemplateKind};
use super::model::Reference3DModel;
use super::AugmentError;
use crate::imaging::{round_half_up, FaceImage};
use crate::keypoints::KeypointName;

pub const TEMPLATE_SIZE: usize = 128;

const SUBSAMPLES: usize = 3;

/// Rasterizes `shade` with 3×3 supersampling; `shade` returns straight
/// (non-premultiplied) RGBA or `None` for empty.
fn paint(size: usize, shade: impl Fn(f64, f64) -> Option<[f64; 4]>) -> FaceImage {
    let mut data = Vec::with_capacity(size * size * 4);
    let n = (SUBSAMPLES * SUBSAMPLES) as f64;
    for y in 0..size {
        for x in 0..size {
            let mut acc = [0.0f64; 4];
            for sy in 0..SUBSAMPLES {
                for sx in 0..SUBSAMPLES {
                    let px = x as f64 - 0.5 + (sx as f64 + 0.5) / SUBSAMPLES as f64;
                    let py = y as f64 - 0.5 + (sy as f64 + 0.5) / SUBSAMPLES as f64;
                    if let Some(c) = shade(px, py) {
                        let a = c[3] / 255.0;
                        for i in 0..3 {
                            acc[i] += c[i] * a;
                        }
                        acc[3] += a;
                    }
                }
            }
            if acc[3] > 0.0 {
                let rgb = [acc[0] / acc[3], acc[1] / acc[3], acc[2] / acc[3]];
                data.extend([
                    round_half_up(rgb[0]),
                    round_half_up(rgb[1]),
                    round_half_up(rgb[2]),
                    round_half_up(255.0 * acc[3] / n),
                ]);
            } else {
                data.extend([0, 0, 0, 0]);
            }
        }
    }
    FaceImage::new(size, size, 4, data).expect("sized buffer")
}

fn ellipse(x: f64, y: f64, cx: f64, cy: f64, rx: f64, ry: f64) -> f64 {
    ((x - cx) / rx).powi(2) + ((y - cy) / ry).powi(2)
}

fn rounded_rect(x: f64, y: f64, x0: f64, y0: f64, x1: f64, y1: f64, r: f64) -> bool {
    let qx = (x0 + r - x).max(x - (x1 - r)).max(0.0);
    let qy = (y0 + r - y).max(y - (y1 - r)).max(0.0);
    x >= x0 && x <= x1 && y >= y0 && y <= y1 && qx * qx + qy * qy <= r * r
}

fn anchors(names: &[KeypointName]) -> Vec<Anchor> {
    let reference = Reference3DModel::canonical(TEMPLATE_SIZE).reference_keypoints();
    names
        .iter()
        .map(|&keypoint| {
            let (x, y) = reference.get(keypoint);
            Anchor { x, y, keypoint }
        })
        .collect()
}

const MASK_ANCHORS: [KeypointName; 7] = [
    KeypointName::LeftEyeCenter,
    KeypointName::RightEyeCenter,
    KeypointName::LeftEyeOuterCorner,
    KeypointName::RightEyeOuterCorner,
    KeypointName::LeftEyebrowOuterEnd,
    KeypointName::RightEyebrowOuterEnd,
    KeypointName::NoseTip,
];

const SNORKEL_ANCHORS: [KeypointName; 6] = [
    KeypointName::MouthLeftCorner,
    KeypointName::MouthRightCorner,
    KeypointName::MouthCenterTopLip,
    KeypointName::MouthCenterBottomLip,
    KeypointName::NoseTip,
    KeypointName::LeftEyeOuterCorner,
];

enum Lens {
    Twin { rx: f64, ry: f64 },
    Single { half_w: f64, half_h: f64, corner: f64 },
}

/// Goggle with a frame, tinted glass, nose pocket and strap.
fn goggle(lens: Lens, frame: [f64; 3], glass: [f64; 4]) -> FaceImage {
    let s = TEMPLATE_SIZE as f64;
    let c = (s - 1.0) / 2.0;
    let eye_dx = 0.13 * s;
    let eye_y = c - 0.06 * s;
    let border = 3.0;
    let strap_half = 4.0;
    paint(TEMPLATE_SIZE, move |x, y| {
        let (inner, outer, reach) = match lens {
            Lens::Twin { rx, ry } => {
                let d = ellipse(x, y, c - eye_dx, eye_y, rx, ry).min(ellipse(x, y, c + eye_dx, eye_y, rx, ry));
                let d_out = ellipse(x, y, c - eye_dx, eye_y, rx + border, ry + border)
                    .min(ellipse(x, y, c + eye_dx, eye_y, rx + border, ry + border));
                let bridge = (x - c).abs() < eye_dx && (y - eye_y).abs() < 2.5;
                (d <= 1.0, d_out <= 1.0 || bridge, eye_dx + rx + border)
            }
            Lens::Single { half_w, half_h, corner } => (
                rounded_rect(x, y, c - half_w, eye_y - half_h, c + half_w, eye_y + half_h, corner),
                rounded_rect(
                    x,
                    y,
                    c - half_w - border,
                    eye_y - half_h - border,
                    c + half_w + border,
                    eye_y + half_h + border,
                    corner + border,
                ),
                half_w + border,
            ),
        };
        // Nose pocket: a rounded wedge under the lenses.
        let nose_top = eye_y + 4.0;
        let nose_bottom = c + 0.09 * s;
        let t = (y - nose_top) / (nose_bottom - nose_top);
        let pocket = (0.0..=1.0).contains(&t) && (x - c).abs() <= 9.0 - 3.0 * t;
        let strap = (y - eye_y).abs() <= strap_half && (x - c).abs() >= reach - 1.0;
        if inner {
            Some(glass)
        } else if outer || pocket || strap {
            Some([frame[0], frame[1], frame[2], 255.0])
        } else {
            None
        }
    })
}

/// Tube on the subject's left (image right) bending into a mouthpiece.
fn snorkel(tube: [f64; 3], mouthpiece: [f64; 3], tube_x: f64, half: f64) -> FaceImage {
    let s = TEMPLATE_SIZE as f64;
    let c = (s - 1.0) / 2.0;
    let mouth_y = c + 0.19 * s;
    let bend_r = 8.0;
    paint(TEMPLATE_SIZE, move |x, y| {
        let vertical = (x - tube_x).abs() <= half && y >= 2.0 && y <= mouth_y - bend_r;
        let horizontal = (y - mouth_y).abs() <= half && x >= c + 6.0 && x <= tube_x - bend_r;
        // Quarter torus joining the two runs.
        let (bx, by) = (tube_x - bend_r, mouth_y - bend_r);
        let r = ((x - bx).powi(2) + (y - by).powi(2)).sqrt();
        let bend = x >= bx && y >= by && (r - bend_r).abs() <= half;
        let mouth = ellipse(x, y, c, mouth_y, 11.0, 7.0) <= 1.0;
        let top_band = (x - tube_x).abs() <= half + 1.5 && (2.0..=8.0).contains(&y);
        if mouth {
            Some([mouthpiece[0], mouthpiece[1], mouthpiece[2], 255.0])
        } else if vertical || horizontal || bend || top_band {
            Some([tube[0], tube[1], tube[2], 255.0])
        } else {
            None
        }
    })
}

/// The six built-in templates: `mask_0..3`, `snorkel_0..1`.
pub fn builtin_templates() -> Vec<MaskTemplate> {
    let masks = [
        goggle(Lens::Twin { rx: 14.0, ry: 10.0 }, [20.0, 20.0, 24.0], [150.0, 200.0, 220.0, 90.0]),
        goggle(
            Lens::Single {
                half_w: 29.0,
                half_h: 12.0,
                corner: 6.0,
            },
            [20.0, 60.0, 160.0],
            [170.0, 210.0, 230.0, 80.0],
        ),
        goggle(Lens::Twin { rx: 12.5, ry: 12.5 }, [230.0, 190.0, 30.0], [120.0, 160.0, 170.0, 110.0]),
        goggle(
            Lens::Single {
                half_w: 33.0,
                half_h: 14.0,
                corner: 12.0,
            },
            [40.0, 120.0, 120.0],
            [200.0, 220.0, 240.0, 70.0],
        ),
    ];
    let snorkels = [
        snorkel([240.0, 120.0, 20.0], [30.0, 30.0, 30.0], 104.0, 4.0),
        snorkel([150.0, 220.0, 40.0], [60.0, 60.0, 70.0], 108.0, 3.5),
    ];
    let mut out = Vec::new();
    for (i, img) in masks.into_iter().enumerate() {
        out.push(MaskTemplate::new(format!("mask_{i}"), TemplateKind::Mask, img, anchors(&MASK_ANCHORS)).expect("valid"));
    }
    for (i, img) in snorkels.into_iter().enumerate() {
        out.push(
            MaskTemplate::new(format!("snorkel_{i}"), TemplateKind::Snorkel, img, anchors(&SNORKEL_ANCHORS))
                .expect("valid"),
        );
    }
    out
}

/// Writes the built-in bundle into `dir` (created if missing).
pub fn write_bundle(dir: &Path) -> Result<Vec<PathBuf>, AugmentError> {
    std::fs::create_dir_all(dir).map_err(|source| AugmentError::Io {
        path: dir.display().to_string(),
        source,
    })?;
    builtin_templates().iter().map(|t| t.save(dir)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn six_templates_four_masks_two_snorkels() {
        let t = builtin_templates();
        assert_eq!(t.len(), 6);
        assert_eq!(t.iter().filter(|t| t.kind == TemplateKind::Mask).count(), 4);
        for tpl in &t {
            let opaque = tpl.image.data().chunks_exact(4).filter(|p| p[3] == 255).count();
            assert!(opaque > 200, "{} has {opaque} opaque pixels", tpl.name);
        }
    }
}
