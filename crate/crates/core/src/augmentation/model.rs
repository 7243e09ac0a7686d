//! Reference 3-D landmark model and camera estimation by direct linear
//! transform.

use nalgebra::{DMatrix, Matrix3, Matrix3x4, Matrix4, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use super::AugmentError;
use crate::keypoints::{KeypointName, KeypointSet, KEYPOINT_COUNT};

/// Canonical landmarks in model space (x right in the image, y up, z toward
/// the camera), unit ≈ one reference-frame width. Subject-left points have
/// positive x.
const CANONICAL_LANDMARKS: [[f64; 3]; KEYPOINT_COUNT] = [
    [0.130, 0.060, 0.020],   // left eye center
    [-0.130, 0.060, 0.020],  // right eye center
    [0.070, 0.058, 0.030],   // left eye inner corner
    [-0.070, 0.058, 0.030],  // right eye inner corner
    [0.190, 0.056, -0.010],  // left eye outer corner
    [-0.190, 0.056, -0.010], // right eye outer corner
    [0.055, 0.130, 0.050],   // left eyebrow inner end
    [-0.055, 0.130, 0.050],  // right eyebrow inner end
    [0.215, 0.120, -0.020],  // left eyebrow outer end
    [-0.215, 0.120, -0.020], // right eyebrow outer end
    [0.000, -0.070, 0.130],  // nose tip
    [0.095, -0.180, 0.010],  // mouth left corner
    [-0.095, -0.180, 0.010], // mouth right corner
    [0.000, -0.160, 0.045],  // mouth center top lip
    [0.000, -0.215, 0.040],  // mouth center bottom lip
];

/// A 3×4 camera matrix.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectionMatrix {
    pub m: [[f64; 4]; 3],
}

impl ProjectionMatrix {
    pub fn from_matrix(p: &Matrix3x4<f64>) -> Self {
        let mut m = [[0.0; 4]; 3];
        for (r, row) in m.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = p[(r, c)];
            }
        }
        Self { m }
    }

    pub fn to_matrix(&self) -> Matrix3x4<f64> {
        Matrix3x4::from_fn(|r, c| self.m[r][c])
    }

    pub fn is_finite(&self) -> bool {
        self.m.iter().flatten().all(|v| v.is_finite())
    }

    pub fn rank(&self) -> usize {
        self.to_matrix().rank(1e-12)
    }

    /// Homogeneous projection; `None` when the point is at infinity.
    pub fn project(&self, p: [f64; 3]) -> Option<(f64, f64)> {
        let m = &self.m;
        let w = m[2][0] * p[0] + m[2][1] * p[1] + m[2][2] * p[2] + m[2][3];
        if w.abs() < 1e-300 {
            return None;
        }
        let u = m[0][0] * p[0] + m[0][1] * p[1] + m[0][2] * p[2] + m[0][3];
        let v = m[1][0] * p[0] + m[1][1] * p[1] + m[1][2] * p[2] + m[1][3];
        Some((u / w, v / w))
    }

    pub fn frobenius_normalized(&self) -> Self {
        let n = self.m.iter().flatten().map(|v| v * v).sum::<f64>().sqrt();
        let mut out = *self;
        out.m.iter_mut().flatten().for_each(|v| *v /= n);
        out
    }

    /// |cos| of the angle between the two matrices viewed as 12-vectors.
    pub fn cosine_to(&self, other: &ProjectionMatrix) -> f64 {
        let a: Vec<f64> = self.m.iter().flatten().copied().collect();
        let b: Vec<f64> = other.m.iter().flatten().copied().collect();
        let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
        (dot / (na * nb)).abs()
    }
}

/// Bilaterally symmetric 3-D landmark model with a reference frontal view.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Reference3DModel {
    /// Landmarks in [`KeypointName::ALL`] order.
    pub landmarks: [[f64; 3]; KEYPOINT_COUNT],
    pub width: usize,
    pub height: usize,
    /// Pixels per model unit in the reference view.
    pub scale: f64,
    /// Depth of the planar proxy behind the landmarks, used for the border.
    pub backdrop_depth: f64,
}

impl Reference3DModel {
    /// Canonical model rendered at `size × size`.
    pub fn canonical(size: usize) -> Self {
        Self {
            landmarks: CANONICAL_LANDMARKS,
            width: size,
            height: size,
            scale: size as f64,
            backdrop_depth: -0.08,
        }
    }

    /// Canonical model for a `width × height` frame, scaled by the shorter side.
    pub fn for_frame(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            scale: width.min(height) as f64,
            ..Self::canonical(width)
        }
    }

    /// Largest deviation from mirror symmetry about x = 0.
    pub fn symmetry_error(&self) -> f64 {
        KeypointName::ALL
            .iter()
            .map(|&k| {
                let a = self.landmarks[k.index()];
                let b = self.landmarks[k.mirror().index()];
                (a[0] + b[0]).abs().max((a[1] - b[1]).abs()).max((a[2] - b[2]).abs())
            })
            .fold(0.0, f64::max)
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.width as f64 - 1.0) / 2.0, (self.height as f64 - 1.0) / 2.0)
    }

    /// Orthographic camera producing the reference frontal view.
    pub fn reference_camera(&self) -> ProjectionMatrix {
        let (cx, cy) = self.center();
        ProjectionMatrix {
            m: [
                [self.scale, 0.0, 0.0, cx],
                [0.0, -self.scale, 0.0, cy],
                [0.0, 0.0, 0.0, 1.0],
            ],
        }
    }

    /// Landmarks as seen in the reference frontal view.
    pub fn reference_keypoints(&self) -> KeypointSet {
        let cam = self.reference_camera();
        let mut pts = [(0.0, 0.0); KEYPOINT_COUNT];
        for (p, l) in pts.iter_mut().zip(&self.landmarks) {
            *p = cam.project(*l).expect("affine camera");
        }
        KeypointSet::new(pts).expect("finite model")
    }

    /// Back-projects a reference-view pixel onto the plane `z = depth`.
    pub fn unproject_reference(&self, u: f64, v: f64, depth: f64) -> [f64; 3] {
        let (cx, cy) = self.center();
        [(u - cx) / self.scale, -(v - cy) / self.scale, depth]
    }
}

/// Camera estimate with its reprojection residuals in pixels.
#[derive(Clone, Copy, Debug)]
pub struct ProjectionFit {
    pub matrix: ProjectionMatrix,
    pub rms_error: f64,
    pub max_error: f64,
}

fn normalization_2d(pts: &[(f64, f64)]) -> Matrix3<f64> {
    let n = pts.len() as f64;
    let cx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let cy = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let d = pts.iter().map(|p| ((p.0 - cx).powi(2) + (p.1 - cy).powi(2)).sqrt()).sum::<f64>() / n;
    let s = if d > 0.0 { 2f64.sqrt() / d } else { 1.0 };
    Matrix3::new(s, 0.0, -s * cx, 0.0, s, -s * cy, 0.0, 0.0, 1.0)
}

fn normalization_3d(pts: &[[f64; 3]]) -> Matrix4<f64> {
    let n = pts.len() as f64;
    let c: [f64; 3] = std::array::from_fn(|i| pts.iter().map(|p| p[i]).sum::<f64>() / n);
    let d = pts
        .iter()
        .map(|p| ((p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2) + (p[2] - c[2]).powi(2)).sqrt())
        .sum::<f64>()
        / n;
    let s = if d > 0.0 { 3f64.sqrt() / d } else { 1.0 };
    Matrix4::new(
        s, 0.0, 0.0, -s * c[0], 0.0, s, 0.0, -s * c[1], 0.0, 0.0, s, -s * c[2], 0.0, 0.0, 0.0, 1.0,
    )
}

/// Direct linear transform over arbitrary 3-D ↔ 2-D correspondences
/// (at least six), with Hartley normalization of both point sets.
pub fn dlt(object: &[[f64; 3]], image: &[(f64, f64)]) -> Result<ProjectionFit, AugmentError> {
    if object.len() != image.len() || object.len() < 6 {
        return Err(AugmentError::Degenerate(format!(
            "need >= 6 matched correspondences, got {} / {}",
            object.len(),
            image.len()
        )));
    }
    let t2 = normalization_2d(image);
    let t3 = normalization_3d(object);
    let n = object.len();
    let mut a = DMatrix::<f64>::zeros(2 * n, 12);
    for (i, (o, p)) in object.iter().zip(image).enumerate() {
        let x = t3 * Vector4::new(o[0], o[1], o[2], 1.0);
        let u = t2 * Vector3::new(p.0, p.1, 1.0);
        for j in 0..4 {
            a[(2 * i, j)] = x[j];
            a[(2 * i, 8 + j)] = -u[0] * x[j];
            a[(2 * i + 1, 4 + j)] = x[j];
            a[(2 * i + 1, 8 + j)] = -u[1] * x[j];
        }
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t.ok_or_else(|| AugmentError::Degenerate("SVD failed".into()))?;
    let sv = &svd.singular_values;
    let mut order: Vec<usize> = (0..sv.len()).collect();
    order.sort_by(|&i, &j| sv[i].total_cmp(&sv[j]));
    let (smallest, second) = (order[0], order[1]);
    let largest = sv[order[order.len() - 1]];
    if largest == 0.0 || sv[second] / largest < 1e-10 {
        return Err(AugmentError::Degenerate(
            "design matrix is rank deficient (coplanar or repeated points)".into(),
        ));
    }
    let h = v_t.row(smallest);
    let pn = Matrix3x4::from_fn(|r, c| h[4 * r + c]);
    let t2_inv = t2
        .try_inverse()
        .ok_or_else(|| AugmentError::Degenerate("image points coincide".into()))?;
    let mut p = t2_inv * pn * t3;
    // Frobenius-normalize and orient so the points lie in front of the camera.
    p /= p.norm();
    let n_f = n as f64;
    let mean: [f64; 3] = std::array::from_fn(|i| object.iter().map(|o| o[i]).sum::<f64>() / n_f);
    let w = p[(2, 0)] * mean[0] + p[(2, 1)] * mean[1] + p[(2, 2)] * mean[2] + p[(2, 3)];
    if w < 0.0 {
        p = -p;
    }
    let matrix = ProjectionMatrix::from_matrix(&p);
    if !matrix.is_finite() {
        return Err(AugmentError::Degenerate("non-finite projection".into()));
    }
    let mut sq = 0.0;
    let mut max: f64 = 0.0;
    for (o, q) in object.iter().zip(image) {
        let (u, v) = matrix
            .project(*o)
            .ok_or_else(|| AugmentError::Degenerate("point projects to infinity".into()))?;
        let e = ((u - q.0).powi(2) + (v - q.1).powi(2)).sqrt();
        sq += e * e;
        max = max.max(e);
    }
    Ok(ProjectionFit {
        matrix,
        rms_error: (sq / n_f).sqrt(),
        max_error: max,
    })
}

/// Camera mapping the model's landmarks onto `detected`.
pub fn estimate_projection(
    model: &Reference3DModel,
    detected: &KeypointSet,
) -> Result<ProjectionFit, AugmentError> {
    dlt(&model.landmarks, detected.points())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_model_is_symmetric() {
        assert!(Reference3DModel::canonical(128).symmetry_error() < 1e-12);
    }

    #[test]
    fn reference_view_recovers_reference_camera() {
        let model = Reference3DModel::canonical(128);
        let fit = estimate_projection(&model, &model.reference_keypoints()).unwrap();
        assert!(fit.max_error < 1e-8, "{fit:?}");
        assert!(fit.matrix.cosine_to(&model.reference_camera()) > 1.0 - 1e-12);
        assert_eq!(fit.matrix.rank(), 3);
    }

    #[test]
    fn coplanar_points_are_degenerate() {
        let obj: Vec<[f64; 3]> = (0..10).map(|i| [i as f64 * 0.37 % 1.0, (i * i) as f64 * 0.11 % 1.0, 0.0]).collect();
        let img: Vec<(f64, f64)> = obj.iter().map(|p| (p[0] * 50.0 + 3.0, p[1] * 40.0 - 1.0)).collect();
        assert!(matches!(dlt(&obj, &img), Err(AugmentError::Degenerate(_))));
    }

    #[test]
    fn perturbed_point_raises_residual() {
        let model = Reference3DModel::canonical(128);
        let clean = model.reference_keypoints();
        let mut pts = *clean.points();
        pts[10].0 += 50.0;
        let noisy = KeypointSet::new(pts).unwrap();
        let e_clean = estimate_projection(&model, &clean).unwrap();
        let e_noisy = estimate_projection(&model, &noisy).unwrap();
        assert!(e_noisy.rms_error > e_clean.rms_error + 1.0);
    }
}
