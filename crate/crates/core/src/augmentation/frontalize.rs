//! Frontalization over a piecewise-planar face proxy.
//!
//! The proxy is a Delaunay triangulation (in the reference view) of the
//! model landmarks, a few symmetric support points on the face contour, and
//! a ring of backdrop points along the frame border. Each reference pixel is
//! lifted to 3-D by barycentric interpolation inside its triangle,
//! projected into the query with the estimated camera, and sampled there.
//! Pixels that land outside the query, on transparent query pixels, or in
//! triangles stretched more than twice the median are filled from the
//! mirrored reference pixel instead.

use super::model::{estimate_projection, ProjectionFit, ProjectionMatrix, Reference3DModel};
use super::AugmentError;
use crate::imaging::{round_half_up, sample_into, FaceImage};
use crate::keypoints::KeypointSet;

/// Symmetric contour points (model space) that shape the proxy away from
/// the landmarks: forehead, temples, cheeks, jaw, chin.
const SUPPORT_POINTS: [[f64; 3]; 9] = [
    [0.0, 0.30, 0.0],
    [0.25, 0.24, -0.06],
    [-0.25, 0.24, -0.06],
    [0.28, -0.05, -0.07],
    [-0.28, -0.05, -0.07],
    [0.20, -0.26, -0.05],
    [-0.20, -0.26, -0.05],
    [0.0, -0.33, 0.0],
    [0.0, 0.0, 0.05],
];

/// Trigger threshold on per-triangle sampling-density stretch, relative to
/// the median stretch.
pub const STRETCH_FACTOR: f64 = 2.0;

/// Triangulated proxy surface tied to a reference model.
#[derive(Clone, Debug)]
pub struct FaceProxy {
    /// 3-D vertices in model space.
    pub vertices: Vec<[f64; 3]>,
    /// Vertices in the reference frontal view.
    pub frontal: Vec<(f64, f64)>,
    pub triangles: Vec<[usize; 3]>,
}

fn signed_area(a: (f64, f64), b: (f64, f64), c: (f64, f64)) -> f64 {
    0.5 * ((b.0 - a.0) * (c.1 - a.1) - (c.0 - a.0) * (b.1 - a.1))
}

fn barycentric(p: (f64, f64), a: (f64, f64), b: (f64, f64), c: (f64, f64)) -> Option<[f64; 3]> {
    let area = signed_area(a, b, c);
    if area.abs() < 1e-12 {
        return None;
    }
    let l0 = signed_area(p, b, c) / area;
    let l1 = signed_area(a, p, c) / area;
    Some([l0, l1, 1.0 - l0 - l1])
}

/// Bowyer–Watson Delaunay triangulation; triangles come out counter-clockwise
/// in a y-down frame (positive [`signed_area`]).
pub fn delaunay(points: &[(f64, f64)]) -> Vec<[usize; 3]> {
    let n = points.len();
    let (mut minx, mut miny, mut maxx, mut maxy) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
    for p in points {
        minx = minx.min(p.0);
        miny = miny.min(p.1);
        maxx = maxx.max(p.0);
        maxy = maxy.max(p.1);
    }
    let span = (maxx - minx).max(maxy - miny).max(1.0);
    let (mx, my) = ((minx + maxx) / 2.0, (miny + maxy) / 2.0);
    let mut pts = points.to_vec();
    pts.push((mx - 20.0 * span, my - span));
    pts.push((mx, my + 20.0 * span));
    pts.push((mx + 20.0 * span, my - span));

    let orient = |t: [usize; 3], pts: &[(f64, f64)]| {
        if signed_area(pts[t[0]], pts[t[1]], pts[t[2]]) < 0.0 {
            [t[0], t[2], t[1]]
        } else {
            t
        }
    };
    let in_circumcircle = |t: &[usize; 3], p: (f64, f64), pts: &[(f64, f64)]| {
        let (a, b, c) = (pts[t[0]], pts[t[1]], pts[t[2]]);
        let (ax, ay) = (a.0 - p.0, a.1 - p.1);
        let (bx, by) = (b.0 - p.0, b.1 - p.1);
        let (cx, cy) = (c.0 - p.0, c.1 - p.1);
        let det = (ax * ax + ay * ay) * (bx * cy - cx * by) - (bx * bx + by * by) * (ax * cy - cx * ay)
            + (cx * cx + cy * cy) * (ax * by - bx * ay);
        det > 1e-12
    };

    let mut tris = vec![orient([n, n + 1, n + 2], &pts)];
    for i in 0..n {
        let p = pts[i];
        let (bad, good): (Vec<[usize; 3]>, Vec<[usize; 3]>) =
            tris.into_iter().partition(|t| in_circumcircle(t, p, &pts));
        let mut edges: Vec<(usize, usize)> = Vec::new();
        for t in &bad {
            for (a, b) in [(t[0], t[1]), (t[1], t[2]), (t[2], t[0])] {
                let shared = bad
                    .iter()
                    .filter(|u| *u != t)
                    .any(|u| u.contains(&a) && u.contains(&b));
                if !shared {
                    edges.push((a, b));
                }
            }
        }
        tris = good;
        for (a, b) in edges {
            tris.push(orient([a, b, i], &pts));
        }
    }
    tris.retain(|t| t.iter().all(|&v| v < n));
    tris.sort_unstable();
    tris
}

impl FaceProxy {
    pub fn new(model: &Reference3DModel) -> Self {
        let cam = model.reference_camera();
        let mut vertices: Vec<[f64; 3]> = model.landmarks.to_vec();
        vertices.extend_from_slice(&SUPPORT_POINTS);
        // Backdrop ring just outside the frame so every pixel center is covered.
        let (w, h) = (model.width as f64, model.height as f64);
        let steps = 4;
        for i in 0..steps {
            let f = i as f64 / steps as f64;
            for (u, v) in [
                (-0.5 + f * w, -0.5),
                (w - 0.5, -0.5 + f * h),
                (w - 0.5 - f * w, h - 0.5),
                (-0.5, h - 0.5 - f * h),
            ] {
                vertices.push(model.unproject_reference(u, v, model.backdrop_depth));
            }
        }
        let frontal: Vec<(f64, f64)> = vertices
            .iter()
            .map(|v| cam.project(*v).expect("affine camera"))
            .collect();
        let triangles = delaunay(&frontal);
        Self {
            vertices,
            frontal,
            triangles,
        }
    }

    /// For every reference pixel: containing triangle and barycentric weights.
    pub fn pixel_map(&self, width: usize, height: usize) -> Vec<Option<(usize, [f64; 3])>> {
        let mut map = vec![None; width * height];
        for (ti, t) in self.triangles.iter().enumerate() {
            let (a, b, c) = (self.frontal[t[0]], self.frontal[t[1]], self.frontal[t[2]]);
            let x0 = a.0.min(b.0).min(c.0).floor().max(0.0) as usize;
            let y0 = a.1.min(b.1).min(c.1).floor().max(0.0) as usize;
            let x1 = (a.0.max(b.0).max(c.0).ceil().max(0.0) as usize).min(width - 1);
            let y1 = (a.1.max(b.1).max(c.1).ceil().max(0.0) as usize).min(height - 1);
            for y in y0..=y1 {
                for x in x0..=x1 {
                    let slot = &mut map[y * width + x];
                    if slot.is_some() {
                        continue;
                    }
                    if let Some(bc) = barycentric((x as f64, y as f64), a, b, c) {
                        if bc.iter().all(|&l| l >= -1e-9) {
                            *slot = Some((ti, bc));
                        }
                    }
                }
            }
        }
        map
    }

    fn lift(&self, t: usize, bc: [f64; 3]) -> [f64; 3] {
        let tri = self.triangles[t];
        std::array::from_fn(|k| (0..3).map(|i| bc[i] * self.vertices[tri[i]][k]).sum())
    }
}

/// Frontalized image plus diagnostics.
#[derive(Clone, Debug)]
pub struct Frontalized {
    pub image: FaceImage,
    /// Per reference pixel: true when the value came from the mirrored pixel.
    pub filled: Vec<bool>,
    pub fit: ProjectionFit,
}

fn query_position(
    proxy: &FaceProxy,
    cam: &ProjectionMatrix,
    entry: Option<(usize, [f64; 3])>,
) -> Option<(usize, (f64, f64))> {
    let (t, bc) = entry?;
    cam.project(proxy.lift(t, bc)).map(|q| (t, q))
}

pub fn frontalize(
    img: &FaceImage,
    detected: &KeypointSet,
    model: &Reference3DModel,
) -> Result<FaceImage, AugmentError> {
    Ok(frontalize_detailed(img, detected, model)?.image)
}

pub fn frontalize_detailed(
    img: &FaceImage,
    detected: &KeypointSet,
    model: &Reference3DModel,
) -> Result<Frontalized, AugmentError> {
    let fit = estimate_projection(model, detected)?;
    let cam = fit.matrix;
    let proxy = FaceProxy::new(model);

    // Per-triangle sampling-density stretch: reference area over query area.
    let stretch: Vec<f64> = proxy
        .triangles
        .iter()
        .map(|t| {
            let f = signed_area(proxy.frontal[t[0]], proxy.frontal[t[1]], proxy.frontal[t[2]]);
            let q: Vec<(f64, f64)> = t
                .iter()
                .map(|&i| cam.project(proxy.vertices[i]).unwrap_or((f64::NAN, f64::NAN)))
                .collect();
            let qa = signed_area(q[0], q[1], q[2]);
            if qa.is_finite() && qa.signum() == f.signum() && qa.abs() > 1e-9 {
                f.abs() / qa.abs()
            } else {
                f64::INFINITY
            }
        })
        .collect();
    let mut sorted = stretch.clone();
    sorted.sort_by(f64::total_cmp);
    let median = sorted[sorted.len() / 2];
    let low_confidence: Vec<bool> = stretch.iter().map(|&s| s > STRETCH_FACTOR * median).collect();

    let (w, h) = (model.width, model.height);
    let map = proxy.pixel_map(w, h);
    let alpha_ok = |q: (f64, f64)| -> bool {
        if !img.has_alpha() {
            return true;
        }
        let x = q.0.round().clamp(0.0, (img.width() - 1) as f64) as usize;
        let y = q.1.round().clamp(0.0, (img.height() - 1) as f64) as usize;
        img.pixel(x, y)[3] >= 128
    };
    let in_bounds = |q: (f64, f64)| {
        q.0 >= -0.5 && q.1 >= -0.5 && q.0 <= img.width() as f64 - 0.5 && q.1 <= img.height() as f64 - 0.5
    };
    let source: Vec<Option<(f64, f64)>> = map
        .iter()
        .map(|&entry| query_position(&proxy, &cam, entry).map(|(_, q)| q))
        .collect();
    let valid: Vec<bool> = map
        .iter()
        .zip(&source)
        .map(|(entry, q)| match (entry, q) {
            (Some((t, _)), Some(q)) => !low_confidence[*t] && in_bounds(*q) && alpha_ok(*q),
            _ => false,
        })
        .collect();

    let mut data = Vec::with_capacity(w * h * 3);
    let mut filled = vec![false; w * h];
    let mut px = [0.0; 4];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let mirror = y * w + (w - 1 - x);
            let q = if valid[i] {
                source[i]
            } else if valid[mirror] {
                filled[i] = true;
                source[mirror]
            } else {
                source[i]
            };
            match q {
                Some(q) => {
                    sample_into(img, q.0, q.1, &mut px);
                    if img.channels() == 1 {
                        px[1] = px[0];
                        px[2] = px[0];
                    }
                    data.extend(px[..3].iter().map(|&v| round_half_up(v)));
                }
                None => data.extend([0, 0, 0]),
            }
        }
    }
    Ok(Frontalized {
        image: FaceImage::new(w, h, 3, data)?,
        filled,
        fit,
    })
}

/// Renders the reference-view image `frontal` as seen after rotating the
/// proxy by `yaw` radians about the vertical axis. Uncovered pixels keep
/// the frontal value. Returns the posed image and its landmarks.
pub fn render_posed(
    frontal: &FaceImage,
    model: &Reference3DModel,
    yaw: f64,
) -> Result<(FaceImage, KeypointSet), AugmentError> {
    let proxy = FaceProxy::new(model);
    let cam = model.reference_camera();
    let (s, c) = yaw.sin_cos();
    let rot = |v: &[f64; 3]| [c * v[0] + s * v[2], v[1], -s * v[0] + c * v[2]];
    let rotated: Vec<[f64; 3]> = proxy.vertices.iter().map(rot).collect();
    let posed: Vec<(f64, f64)> = rotated.iter().map(|v| cam.project(*v).expect("affine")).collect();
    let (w, h) = (frontal.width(), frontal.height());
    let mut out = frontal.to_rgb();
    let mut depth = vec![f64::NEG_INFINITY; w * h];
    let src = frontal.to_rgb();
    let mut px = [0.0; 4];
    for t in &proxy.triangles {
        let (a, b, cc) = (posed[t[0]], posed[t[1]], posed[t[2]]);
        if signed_area(a, b, cc) <= 1e-9 {
            continue; // back-facing
        }
        let x0 = a.0.min(b.0).min(cc.0).floor().max(0.0) as usize;
        let y0 = a.1.min(b.1).min(cc.1).floor().max(0.0) as usize;
        let x1 = (a.0.max(b.0).max(cc.0).ceil().max(0.0) as usize).min(w - 1);
        let y1 = (a.1.max(b.1).max(cc.1).ceil().max(0.0) as usize).min(h - 1);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let Some(bc) = barycentric((x as f64, y as f64), a, b, cc) else { continue };
                if bc.iter().any(|&l| l < -1e-9) {
                    continue;
                }
                let z: f64 = (0..3).map(|i| bc[i] * rotated[t[i]][2]).sum();
                let idx = y * w + x;
                if z <= depth[idx] {
                    continue;
                }
                depth[idx] = z;
                let fx: f64 = (0..3).map(|i| bc[i] * proxy.frontal[t[i]].0).sum();
                let fy: f64 = (0..3).map(|i| bc[i] * proxy.frontal[t[i]].1).sum();
                sample_into(&src, fx, fy, &mut px);
                let dst = out.pixel_mut(x, y);
                for ch in 0..3 {
                    dst[ch] = round_half_up(px[ch]);
                }
            }
        }
    }
    let mut pts = [(0.0, 0.0); crate::keypoints::KEYPOINT_COUNT];
    for (p, v) in pts.iter_mut().zip(&rotated) {
        *p = cam.project(*v).expect("affine");
    }
    Ok((out, KeypointSet::new(pts)?))
}
