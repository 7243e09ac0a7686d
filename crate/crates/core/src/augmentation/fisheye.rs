use serde::{Deserialize, Serialize};

use super::AugmentError;
use crate::imaging::{remap, FaceImage};

/// Single-coefficient radial model. A destination pixel at normalized
/// radius `r_d` samples the source at `r_d · (1 + k · r_d²)` on the same ray.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FisheyeParams {
    pub k: f64,
    pub center: (f64, f64),
    pub r_max: f64,
}

impl FisheyeParams {
    /// Centered on the frame, normalized by the center-to-corner distance.
    pub fn for_image(width: usize, height: usize, k: f64) -> Self {
        let cx = (width as f64 - 1.0) / 2.0;
        let cy = (height as f64 - 1.0) / 2.0;
        Self {
            k,
            center: (cx, cy),
            r_max: (cx * cx + cy * cy).sqrt().max(f64::MIN_POSITIVE),
        }
    }

    pub fn validate(&self) -> Result<(), AugmentError> {
        if !(self.r_max > 0.0 && self.r_max.is_finite()) {
            return Err(AugmentError::InvalidParams(format!("fisheye r_max must be > 0, got {}", self.r_max)));
        }
        if !(self.k.is_finite() && self.center.0.is_finite() && self.center.1.is_finite()) {
            return Err(AugmentError::InvalidParams("fisheye parameters must be finite".into()));
        }
        Ok(())
    }

    /// Source position sampled for destination `(x, y)`.
    pub fn source_point(&self, x: f64, y: f64) -> (f64, f64) {
        let (dx, dy) = (x - self.center.0, y - self.center.1);
        let r = (dx * dx + dy * dy).sqrt() / self.r_max;
        let f = 1.0 + self.k * r * r;
        (self.center.0 + dx * f, self.center.1 + dy * f)
    }

    /// Destination position whose sample comes from source `(x, y)`, by
    /// Newton iteration on the radial polynomial. `None` when the radius
    /// lies outside the monotone range of the model.
    pub fn dest_point(&self, x: f64, y: f64) -> Option<(f64, f64)> {
        let (dx, dy) = (x - self.center.0, y - self.center.1);
        let rs = (dx * dx + dy * dy).sqrt() / self.r_max;
        if rs == 0.0 {
            return Some((x, y));
        }
        let mut r = rs;
        for _ in 0..50 {
            let g = r * (1.0 + self.k * r * r) - rs;
            let dg = 1.0 + 3.0 * self.k * r * r;
            if dg <= 0.0 {
                return None;
            }
            let next = r - g / dg;
            if (next - r).abs() < 1e-14 {
                r = next;
                break;
            }
            r = next;
        }
        if !(r.is_finite() && r >= 0.0) || (r * (1.0 + self.k * r * r) - rs).abs() > 1e-9 {
            return None;
        }
        let f = r / rs;
        Some((self.center.0 + dx * f, self.center.1 + dy * f))
    }
}

/// Barrel distortion by inverse mapping with bilinear, clamp-to-edge sampling.
pub fn fisheye(img: &FaceImage, p: &FisheyeParams) -> Result<FaceImage, AugmentError> {
    p.validate()?;
    if p.k == 0.0 {
        return Ok(img.clone());
    }
    Ok(remap(img, img.width(), img.height(), |x, y| p.source_point(x as f64, y as f64))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(w: usize, h: usize) -> FaceImage {
        let data = (0..w * h).flat_map(|i| [(i % 251) as u8, (i * 7 % 256) as u8, 9]).collect();
        FaceImage::new(w, h, 3, data).unwrap()
    }

    #[test]
    fn zero_k_is_identity() {
        let img = ramp(9, 7);
        assert_eq!(fisheye(&img, &FisheyeParams::for_image(9, 7, 0.0)).unwrap(), img);
    }

    #[test]
    fn center_is_fixed() {
        let img = ramp(9, 9);
        for k in [-0.3, 0.1, 0.25, 0.3] {
            let out = fisheye(&img, &FisheyeParams::for_image(9, 9, k)).unwrap();
            assert_eq!(out.pixel(4, 4), img.pixel(4, 4));
        }
    }

    #[test]
    fn corner_samples_at_one_point_three() {
        let p = FisheyeParams::for_image(101, 101, 0.3);
        let (sx, sy) = p.source_point(100.0, 100.0);
        let r = ((sx - 50.0).powi(2) + (sy - 50.0).powi(2)).sqrt() / p.r_max;
        assert!((r - 1.3).abs() < 1e-12);
        assert!((sx - sy).abs() < 1e-12, "stays on the diagonal");
        // Beyond the frame, so clamped to the corner pixel.
        let img = ramp(101, 101);
        let out = fisheye(&img, &p).unwrap();
        assert_eq!(out.pixel(100, 100), img.pixel(100, 100));
    }

    #[test]
    fn dest_inverts_source() {
        let p = FisheyeParams::for_image(64, 48, 0.25);
        let (sx, sy) = p.source_point(10.0, 40.0);
        let (x, y) = p.dest_point(sx, sy).unwrap();
        assert!((x - 10.0).abs() < 1e-9 && (y - 40.0).abs() < 1e-9);
    }
}
