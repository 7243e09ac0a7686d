use super::AugmentError;
use crate::imaging::{crop, warp_affine, AffineTransform, FaceImage};
use crate::keypoints::KeypointSet;

pub const DEFAULT_TIGHT_MARGIN: f64 = 0.35;

/// Inclusive pixel rectangle `(x0, y0, x1, y1)` of the keypoint bounding
/// box expanded by `margin_frac` of its width/height on each side. A pixel
/// is kept when its center lies inside the expanded box.
pub fn tight_crop_rect(
    width: usize,
    height: usize,
    kps: &KeypointSet,
    margin_frac: f64,
) -> Result<(usize, usize, usize, usize), AugmentError> {
    if !(margin_frac >= 0.0 && margin_frac.is_finite()) {
        return Err(AugmentError::InvalidParams(format!("crop margin must be >= 0, got {margin_frac}")));
    }
    let (x0, y0, x1, y1) = kps.bounding_box();
    let (mx, my) = ((x1 - x0) * margin_frac, (y1 - y0) * margin_frac);
    let lo_x = (x0 - mx).ceil().max(0.0);
    let lo_y = (y0 - my).ceil().max(0.0);
    let hi_x = (x1 + mx).floor().min(width as f64 - 1.0);
    let hi_y = (y1 + my).floor().min(height as f64 - 1.0);
    if !(lo_x <= hi_x && lo_y <= hi_y) {
        return Err(AugmentError::EmptyCrop(format!(
            "expanded keypoint box ({:.1}, {:.1})-({:.1}, {:.1}) misses the {width}x{height} image",
            x0 - mx,
            y0 - my,
            x1 + mx,
            y1 + my
        )));
    }
    Ok((lo_x as usize, lo_y as usize, hi_x as usize, hi_y as usize))
}

pub fn tight_crop(img: &FaceImage, kps: &KeypointSet, margin_frac: f64) -> Result<FaceImage, AugmentError> {
    let (x0, y0, x1, y1) = tight_crop_rect(img.width(), img.height(), kps, margin_frac)?;
    Ok(crop(img, x0, y0, x1 - x0 + 1, y1 - y0 + 1)?)
}

/// Square crop centered on the keypoint box, side = longer box side ×
/// (1 + 2·margin), resampled back to the input size. Returns the image and
/// the keypoints in the new frame.
pub fn auto_crop(img: &FaceImage, kps: &KeypointSet, margin: f64) -> Result<(FaceImage, KeypointSet), AugmentError> {
    if !(margin >= 0.0 && margin.is_finite()) {
        return Err(AugmentError::InvalidParams(format!("auto-crop margin must be >= 0, got {margin}")));
    }
    let (x0, y0, x1, y1) = kps.bounding_box();
    let side = (x1 - x0).max(y1 - y0) * (1.0 + 2.0 * margin);
    if !(side > 0.0) {
        return Err(AugmentError::EmptyCrop("keypoints collapse to a point".into()));
    }
    let (w, h) = (img.width() as f64, img.height() as f64);
    let (sx, sy) = (side / w, side / h);
    let (cx, cy) = ((x0 + x1) / 2.0, (y0 + y1) / 2.0);
    // Destination pixel centers span the square [cx ± side/2] edge to edge.
    let t = AffineTransform::new([
        [sx, 0.0, cx - side / 2.0 + 0.5 * sx],
        [0.0, sy, cy - side / 2.0 + 0.5 * sy],
    ]);
    let inv = t.inverse()?;
    let out = warp_affine(img, &t, img.width(), img.height())?;
    Ok((out, kps.map(|x, y| inv.apply(x, y))))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::keypoints::KEYPOINT_COUNT;

    fn box_kps(x0: f64, y0: f64, x1: f64, y1: f64) -> KeypointSet {
        let mut pts = [((x0 + x1) / 2.0, (y0 + y1) / 2.0); KEYPOINT_COUNT];
        pts[0] = (x0, y0);
        pts[1] = (x1, y1);
        KeypointSet::new(pts).unwrap()
    }

    #[test]
    fn worked_example() {
        let r = tight_crop_rect(200, 200, &box_kps(10.0, 10.0, 50.0, 60.0), 0.25).unwrap();
        assert_eq!(r, (0, 0, 60, 72));
    }

    #[test]
    fn full_frame_cases() {
        let img = FaceImage::filled(20, 10, &[5, 6, 7]).unwrap();
        let k = box_kps(0.0, 0.0, 19.0, 9.0);
        assert_eq!(tight_crop(&img, &k, 0.0).unwrap(), img);
        assert_eq!(tight_crop(&img, &box_kps(8.0, 4.0, 10.0, 5.0), 50.0).unwrap(), img);
    }

    #[test]
    fn outside_is_empty() {
        assert!(matches!(
            tight_crop_rect(20, 20, &box_kps(100.0, 100.0, 110.0, 120.0), 0.1),
            Err(AugmentError::EmptyCrop(_))
        ));
    }

    #[test]
    fn auto_crop_tracks_keypoints() {
        let img = FaceImage::filled(64, 64, &[1, 2, 3]).unwrap();
        let k = box_kps(20.0, 24.0, 40.0, 44.0);
        let (out, moved) = auto_crop(&img, &k, 0.5).unwrap();
        assert_eq!((out.width(), out.height()), (64, 64));
        let (a, b, c, d) = moved.bounding_box();
        // Box side 20 becomes 20 / 40 of the frame, centered.
        assert!((c - a - 32.0).abs() < 1e-9 && (d - b - 32.0).abs() < 1e-9);
        assert!(((a + c) / 2.0 - 31.5).abs() < 1e-9);
    }
}
