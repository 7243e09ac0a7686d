use serde::{Deserialize, Serialize};

use super::AugmentError;
use crate::imaging::{round_half_up, FaceImage};

/// Beer–Lambert attenuation plus a veiling-light blend:
/// `out = (1 − β) · X · exp(−c_X · d) + β · v_X` per channel.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UnderwaterParams {
    /// Per-channel attenuation (R, G, B) per unit depth.
    pub attenuation: [f64; 3],
    pub depth: f64,
    pub veil: [f64; 3],
    pub beta: f64,
}

impl Default for UnderwaterParams {
    fn default() -> Self {
        Self {
            attenuation: [0.60, 0.20, 0.08],
            depth: 3.0,
            veil: [8.0, 110.0, 130.0],
            beta: 0.25,
        }
    }
}

impl UnderwaterParams {
    pub fn validate(&self) -> Result<(), AugmentError> {
        let bad = |what: &str| Err(AugmentError::InvalidParams(format!("underwater {what}")));
        if self.attenuation.iter().any(|c| !(c.is_finite() && *c >= 0.0)) {
            return bad("attenuation must be finite and >= 0");
        }
        if !(self.depth.is_finite() && self.depth >= 0.0) {
            return bad("depth must be finite and >= 0");
        }
        if self.veil.iter().any(|v| !(v.is_finite() && (0.0..=255.0).contains(v))) {
            return bad("veil color must lie in [0, 255]");
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return bad("beta must lie in [0, 1]");
        }
        Ok(())
    }
}

/// Applies [`UnderwaterParams`] to the color channels; alpha is kept and a
/// one-channel input is promoted to RGB.
pub fn underwater_colorize(img: &FaceImage, p: &UnderwaterParams) -> Result<FaceImage, AugmentError> {
    p.validate()?;
    let mut out = if img.channels() == 1 { img.to_rgb() } else { img.clone() };
    let ch = out.channels();
    let gain: [f64; 3] = std::array::from_fn(|c| (1.0 - p.beta) * (-p.attenuation[c] * p.depth).exp());
    let offset: [f64; 3] = std::array::from_fn(|c| p.beta * p.veil[c]);
    for px in out.data_mut().chunks_exact_mut(ch) {
        for c in 0..3 {
            px[c] = round_half_up(px[c] as f64 * gain[c] + offset[c]);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_depth_zero_beta_is_identity() {
        let img = FaceImage::new(2, 1, 3, vec![1, 2, 3, 250, 128, 77]).unwrap();
        let p = UnderwaterParams {
            depth: 0.0,
            beta: 0.0,
            ..Default::default()
        };
        assert_eq!(underwater_colorize(&img, &p).unwrap(), img);
    }

    #[test]
    fn red_pixel_closed_form() {
        let img = FaceImage::new(1, 1, 3, vec![255, 0, 0]).unwrap();
        let p = UnderwaterParams {
            attenuation: [0.5, 0.2, 0.1],
            depth: 2.0,
            beta: 0.0,
            ..Default::default()
        };
        let out = underwater_colorize(&img, &p).unwrap();
        assert_eq!(out.data()[0], round_half_up(255.0 * (-1.0f64).exp()));
        assert_eq!(out.data()[0], 94);
    }

    #[test]
    fn white_turns_blue_green() {
        let img = FaceImage::new(1, 1, 3, vec![255, 255, 255]).unwrap();
        let out = underwater_colorize(&img, &UnderwaterParams::default()).unwrap();
        let px = out.pixel(0, 0);
        assert!(px[0] < px[1] && px[1] < px[2], "{px:?}");
    }

    #[test]
    fn rejects_bad_params() {
        let img = FaceImage::new(1, 1, 3, vec![0, 0, 0]).unwrap();
        for p in [
            UnderwaterParams { beta: 1.5, ..Default::default() },
            UnderwaterParams { depth: -1.0, ..Default::default() },
            UnderwaterParams { attenuation: [0.1, f64::NAN, 0.0], ..Default::default() },
        ] {
            assert!(underwater_colorize(&img, &p).is_err());
        }
    }
}
