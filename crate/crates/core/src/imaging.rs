//! Raster primitives shared by every augmentation stage.
//!
//! Pixel centers sit at integer coordinates. Sampling outside the image
//! clamps to the nearest edge pixel. Every float → 8-bit conversion goes
//! through [`round_half_up`].

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImagingError {
    #[error("invalid image: {0}")]
    Invalid(String),
    #[error("dimension mismatch: {0}")]
    Dimensions(String),
    #[error("crop rectangle ({x0}, {y0}) {w}x{h} outside {img_w}x{img_h} image")]
    CropBounds {
        x0: usize,
        y0: usize,
        w: usize,
        h: usize,
        img_w: usize,
        img_h: usize,
    },
    #[error("non-finite transform entry")]
    NonFiniteTransform,
    #[error("singular transform")]
    SingularTransform,
    #[error("unsupported image format: {0}")]
    Format(String),
    #[error("{path}")]
    Codec {
        path: String,
        #[source]
        source: image::ImageError,
    },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColorSpace {
    #[default]
    Srgb,
}

/// Owned 8-bit raster: 1 (gray), 3 (RGB), or 4 (RGBA) interleaved channels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FaceImage {
    width: usize,
    height: usize,
    channels: usize,
    colorspace: ColorSpace,
    data: Vec<u8>,
}

/// Rounds to nearest with ties going up, clamped to `0..=255`.
#[inline]
pub fn round_half_up(v: f64) -> u8 {
    let r = (v + 0.5).floor();
    if r.is_nan() {
        0
    } else {
        r.clamp(0.0, 255.0) as u8
    }
}

impl FaceImage {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<Self, ImagingError> {
        if width == 0 || height == 0 {
            return Err(ImagingError::Invalid(format!("{width}x{height} has a zero dimension")));
        }
        if !matches!(channels, 1 | 3 | 4) {
            return Err(ImagingError::Invalid(format!("{channels} channels (expected 1, 3 or 4)")));
        }
        if data.len() != width * height * channels {
            return Err(ImagingError::Invalid(format!(
                "{width}x{height}x{channels} needs {} bytes, got {}",
                width * height * channels,
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            colorspace: ColorSpace::Srgb,
            data,
        })
    }

    /// Image filled with one pixel value; `pixel.len()` sets the channel count.
    pub fn filled(width: usize, height: usize, pixel: &[u8]) -> Result<Self, ImagingError> {
        let data = pixel.iter().copied().cycle().take(width * height * pixel.len()).collect();
        Self::new(width, height, pixel.len(), data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn colorspace(&self) -> ColorSpace {
        self.colorspace
    }

    pub fn has_alpha(&self) -> bool {
        self.channels == 4
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> &[u8] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    #[inline]
    pub fn pixel_mut(&mut self, x: usize, y: usize) -> &mut [u8] {
        let i = (y * self.width + x) * self.channels;
        &mut self.data[i..i + self.channels]
    }

    /// Drops the alpha channel; gray is replicated to RGB.
    pub fn to_rgb(&self) -> FaceImage {
        match self.channels {
            3 => self.clone(),
            4 => FaceImage {
                data: self.data.chunks_exact(4).flat_map(|p| [p[0], p[1], p[2]]).collect(),
                channels: 3,
                ..*self
            },
            _ => FaceImage {
                data: self.data.iter().flat_map(|&g| [g, g, g]).collect(),
                channels: 3,
                ..*self
            },
        }
    }

    /// Adds an opaque alpha channel when missing.
    pub fn to_rgba(&self) -> FaceImage {
        match self.channels {
            4 => self.clone(),
            _ => {
                let rgb = self.to_rgb();
                FaceImage {
                    data: rgb.data.chunks_exact(3).flat_map(|p| [p[0], p[1], p[2], 255]).collect(),
                    channels: 4,
                    ..*self
                }
            }
        }
    }

    /// Loads PNG, PPM/PGM, or PAM. Alpha is kept when the file has it.
    pub fn load(path: &Path) -> Result<FaceImage, ImagingError> {
        let img = image::open(path).map_err(|source| ImagingError::Codec {
            path: path.display().to_string(),
            source,
        })?;
        let (w, h) = (img.width() as usize, img.height() as usize);
        let color = img.color();
        if color.has_alpha() {
            FaceImage::new(w, h, 4, img.into_rgba8().into_raw())
        } else if color.channel_count() == 1 {
            FaceImage::new(w, h, 1, img.into_luma8().into_raw())
        } else {
            FaceImage::new(w, h, 3, img.into_rgb8().into_raw())
        }
    }

    /// Saves by extension: `.png`, `.ppm`/`.pgm` (binary PNM), or `.pam`.
    pub fn save(&self, path: &Path) -> Result<(), ImagingError> {
        use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
        use image::{ExtendedColorType, ImageEncoder};

        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase())
            .unwrap_or_default();
        let color = match self.channels {
            1 => ExtendedColorType::L8,
            3 => ExtendedColorType::Rgb8,
            _ => ExtendedColorType::Rgba8,
        };
        let (w, h) = (self.width as u32, self.height as u32);
        let codec_err = |source| ImagingError::Codec {
            path: path.display().to_string(),
            source,
        };
        let mut buf = Vec::new();
        match ext.as_str() {
            "png" => image::codecs::png::PngEncoder::new(&mut buf)
                .write_image(&self.data, w, h, color)
                .map_err(codec_err)?,
            "ppm" | "pgm" => {
                let (img, subtype) = match self.channels {
                    1 => (self.clone(), PnmSubtype::Graymap(SampleEncoding::Binary)),
                    _ => (self.to_rgb(), PnmSubtype::Pixmap(SampleEncoding::Binary)),
                };
                let color = if img.channels == 1 {
                    ExtendedColorType::L8
                } else {
                    ExtendedColorType::Rgb8
                };
                PnmEncoder::new(&mut buf)
                    .with_subtype(subtype)
                    .write_image(&img.data, w, h, color)
                    .map_err(codec_err)?
            }
            "pam" => PnmEncoder::new(&mut buf)
                .with_subtype(PnmSubtype::ArbitraryMap)
                .write_image(&self.data, w, h, color)
                .map_err(codec_err)?,
            other => return Err(ImagingError::Format(format!("extension {other:?}"))),
        }
        std::fs::write(path, buf).map_err(|e| codec_err(image::ImageError::IoError(e)))
    }
}

/// Bilinear sample with clamp-to-edge; one value per channel.
pub fn sample_bilinear(img: &FaceImage, x: f64, y: f64) -> Vec<f64> {
    let mut out = [0.0; 4];
    sample_into(img, x, y, &mut out);
    out[..img.channels].to_vec()
}

#[inline]
pub(crate) fn sample_into(img: &FaceImage, x: f64, y: f64, out: &mut [f64; 4]) {
    let xc = x.clamp(0.0, (img.width - 1) as f64);
    let yc = y.clamp(0.0, (img.height - 1) as f64);
    let x0 = xc.floor() as usize;
    let y0 = yc.floor() as usize;
    let x1 = (x0 + 1).min(img.width - 1);
    let y1 = (y0 + 1).min(img.height - 1);
    let fx = xc - x0 as f64;
    let fy = yc - y0 as f64;
    let (p00, p10, p01, p11) = (
        img.pixel(x0, y0),
        img.pixel(x1, y0),
        img.pixel(x0, y1),
        img.pixel(x1, y1),
    );
    for c in 0..img.channels {
        let top = p00[c] as f64 * (1.0 - fx) + p10[c] as f64 * fx;
        let bottom = p01[c] as f64 * (1.0 - fx) + p11[c] as f64 * fx;
        out[c] = top * (1.0 - fy) + bottom * fy;
    }
}

/// 2×3 affine map `[a b c; d e f]` taking (x, y) to (a x + b y + c, d x + e y + f).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineTransform {
    pub m: [[f64; 3]; 2],
}

impl AffineTransform {
    pub const IDENTITY: AffineTransform = AffineTransform {
        m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
    };

    pub fn new(m: [[f64; 3]; 2]) -> Self {
        Self { m }
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Self::new([[1.0, 0.0, tx], [0.0, 1.0, ty]])
    }

    pub fn scale(sx: f64, sy: f64) -> Self {
        Self::new([[sx, 0.0, 0.0], [0.0, sy, 0.0]])
    }

    /// Rotation by `angle` radians about the origin followed by uniform scale.
    pub fn similarity(scale: f64, angle: f64, tx: f64, ty: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Self::new([[scale * c, -scale * s, tx], [scale * s, scale * c, ty]])
    }

    pub fn is_finite(&self) -> bool {
        self.m.iter().flatten().all(|v| v.is_finite())
    }

    #[inline]
    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let m = &self.m;
        (
            m[0][0] * x + m[0][1] * y + m[0][2],
            m[1][0] * x + m[1][1] * y + m[1][2],
        )
    }

    /// `self ∘ other`: apply `other` first.
    pub fn then_after(&self, other: &AffineTransform) -> AffineTransform {
        let a = &self.m;
        let b = &other.m;
        AffineTransform::new([
            [
                a[0][0] * b[0][0] + a[0][1] * b[1][0],
                a[0][0] * b[0][1] + a[0][1] * b[1][1],
                a[0][0] * b[0][2] + a[0][1] * b[1][2] + a[0][2],
            ],
            [
                a[1][0] * b[0][0] + a[1][1] * b[1][0],
                a[1][0] * b[0][1] + a[1][1] * b[1][1],
                a[1][0] * b[0][2] + a[1][1] * b[1][2] + a[1][2],
            ],
        ])
    }

    pub fn inverse(&self) -> Result<AffineTransform, ImagingError> {
        let m = &self.m;
        let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
        if det.abs() < 1e-12 || !det.is_finite() {
            return Err(ImagingError::SingularTransform);
        }
        let (a, b, c) = (m[1][1] / det, -m[0][1] / det, -m[1][0] / det);
        let d = m[0][0] / det;
        Ok(AffineTransform::new([
            [a, b, -(a * m[0][2] + b * m[1][2])],
            [c, d, -(c * m[0][2] + d * m[1][2])],
        ]))
    }
}

/// `out(x, y) = sample_bilinear(img, t · (x, y, 1))`; `t` maps destination to source.
pub fn warp_affine(
    img: &FaceImage,
    t: &AffineTransform,
    out_w: usize,
    out_h: usize,
) -> Result<FaceImage, ImagingError> {
    if !t.is_finite() {
        return Err(ImagingError::NonFiniteTransform);
    }
    remap(img, out_w, out_h, |x, y| t.apply(x as f64, y as f64))
}

/// Generic inverse-mapping resampler: `map(x, y)` gives the source position
/// for destination pixel `(x, y)`.
pub fn remap<F>(img: &FaceImage, out_w: usize, out_h: usize, map: F) -> Result<FaceImage, ImagingError>
where
    F: Fn(usize, usize) -> (f64, f64),
{
    let ch = img.channels;
    let mut data = Vec::with_capacity(out_w * out_h * ch);
    let mut px = [0.0; 4];
    for y in 0..out_h {
        for x in 0..out_w {
            let (sx, sy) = map(x, y);
            sample_into(img, sx, sy, &mut px);
            data.extend(px[..ch].iter().map(|&v| round_half_up(v)));
        }
    }
    FaceImage::new(out_w, out_h, ch, data)
}

/// `out = overlay.rgb · α + base · (1 − α)` with `α = overlay.a / 255`.
pub fn alpha_composite(base: &FaceImage, overlay: &FaceImage) -> Result<FaceImage, ImagingError> {
    if base.width != overlay.width || base.height != overlay.height {
        return Err(ImagingError::Dimensions(format!(
            "base {}x{} vs overlay {}x{}",
            base.width, base.height, overlay.width, overlay.height
        )));
    }
    if base.channels != 3 || overlay.channels != 4 {
        return Err(ImagingError::Dimensions(format!(
            "expected RGB base and RGBA overlay, got {} and {} channels",
            base.channels, overlay.channels
        )));
    }
    let data = base
        .data
        .chunks_exact(3)
        .zip(overlay.data.chunks_exact(4))
        .flat_map(|(b, o)| {
            let a = o[3] as f64 / 255.0;
            let blend = |i: usize| round_half_up(o[i] as f64 * a + b[i] as f64 * (1.0 - a));
            [blend(0), blend(1), blend(2)]
        })
        .collect();
    FaceImage::new(base.width, base.height, 3, data)
}

pub fn crop(img: &FaceImage, x0: usize, y0: usize, w: usize, h: usize) -> Result<FaceImage, ImagingError> {
    if w == 0 || h == 0 || x0 + w > img.width || y0 + h > img.height {
        return Err(ImagingError::CropBounds {
            x0,
            y0,
            w,
            h,
            img_w: img.width,
            img_h: img.height,
        });
    }
    let ch = img.channels;
    let mut data = Vec::with_capacity(w * h * ch);
    for y in y0..y0 + h {
        let start = (y * img.width + x0) * ch;
        data.extend_from_slice(&img.data[start..start + w * ch]);
    }
    FaceImage::new(w, h, ch, data)
}

/// Bilinear resize with pixel-center alignment.
pub fn resize(img: &FaceImage, w: usize, h: usize) -> Result<FaceImage, ImagingError> {
    if w == 0 || h == 0 {
        return Err(ImagingError::Invalid(format!("resize target {w}x{h}")));
    }
    if w == img.width && h == img.height {
        return Ok(img.clone());
    }
    let t = resize_transform(img.width, img.height, w, h);
    warp_affine(img, &t, w, h)
}

/// Destination → source map used by [`resize`].
pub fn resize_transform(src_w: usize, src_h: usize, dst_w: usize, dst_h: usize) -> AffineTransform {
    let sx = src_w as f64 / dst_w as f64;
    let sy = src_h as f64 / dst_h as f64;
    AffineTransform::new([[sx, 0.0, 0.5 * sx - 0.5], [0.0, sy, 0.5 * sy - 0.5]])
}

/// Luma `0.299 R + 0.587 G + 0.114 B` as a one-channel image. Alpha is ignored.
pub fn to_grayscale(img: &FaceImage) -> FaceImage {
    if img.channels == 1 {
        return img.clone();
    }
    let data = img
        .data
        .chunks_exact(img.channels)
        .map(|p| round_half_up(0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64))
        .collect();
    FaceImage {
        data,
        channels: 1,
        ..*img
    }
}

/// Gray-world white balance: scales each color channel so its mean equals
/// the mean over all channels.
pub fn gray_world_balance(img: &FaceImage) -> FaceImage {
    if img.channels < 3 {
        return img.clone();
    }
    let n = (img.width * img.height) as f64;
    let mut sums = [0.0f64; 3];
    for p in img.data.chunks_exact(img.channels) {
        for c in 0..3 {
            sums[c] += p[c] as f64;
        }
    }
    let means = sums.map(|s| s / n);
    let gray = (means[0] + means[1] + means[2]) / 3.0;
    let gains = means.map(|m| if m > 0.0 { gray / m } else { 1.0 });
    let mut out = img.clone();
    for p in out.data.chunks_exact_mut(img.channels) {
        for c in 0..3 {
            p[c] = round_half_up(p[c] as f64 * gains[c]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient_image(w: usize, h: usize) -> FaceImage {
        let mut data = Vec::new();
        for y in 0..h {
            for x in 0..w {
                data.extend_from_slice(&[(x * 13 + y * 7) as u8, (x * y) as u8, (255 - x * 3) as u8]);
            }
        }
        FaceImage::new(w, h, 3, data).unwrap()
    }

    #[test]
    fn invariants_enforced() {
        assert!(FaceImage::new(0, 4, 3, vec![]).is_err());
        assert!(FaceImage::new(2, 2, 2, vec![0; 8]).is_err());
        assert!(FaceImage::new(2, 2, 3, vec![0; 11]).is_err());
    }

    #[test]
    fn bilinear_exact_midpoint_and_clamp() {
        let img = gradient_image(8, 8);
        let v = sample_bilinear(&img, 3.0, 5.0);
        let stored: Vec<f64> = img.pixel(3, 5).iter().map(|&b| b as f64).collect();
        assert_eq!(v, stored);

        let two = FaceImage::new(2, 1, 1, vec![0, 255]).unwrap();
        assert_eq!(sample_bilinear(&two, 0.5, 0.0), vec![127.5]);

        let corner: Vec<f64> = img.pixel(0, 0).iter().map(|&b| b as f64).collect();
        assert_eq!(sample_bilinear(&img, -10.0, -10.0), corner);
    }

    #[test]
    fn identity_warp_is_bit_exact() {
        let img = gradient_image(9, 6);
        assert_eq!(warp_affine(&img, &AffineTransform::IDENTITY, 9, 6).unwrap(), img);
    }

    #[test]
    fn translation_warp_clamps_right_edge() {
        let img = gradient_image(7, 5);
        let out = warp_affine(&img, &AffineTransform::translation(1.0, 0.0), 7, 5).unwrap();
        for y in 0..5 {
            for x in 0..7 {
                assert_eq!(out.pixel(x, y), img.pixel((x + 1).min(6), y));
            }
        }
    }

    #[test]
    fn downscale_matches_block_average() {
        let img = gradient_image(8, 6);
        let t = AffineTransform::new([[2.0, 0.0, 0.5], [0.0, 2.0, 0.5]]);
        let out = warp_affine(&img, &t, 4, 3).unwrap();
        for y in 0..3 {
            for x in 0..4 {
                for c in 0..3 {
                    let s: u32 = [(0, 0), (1, 0), (0, 1), (1, 1)]
                        .iter()
                        .map(|&(dx, dy)| img.pixel(2 * x + dx, 2 * y + dy)[c] as u32)
                        .sum();
                    let oracle = s as f64 / 4.0;
                    assert!((out.pixel(x, y)[c] as f64 - oracle).abs() <= 1.0);
                }
            }
        }
        assert_eq!(resize(&img, 4, 3).unwrap(), out);
    }

    #[test]
    fn non_finite_transform_rejected() {
        let img = gradient_image(3, 3);
        let t = AffineTransform::new([[f64::NAN, 0.0, 0.0], [0.0, 1.0, 0.0]]);
        assert!(matches!(warp_affine(&img, &t, 3, 3), Err(ImagingError::NonFiniteTransform)));
    }

    #[test]
    fn composite_extremes_and_half() {
        let base = FaceImage::filled(2, 2, &[0, 10, 200]).unwrap();
        let clear = FaceImage::filled(2, 2, &[255, 255, 255, 0]).unwrap();
        let opaque = FaceImage::filled(2, 2, &[1, 2, 3, 255]).unwrap();
        assert_eq!(alpha_composite(&base, &clear).unwrap(), base);
        assert_eq!(alpha_composite(&base, &opaque).unwrap(), opaque.to_rgb());

        let black = FaceImage::filled(1, 1, &[0, 0, 0]).unwrap();
        let half = FaceImage::filled(1, 1, &[255, 255, 255, 128]).unwrap();
        // 255 · 128/255 = 128 exactly
        assert_eq!(alpha_composite(&black, &half).unwrap().pixel(0, 0), &[128, 128, 128]);

        let wrong = FaceImage::filled(3, 2, &[0, 0, 0, 0]).unwrap();
        assert!(alpha_composite(&base, &wrong).is_err());
    }

    #[test]
    fn crop_resize_gray_basics() {
        let img = gradient_image(10, 7);
        assert_eq!(crop(&img, 0, 0, 10, 7).unwrap(), img);
        assert!(crop(&img, 5, 0, 6, 7).is_err());
        assert_eq!(resize(&img, 10, 7).unwrap(), img);
        let white = FaceImage::filled(2, 2, &[255, 255, 255]).unwrap();
        assert_eq!(to_grayscale(&white).data(), &[255; 4]);
    }

    #[test]
    fn gray_world_equalizes_means() {
        let img = FaceImage::filled(4, 4, &[200, 100, 50]).unwrap();
        let out = gray_world_balance(&img);
        let p = out.pixel(0, 0);
        assert!(p.iter().all(|&v| (v as i32 - 117).abs() <= 1), "{p:?}");
    }

    #[test]
    fn affine_inverse_composes_to_identity() {
        let t = AffineTransform::similarity(1.7, 0.4, 3.0, -2.0);
        let id = t.then_after(&t.inverse().unwrap());
        for (r, e) in id.m.iter().flatten().zip(AffineTransform::IDENTITY.m.iter().flatten()) {
            assert!((r - e).abs() < 1e-12);
        }
    }
}
