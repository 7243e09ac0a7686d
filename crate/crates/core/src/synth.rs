//! Procedurally generated subjects and photos with exact landmarks.
//!
//! Each subject has fixed appearance traits (skin, hair, beard, marks,
//! face shape). Each photo of a subject varies pose (yaw through the face
//! proxy, then an in-plane similarity), lighting, background, expression
//! and sensor noise. Features are drawn on the reference landmark layout,
//! so the returned keypoints are exact.

use std::io::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::augmentation::{render_posed, AugmentError, Reference3DModel};
use crate::imaging::{resize, round_half_up, to_grayscale, warp_affine, AffineTransform, FaceImage};
use crate::keypoints::{KeypointName, KeypointSet, KEYPOINT_INPUT};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HairStyle {
    Bald,
    Short,
    Bangs,
    SidePart,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Beard {
    None,
    Full,
    Goatee,
    Mustache,
}

/// Identity-bearing appearance.
#[derive(Clone, Debug, PartialEq)]
pub struct SubjectTraits {
    pub skin: [f64; 3],
    pub hair: [f64; 3],
    pub hair_style: HairStyle,
    pub beard: Beard,
    pub beard_color: [f64; 3],
    pub brow: [f64; 3],
    pub iris: [f64; 3],
    pub lip: [f64; 3],
    /// Half width and half height of the face oval (model units).
    pub face_w: f64,
    pub face_h: f64,
    /// Cheek/forehead mark: center, radius, color.
    pub mark: Option<((f64, f64), f64, [f64; 3])>,
}

fn color(rng: &mut ChaCha8Rng, lo: [f64; 3], hi: [f64; 3]) -> [f64; 3] {
    std::array::from_fn(|i| rng.gen_range(lo[i]..=hi[i]))
}

impl SubjectTraits {
    pub fn random(rng: &mut ChaCha8Rng) -> Self {
        let tone = rng.gen_range(0.0..1.0);
        let skin = [
            90.0 + 150.0 * tone + rng.gen_range(-10.0..10.0),
            55.0 + 140.0 * tone + rng.gen_range(-10.0..10.0),
            35.0 + 130.0 * tone + rng.gen_range(-10.0..10.0),
        ];
        let hair = match rng.gen_range(0..5) {
            0 => color(rng, [10.0, 8.0, 5.0], [40.0, 30.0, 25.0]),
            1 => color(rng, [90.0, 50.0, 20.0], [140.0, 80.0, 40.0]),
            2 => color(rng, [200.0, 170.0, 90.0], [240.0, 210.0, 130.0]),
            3 => color(rng, [150.0, 40.0, 10.0], [200.0, 80.0, 30.0]),
            _ => color(rng, [150.0, 150.0, 150.0], [210.0, 210.0, 210.0]),
        };
        let hair_style = [HairStyle::Bald, HairStyle::Short, HairStyle::Bangs, HairStyle::SidePart][rng.gen_range(0..4)];
        let beard = [Beard::None, Beard::Full, Beard::Goatee, Beard::Mustache][rng.gen_range(0..4)];
        let mark = if rng.gen_bool(0.6) {
            let side = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            let pos = match rng.gen_range(0..3) {
                0 => (side * 0.16, -0.08),
                1 => (side * 0.08, 0.2),
                _ => (side * 0.19, -0.17),
            };
            Some((pos, rng.gen_range(0.015..0.03), color(rng, [30.0, 20.0, 20.0], [200.0, 90.0, 90.0])))
        } else {
            None
        };
        Self {
            skin,
            hair,
            hair_style,
            beard,
            beard_color: hair.map(|c| c * rng.gen_range(0.6..1.0)),
            brow: hair.map(|c| c * 0.7),
            iris: color(rng, [30.0, 40.0, 30.0], [120.0, 160.0, 200.0]),
            lip: [skin[0] * 0.85 + 30.0, skin[1] * 0.6, skin[2] * 0.6],
            face_w: rng.gen_range(0.245..0.30),
            face_h: rng.gen_range(0.33..0.38),
            mark,
        }
    }
}

/// Per-photo nuisance factors.
#[derive(Clone, Debug, PartialEq)]
pub struct PhotoConditions {
    /// Head rotation about the vertical axis (radians).
    pub yaw: f64,
    pub scale: f64,
    /// In-plane rotation (radians).
    pub roll: f64,
    pub shift: (f64, f64),
    pub gain: f64,
    /// Horizontal lighting gradient strength.
    pub light_dir: f64,
    pub background: [f64; 3],
    pub mouth_open: f64,
    pub noise: f64,
    pub noise_seed: u64,
}

impl PhotoConditions {
    pub fn frontal() -> Self {
        Self {
            yaw: 0.0,
            scale: 1.0,
            roll: 0.0,
            shift: (0.0, 0.0),
            gain: 1.0,
            light_dir: 0.0,
            background: [110.0, 120.0, 130.0],
            mouth_open: 0.0,
            noise: 0.0,
            noise_seed: 0,
        }
    }

    pub fn random(rng: &mut ChaCha8Rng) -> Self {
        Self {
            yaw: rng.gen_range(-0.2..0.2),
            scale: rng.gen_range(0.93..1.07),
            roll: rng.gen_range(-0.1..0.1),
            shift: (rng.gen_range(-2.5..2.5), rng.gen_range(-2.5..2.5)),
            gain: rng.gen_range(0.85..1.15),
            light_dir: rng.gen_range(-0.3..0.3),
            background: color(rng, [30.0, 30.0, 30.0], [220.0, 220.0, 220.0]),
            mouth_open: rng.gen_range(0.0..0.012),
            noise: 3.0,
            noise_seed: rng.gen(),
        }
    }
}

fn seg_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let t = (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / (dx * dx + dy * dy)).clamp(0.0, 1.0);
    ((p.0 - a.0 - t * dx).powi(2) + (p.1 - a.1 - t * dy).powi(2)).sqrt()
}

fn inside(u: f64, v: f64, cx: f64, cy: f64, rx: f64, ry: f64) -> bool {
    ((u - cx) / rx).powi(2) + ((v - cy) / ry).powi(2) <= 1.0
}

/// Color at model-space point `(u, v)` (y up) of the frontal face.
fn shade(t: &SubjectTraits, c: &PhotoConditions, model: &Reference3DModel, u: f64, v: f64) -> [f64; 3] {
    let lm = |k: KeypointName| {
        let p = model.landmarks[k.index()];
        (p[0], p[1])
    };
    let face_cy = -0.03;
    let in_face = inside(u, v, 0.0, face_cy, t.face_w, t.face_h);
    let mut col = c.background.map(|b| b * (0.9 + 0.2 * (v + 0.5)));
    if t.hair_style != HairStyle::Bald && v > -0.05 && inside(u, v, 0.0, 0.04, t.face_w + 0.045, t.face_h + 0.07) {
        col = t.hair;
    }
    for side in [-1.0, 1.0] {
        if inside(u, v, side * (t.face_w + 0.005), 0.0, 0.035, 0.06) {
            col = t.skin.map(|s| s * 0.88);
        }
    }
    if !in_face {
        return col;
    }
    let r2 = (u / t.face_w).powi(2) + ((v - face_cy) / t.face_h).powi(2);
    col = t.skin.map(|s| s * (1.0 - 0.22 * r2));
    let hair_line = match t.hair_style {
        HairStyle::Bald => f64::INFINITY,
        HairStyle::Short => 0.25,
        HairStyle::Bangs => 0.16,
        HairStyle::SidePart => 0.2 + 0.25 * u,
    };
    if v > hair_line {
        return t.hair;
    }
    if let Some(((mx, my), r, mc)) = t.mark {
        if (u - mx).powi(2) + (v - my).powi(2) <= r * r {
            col = mc;
        }
    }
    let mouth_y = (lm(KeypointName::MouthCenterTopLip).1 + lm(KeypointName::MouthCenterBottomLip).1) / 2.0;
    let beard = match t.beard {
        Beard::None => false,
        Beard::Full => v < -0.14 && !inside(u, v, 0.0, mouth_y, 0.1, 0.03),
        Beard::Goatee => u.abs() < 0.065 && v < -0.22,
        Beard::Mustache => u.abs() < 0.1 && v > mouth_y + 0.025 && v < mouth_y + 0.05,
    };
    if beard {
        col = t.beard_color;
    }
    for (a, b) in [
        (KeypointName::LeftEyebrowInnerEnd, KeypointName::LeftEyebrowOuterEnd),
        (KeypointName::RightEyebrowInnerEnd, KeypointName::RightEyebrowOuterEnd),
    ] {
        if seg_distance((u, v), lm(a), lm(b)) < 0.013 {
            col = t.brow;
        }
    }
    for k in [KeypointName::LeftEyeCenter, KeypointName::RightEyeCenter] {
        let (ex, ey) = lm(k);
        if inside(u, v, ex, ey, 0.055, 0.022) {
            let d2 = (u - ex).powi(2) + (v - ey).powi(2);
            col = if d2 < 0.007f64.powi(2) {
                [15.0, 15.0, 15.0]
            } else if d2 < 0.018f64.powi(2) {
                t.iris
            } else {
                [235.0, 235.0, 230.0]
            };
        }
    }
    let (nx, ny) = lm(KeypointName::NoseTip);
    if v > ny - 0.01 && v < 0.04 && (u - nx).abs() < 0.012 + 0.25 * (0.04 - v).max(0.0) * 0.5 {
        col = col.map(|x| x * 0.9);
    }
    for side in [-1.0, 1.0] {
        if inside(u, v, nx + side * 0.022, ny - 0.012, 0.011, 0.006) {
            col = col.map(|x| x * 0.45);
        }
    }
    let (lx, _) = lm(KeypointName::MouthLeftCorner);
    if inside(u, v, 0.0, mouth_y, lx.abs(), 0.028 + c.mouth_open) {
        col = if (v - mouth_y).abs() < c.mouth_open * 0.8 { [50.0, 20.0, 25.0] } else { t.lip };
    }
    col
}

/// Renders one photo: `size × size` RGB with exact landmarks.
pub fn render_photo(traits: &SubjectTraits, cond: &PhotoConditions, size: usize) -> Result<(FaceImage, KeypointSet), AugmentError> {
    let model = Reference3DModel::canonical(size);
    let (cx, cy) = model.center();
    let s = model.scale;
    let mut data = Vec::with_capacity(size * size * 3);
    for y in 0..size {
        for x in 0..size {
            let mut acc = [0.0; 3];
            for (ox, oy) in [(-0.25, -0.25), (0.25, -0.25), (-0.25, 0.25), (0.25, 0.25)] {
                let u = (x as f64 + ox - cx) / s;
                let v = -(y as f64 + oy - cy) / s;
                let c = shade(traits, cond, &model, u, v);
                for i in 0..3 {
                    acc[i] += c[i] / 4.0;
                }
            }
            let light = cond.gain * (1.0 + cond.light_dir * (x as f64 - cx) / s);
            data.extend(acc.map(|a| round_half_up(a * light)));
        }
    }
    let frontal = FaceImage::new(size, size, 3, data)?;
    let (posed, kps) = if cond.yaw != 0.0 {
        render_posed(&frontal, &model, cond.yaw)?
    } else {
        (frontal, model.reference_keypoints())
    };
    // In-plane similarity about the frame center.
    let fwd = AffineTransform::translation(cx + cond.shift.0, cy + cond.shift.1)
        .then_after(&AffineTransform::similarity(cond.scale, cond.roll, 0.0, 0.0))
        .then_after(&AffineTransform::translation(-cx, -cy));
    let mut img = warp_affine(&posed, &fwd.inverse()?, size, size)?;
    let kps = kps.map(|x, y| fwd.apply(x, y));
    if cond.noise > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(cond.noise_seed);
        for v in img.data_mut() {
            *v = round_half_up(*v as f64 + rng.gen_range(-cond.noise..=cond.noise));
        }
    }
    Ok((img, kps))
}

/// A cohort of subjects with independent photo streams.
#[derive(Clone, Debug)]
pub struct Cohort {
    pub subjects: Vec<SubjectTraits>,
    pub seed: u64,
    pub size: usize,
}

impl Cohort {
    pub fn new(n: usize, size: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            subjects: (0..n).map(|_| SubjectTraits::random(&mut rng)).collect(),
            seed,
            size,
        }
    }

    pub fn subject_id(i: usize) -> String {
        format!("subject_{i:03}")
    }

    /// Photo `k` of subject `i`; deterministic in `(seed, i, k)`.
    pub fn photo(&self, i: usize, k: usize) -> Result<(FaceImage, KeypointSet), AugmentError> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x7068_6f74);
        rng.set_stream(((i as u64) << 32) | k as u64);
        let cond = PhotoConditions::random(&mut rng);
        render_photo(&self.subjects[i], &cond, self.size)
    }
}

/// Grayscale 96×96 landmark samples for regressor training.
pub fn keypoint_samples(n: usize, seed: u64) -> Result<Vec<(FaceImage, KeypointSet)>, AugmentError> {
    let cohort = Cohort::new(n, KEYPOINT_INPUT, seed);
    (0..n)
        .map(|i| {
            let (img, kps) = cohort.photo(i, 0)?;
            let img = resize(&to_grayscale(&img), KEYPOINT_INPUT, KEYPOINT_INPUT)?;
            Ok((img, kps))
        })
        .collect()
}

/// Writes samples in the public keypoint CSV layout (named `<kp>_x/_y`
/// columns and an `Image` column).
pub fn write_keypoint_csv(path: &Path, samples: &[(FaceImage, KeypointSet)]) -> std::io::Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    let mut header: Vec<String> = KeypointName::ALL
        .iter()
        .flat_map(|k| [format!("{}_x", k.as_str()), format!("{}_y", k.as_str())])
        .collect();
    header.push("Image".into());
    writeln!(f, "{}", header.join(","))?;
    for (img, kps) in samples {
        let gray = to_grayscale(img);
        let coords: Vec<String> = kps.to_flat().iter().map(|v| format!("{v:.4}")).collect();
        let pixels: Vec<String> = gray.data().iter().map(|p| p.to_string()).collect();
        writeln!(f, "{},{}", coords.join(","), pixels.join(" "))?;
    }
    f.flush()
}
