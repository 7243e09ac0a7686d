//! Camera estimation, frontalization and mask placement on synthetic faces.

mod common;

use diverid::augmentation::{
    apply_mask, builtin_templates, estimate_projection, frontalize_detailed, Reference3DModel,
};
use diverid::imaging::FaceImage;
use diverid::keypoints::KeypointSet;
use diverid::synth::{render_photo, PhotoConditions, SubjectTraits};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn mean_abs_diff(a: &FaceImage, b: &FaceImage) -> f64 {
    let (a, b) = (a.to_rgb(), b.to_rgb());
    a.data().iter().zip(b.data()).map(|(x, y)| (*x as f64 - *y as f64).abs()).sum::<f64>() / a.data().len() as f64
}

fn frontal_face(seed: u64, size: usize) -> (FaceImage, KeypointSet, SubjectTraits) {
    let traits = SubjectTraits::random(&mut ChaCha8Rng::seed_from_u64(seed));
    let (img, kps) = render_photo(&traits, &PhotoConditions::frontal(), size).unwrap();
    (img, kps, traits)
}

#[test]
fn known_camera_is_recovered_up_to_scale() {
    let model = Reference3DModel::canonical(64);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cam = common::random_camera(&mut rng);
    let pts: [(f64, f64); 15] = std::array::from_fn(|i| common::project(&cam, model.landmarks[i]));
    let fit = estimate_projection(&model, &KeypointSet::new(pts).unwrap()).unwrap();
    let m = fit.matrix.to_matrix();
    let est: [[f64; 4]; 3] = std::array::from_fn(|r| std::array::from_fn(|c| m[(r, c)]));
    assert!(common::matrix_cosine(&cam, &est) > 1.0 - 1e-9);
    assert!(fit.max_error < 1e-6, "{fit:?}");
    assert!((m.norm() - 1.0).abs() < 1e-12);
}

#[test]
fn perturbed_landmark_raises_reprojection_error() {
    let model = Reference3DModel::canonical(64);
    let clean = model.reference_keypoints();
    let mut pts = *clean.points();
    pts[6].0 += 50.0;
    let a = estimate_projection(&model, &clean).unwrap();
    let b = estimate_projection(&model, &KeypointSet::new(pts).unwrap()).unwrap();
    assert!(b.rms_error > a.rms_error + 1.0, "{} vs {}", b.rms_error, a.rms_error);
}

#[test]
fn frontal_face_is_left_nearly_unchanged() {
    let (img, _, _) = frontal_face(3, 128);
    let model = Reference3DModel::for_frame(128, 128);
    let f = frontalize_detailed(&img, &model.reference_keypoints(), &model).unwrap();
    let d = mean_abs_diff(&f.image, &img);
    assert!(d < 2.0, "mean abs diff {d}");
}

#[test]
fn transparent_half_is_filled_from_its_mirror() {
    let (img, _, _) = frontal_face(4, 96);
    let model = Reference3DModel::for_frame(96, 96);
    let mut rgba = img.to_rgba();
    for y in 0..96 {
        for x in 0..48 {
            rgba.pixel_mut(x, y).copy_from_slice(&[0, 0, 0, 0]);
        }
    }
    let f = frontalize_detailed(&rgba, &model.reference_keypoints(), &model).unwrap();
    let filled = f.filled.iter().filter(|&&v| v).count();
    assert!(filled > 96 * 20, "only {filled} pixels filled");
    for y in 0..96 {
        for x in 0..96 {
            if f.filled[y * 96 + x] {
                assert!(x < 48, "filled pixel on the visible half at {x},{y}");
                assert_eq!(f.image.pixel(x, y), f.image.pixel(95 - x, y), "at {x},{y}");
            }
        }
    }
}

#[test]
fn yawed_face_moves_toward_frontal() {
    let (frontal, _, traits) = frontal_face(7, 128);
    let yaw = 15f64.to_radians();
    let (posed, kps) = render_photo(&traits, &PhotoConditions { yaw, ..PhotoConditions::frontal() }, 128).unwrap();
    let model = Reference3DModel::for_frame(128, 128);
    let f = frontalize_detailed(&posed, &kps, &model).unwrap();
    let before = mean_abs_diff(&posed, &frontal);
    let after = mean_abs_diff(&f.image, &frontal);
    assert!(after < before, "frontalized {after} vs posed {before}");
}

#[test]
fn translated_landmarks_translate_the_mask() {
    let base = FaceImage::filled(96, 96, &[90, 120, 150]).unwrap();
    let kps = Reference3DModel::canonical(80).reference_keypoints();
    let moved = kps.map(|x, y| (x + 10.0, y));
    for t in builtin_templates() {
        let a = apply_mask(&base, &kps, &t).unwrap();
        let b = apply_mask(&base, &moved, &t).unwrap();
        let (mut changed, mut off) = (0, 0);
        for y in 0..96 {
            for x in 0..86 {
                for (p, q) in a.pixel(x, y).iter().zip(b.pixel(x + 10, y)) {
                    let d = p.abs_diff(*q);
                    // the refit is exact only up to float noise, which can
                    // flip a half-level rounding
                    assert!(d <= 1, "{} at {x},{y}: {p} vs {q}", t.name);
                    off += (d != 0) as usize;
                }
                changed += (a.pixel(x, y) != base.pixel(x, y)) as usize;
            }
        }
        assert!(changed > 50, "{} barely drawn", t.name);
        assert!(off * 100 < changed, "{}: {off} rounding flips over {changed} pixels", t.name);
    }
}
