//! Randomized invariant checks across the library.

mod common;

use std::collections::BTreeMap;

use diverid::augmentation::{
    builtin_templates, fisheye, run_pipeline, underwater_colorize, FisheyeParams, KeypointSource, PipelineConfig,
    UnderwaterParams,
};
use diverid::embedding::Embedding;
use diverid::evalkit::{evaluate, pca_fit, Fingerprint, Query};
use diverid::identity::IdentityDatabase;
use diverid::imaging::{alpha_composite, crop, warp_affine, AffineTransform, FaceImage};
use diverid::nnet::{LayerSpec, Network, Tensor};
use diverid::synth::Cohort;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn image(w: usize, h: usize, ch: usize, seed: u64) -> FaceImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    FaceImage::new(w, h, ch, (0..w * h * ch).map(|_| rng.gen()).collect()).unwrap()
}

fn unit(rng: &mut ChaCha8Rng, d: usize) -> Embedding {
    Embedding::normalized(&common::unit_vector(rng, d)).unwrap()
}

/// A small database with `subjects` entries of 1 to 3 embeddings each.
fn database(seed: u64, dim: usize, subjects: usize) -> IdentityDatabase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut db = IdentityDatabase::new(dim);
    for s in 0..subjects {
        let n = rng.gen_range(1..4);
        db.enroll(&format!("id{s}"), (0..n).map(|_| unit(&mut rng, dim)).collect(), None).unwrap();
    }
    db
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn fisheye_zero_is_identity(w in 2usize..40, h in 2usize..40, seed in any::<u64>()) {
        let img = image(w, h, 3, seed);
        prop_assert_eq!(fisheye(&img, &FisheyeParams::for_image(w, h, 0.0)).unwrap(), img);
    }

    #[test]
    fn fisheye_points_round_trip(k in -0.3f64..0.3, x in 0.0f64..63.0, y in 0.0f64..63.0) {
        let p = FisheyeParams::for_image(64, 64, k);
        let (sx, sy) = p.source_point(x, y);
        prop_assume!((0.0..=63.0).contains(&sx) && (0.0..=63.0).contains(&sy));
        let (bx, by) = p.dest_point(sx, sy).expect("inside the monotone range");
        prop_assert!(((bx - x).powi(2) + (by - y).powi(2)).sqrt() < 0.5);
    }

    #[test]
    fn identity_warp_is_bit_exact(w in 1usize..30, h in 1usize..30, ch in prop::sample::select(vec![1usize, 3, 4]), seed in any::<u64>()) {
        let img = image(w, h, ch, seed);
        let id = AffineTransform::new([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]);
        prop_assert_eq!(warp_affine(&img, &id, w, h).unwrap(), img);
    }

    #[test]
    fn crops_compose(seed in any::<u64>(), x0 in 0usize..10, y0 in 0usize..10, x1 in 0usize..5, y1 in 0usize..5, w in 1usize..8, h in 1usize..8) {
        let img = image(30, 30, 3, seed);
        let outer = crop(&img, x0, y0, w + x1 + 3, h + y1 + 3).unwrap();
        prop_assert_eq!(crop(&outer, x1, y1, w, h).unwrap(), crop(&img, x0 + x1, y0 + y1, w, h).unwrap());
    }

    #[test]
    fn composite_stays_between_inputs(seed in any::<u64>()) {
        let base = image(9, 7, 3, seed);
        let over = image(9, 7, 4, seed ^ 1);
        let out = alpha_composite(&base, &over).unwrap();
        for i in 0..9 * 7 {
            for c in 0..3 {
                let (b, o, r) = (base.data()[3 * i + c], over.data()[4 * i + c], out.data()[3 * i + c]);
                prop_assert!(b.min(o) <= r && r <= b.max(o));
            }
        }
    }

    #[test]
    fn colorize_darkens_with_depth(seed in any::<u64>(), d in 0.0f64..6.0, extra in 0.01f64..3.0) {
        let img = image(8, 8, 3, seed);
        let shallow = UnderwaterParams { depth: d, beta: 0.0, ..Default::default() };
        let deep = UnderwaterParams { depth: d + extra, ..shallow };
        let a = underwater_colorize(&img, &shallow).unwrap();
        let b = underwater_colorize(&img, &deep).unwrap();
        prop_assert!(a.data().iter().zip(b.data()).all(|(x, y)| y <= x));
    }

    #[test]
    fn l2norm_rows_are_unit(seed in any::<u64>(), d in 2usize..10) {
        let net = Network::<f64>::new(vec![d], vec![LayerSpec::dense(d, 5), LayerSpec::L2Norm], seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::new(vec![3, d], (0..3 * d).map(|_| rng.gen_range(-3.0..3.0)).collect()).unwrap();
        let y = net.infer(&x).unwrap();
        for r in 0..3 {
            let n: f64 = y.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!((n - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn inference_is_pure(seed in any::<u64>()) {
        let net = Network::<f32>::new(
            vec![1, 8, 8],
            vec![LayerSpec::conv3x3(1, 2), LayerSpec::Relu, LayerSpec::pool2(), LayerSpec::Flatten, LayerSpec::dense(32, 4)],
            seed,
        )
        .unwrap();
        let before = net.state();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::new(vec![2, 1, 8, 8], (0..128).map(|_| rng.gen()).collect()).unwrap();
        let a = net.infer(&x).unwrap();
        let b = net.infer(&x).unwrap();
        prop_assert_eq!(a.data(), b.data());
        prop_assert_eq!(net.state(), before);
    }

    #[test]
    fn normalized_embeddings_are_unit(v in prop::collection::vec(-1e3f64..1e3, 2..64)) {
        prop_assume!(v.iter().any(|x| x.abs() > 1e-6));
        let e = Embedding::normalized(&v).unwrap();
        prop_assert!((e.norm() - 1.0).abs() <= 1e-6);
    }

    #[test]
    fn identify_matches_linear_scan(seed in any::<u64>(), dim in 2usize..12, subjects in 1usize..6, scale in 1e-3f64..1e3) {
        let db = database(seed, dim, subjects);
        let oracle: BTreeMap<String, Vec<Vec<f64>>> = db
            .records()
            .map(|r| (r.subject.clone(), r.embeddings.iter().map(|e| e.as_slice().iter().map(|&x| x as f64).collect()).collect()))
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 7);
        let q: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (ws, wc) = common::brute_force_match(&oracle, &q).unwrap();
        let got = db.identify_raw(&q, None).unwrap().best.unwrap();
        prop_assert_eq!(&got.0, &ws);
        prop_assert!((got.1 - wc).abs() <= 1e-12);
        let scaled: Vec<f64> = q.iter().map(|v| v * scale).collect();
        prop_assert_eq!(db.identify_raw(&scaled, None).unwrap().best.unwrap().0, ws);
    }

    #[test]
    fn unrelated_enrollment_keeps_scores(seed in any::<u64>(), dim in 2usize..10, subjects in 1usize..5) {
        let db = database(seed, dim, subjects);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 9);
        let q = unit(&mut rng, dim);
        let before: BTreeMap<String, f64> = db.identify(&q, None).unwrap().scores.into_iter().collect();
        let mut grown = db.clone();
        grown.enroll("zz-newcomer", vec![unit(&mut rng, dim), unit(&mut rng, dim)], None).unwrap();
        let after: BTreeMap<String, f64> = grown.identify(&q, None).unwrap().scores.into_iter().collect();
        for (s, cs) in &before {
            prop_assert_eq!(after[s].to_bits(), cs.to_bits());
        }
    }

    #[test]
    fn database_bytes_round_trip(seed in any::<u64>(), dim in 1usize..20, subjects in 0usize..6) {
        let db = database(seed, dim, subjects);
        let bytes = db.to_bytes();
        let back = IdentityDatabase::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.to_bytes(), bytes);
        prop_assert_eq!(back.len(), db.len());
    }

    #[test]
    fn accuracy_is_a_recount(seed in any::<u64>(), n in 1usize..30) {
        let db = database(seed, 6, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 3);
        let queries: Vec<Query> = (0..n)
            .map(|i| Query { id: i.to_string(), subject: format!("id{}", rng.gen_range(0..5)), embedding: unit(&mut rng, 6) })
            .collect();
        let report = evaluate(&db, &queries, Fingerprint::default()).unwrap();
        let correct = queries
            .iter()
            .filter(|q| db.identify(&q.embedding, None).unwrap().best.map(|b| b.0) == Some(q.subject.clone()))
            .count();
        prop_assert_eq!(report.n_correct, correct);
        prop_assert_eq!(report.n_total, n);
        prop_assert!((report.accuracy - correct as f64 / n as f64).abs() < 1e-15);
        let confusion_total: usize = report.confusion.values().flat_map(|m| m.values()).sum();
        prop_assert_eq!(confusion_total, n);
    }

    #[test]
    fn pca_agrees_with_jacobi(seed in any::<u64>(), d in 2usize..8, extra in 1usize..20) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = common::anisotropic_data(&mut rng, d + extra, d);
        let k = d.min(2);
        let model = pca_fit(&data, k).unwrap();
        let (values, vectors) = common::jacobi_eigen(&common::covariance(&data));
        prop_assert!(common::subspace_residual(&model.components, &vectors[..k]) < 1e-8);
        prop_assert!(common::orthonormality_error(&model.components) < 1e-10);
        for (a, b) in model.variances.iter().zip(&values) {
            prop_assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn pipeline_is_deterministic(seed in any::<u64>(), subject in 0usize..3) {
        let cohort = Cohort::new(3, 64, 99);
        let (img, kps) = cohort.photo(subject, 1).unwrap();
        let templates = builtin_templates();
        let cfg = PipelineConfig::default();
        let a = run_pipeline(&img, KeypointSource::Given(&kps), &templates, &cfg, seed, false).unwrap();
        let b = run_pipeline(&img, KeypointSource::Given(&kps), &templates, &cfg, seed, false).unwrap();
        prop_assert_eq!(a.image, b.image);
        prop_assert_eq!(a.keypoints, b.keypoints);
        prop_assert_eq!(a.mask, b.mask);
    }
}
