//! Embedding training on augmented synthetic subjects.

use diverid::augmentation::{builtin_templates, derive_seed, run_pipeline, KeypointSource, PipelineConfig};
use diverid::embedding::{train_embedding, Composition, Embedding, EmbeddingConfig, EmbeddingModel, LabeledFace, TrainOptions};
use diverid::identity::cosine_similarity;
use diverid::synth::Cohort;

/// `views` augmented diver views per subject.
fn diver_views(subjects: usize, views: usize, seed: u64) -> Vec<LabeledFace> {
    let cohort = Cohort::new(subjects, 64, seed);
    let templates = builtin_templates();
    let cfg = PipelineConfig::default();
    let mut faces = Vec::new();
    for s in 0..subjects {
        for k in 0..views {
            let (img, kps) = cohort.photo(s, k).unwrap();
            let out = run_pipeline(&img, KeypointSource::Given(&kps), &templates, &cfg, derive_seed(seed, (s * views + k) as u64), false).unwrap();
            faces.push(LabeledFace { image: out.image, label: s, keypoints: out.keypoints, diver: true });
        }
    }
    faces
}

fn embed(model: &EmbeddingModel, faces: &[LabeledFace]) -> Vec<Embedding> {
    let items: Vec<_> = faces.iter().map(|f| (f.image.clone(), f.keypoints)).collect();
    model.extract_batch(&items).unwrap()
}

#[test]
fn trained_subjects_separate() {
    let faces = diver_views(10, 12, 31);
    let cfg = EmbeddingConfig { dim: 128, classes: 10, input_size: 32, ..Default::default() };
    let refs: Vec<&LabeledFace> = faces.iter().collect();
    let out = train_embedding(&refs, &cfg, &TrainOptions { epochs: 200, seed: 1, ..Default::default() }).unwrap();
    assert_eq!(out.history.len(), 200);

    let embs = embed(&out.model, &faces);
    assert!(embs.iter().all(|e| (e.norm() - 1.0).abs() <= 1e-6));
    let (mut intra, mut inter, mut ni, mut ne) = (0.0, 0.0, 0, 0);
    for i in 0..embs.len() {
        for j in i + 1..embs.len() {
            let cs = cosine_similarity(&embs[i], &embs[j]).unwrap();
            if faces[i].label == faces[j].label {
                intra += cs;
                ni += 1;
            } else {
                inter += cs;
                ne += 1;
            }
        }
    }
    let (intra, inter) = (intra / ni as f64, inter / ne as f64);
    assert!(intra - inter >= 0.2, "intra {intra:.3} vs inter {inter:.3}");

    // two views of a subject agree more than either agrees with anyone else
    for s in 0..10 {
        let (a, b) = (&embs[s * 12], &embs[s * 12 + 1]);
        let own = cosine_similarity(a, b).unwrap();
        let rival = embs
            .iter()
            .zip(&faces)
            .filter(|(_, f)| f.label != s)
            .map(|(e, _)| cosine_similarity(a, e).unwrap())
            .fold(f64::NEG_INFINITY, f64::max);
        assert!(own > rival, "subject {s}: own {own:.3} vs rival {rival:.3}");
    }
}

#[test]
fn training_is_deterministic_and_zero_epochs_is_init() {
    let faces = diver_views(3, 3, 5);
    let refs: Vec<&LabeledFace> = faces.iter().collect();
    let cfg = EmbeddingConfig { dim: 128, classes: 3, input_size: 16, backbone: "toy-cnn-lite".into(), ..Default::default() };
    let opts = TrainOptions { epochs: 3, batch_size: 4, seed: 9, ..Default::default() };
    let dir = tempfile::tempdir().unwrap();
    let a = train_embedding(&refs, &cfg, &opts).unwrap();
    let b = train_embedding(&refs, &cfg, &opts).unwrap();
    assert_eq!(a.history, b.history);
    a.model.save(&dir.path().join("a.dvnn")).unwrap();
    b.model.save(&dir.path().join("b.dvnn")).unwrap();
    assert_eq!(std::fs::read(dir.path().join("a.dvnn")).unwrap(), std::fs::read(dir.path().join("b.dvnn")).unwrap());

    let zero = train_embedding(&refs, &cfg, &TrainOptions { epochs: 0, ..opts }).unwrap();
    assert!(zero.history.is_empty());
    let init = EmbeddingModel::new(cfg, 9).unwrap();
    assert_eq!(embed(&zero.model, &faces), embed(&init, &faces));
}

#[test]
fn composition_only_selects_faces() {
    let mut faces = diver_views(2, 2, 6);
    let cohort = Cohort::new(2, 64, 6);
    for s in 0..2 {
        let (image, kps) = cohort.photo(s, 0).unwrap();
        faces.push(LabeledFace { image, label: s, keypoints: Some(kps), diver: false });
    }
    assert_eq!(Composition::DiverOnly.select(&faces).len(), 4);
    assert_eq!(Composition::DiverAndRegular.select(&faces).len(), 6);

    // training on a diver-only selection equals training on those faces directly
    let cfg = EmbeddingConfig { dim: 128, classes: 2, input_size: 16, backbone: "toy-cnn-lite".into(), ..Default::default() };
    let opts = TrainOptions { epochs: 2, batch_size: 4, ..Default::default() };
    let divers: Vec<&LabeledFace> = faces.iter().filter(|f| f.diver).collect();
    let a = train_embedding(&Composition::DiverOnly.select(&faces), &cfg, &opts).unwrap();
    let b = train_embedding(&divers, &cfg, &opts).unwrap();
    assert_eq!(a.history, b.history);
}
