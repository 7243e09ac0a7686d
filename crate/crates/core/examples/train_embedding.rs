//! Trains a 128-D embedding on a small synthetic cohort and compares
//! same-subject and different-subject cosine similarity.
//!
//! cargo run --release --example train_embedding -- [epochs]

use diverid::embedding::{train_embedding, EmbeddingConfig, LabeledFace, TrainOptions};
use diverid::identity::cosine_similarity;
use diverid::synth::Cohort;

fn main() -> anyhow::Result<()> {
    let epochs: usize = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(60);
    let cohort = Cohort::new(6, 64, 42);
    let mut faces = Vec::new();
    for s in 0..6 {
        for k in 0..8 {
            let (image, keypoints) = cohort.photo(s, k)?;
            faces.push(LabeledFace { image, label: s, keypoints: Some(keypoints), diver: false });
        }
    }
    let cfg = EmbeddingConfig { dim: 128, classes: 6, input_size: 32, ..Default::default() };
    let refs: Vec<&LabeledFace> = faces.iter().collect();
    let out = train_embedding(&refs, &cfg, &TrainOptions { epochs, ..Default::default() })?;
    println!("loss {:.3} -> {:.3}", out.history[0], out.history[epochs - 1]);

    let items: Vec<_> = faces.iter().map(|f| (f.image.clone(), None)).collect();
    let embs = out.model.extract_batch(&items)?;
    let (mut intra, mut inter, mut ni, mut ne) = (0.0, 0.0, 0, 0);
    for i in 0..embs.len() {
        for j in i + 1..embs.len() {
            let cs = cosine_similarity(&embs[i], &embs[j])?;
            if faces[i].label == faces[j].label {
                intra += cs;
                ni += 1;
            } else {
                inter += cs;
                ne += 1;
            }
        }
    }
    println!("mean CS same subject {:.3}, different subjects {:.3}", intra / ni as f64, inter / ne as f64);
    Ok(())
}
