//! Trains the landmark regressor on synthetic 96×96 faces and reports the
//! mean landmark error on held-out faces.
//!
//! cargo run --release --example train_keypoints -- [epochs]

use diverid::keypoints::{train_keypoints, KeypointDataset, KeypointTrainConfig};
use diverid::synth::keypoint_samples;

fn main() -> anyhow::Result<()> {
    let epochs: usize = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(8);
    let mut samples = keypoint_samples(120, 1)?;
    let held_out = samples.split_off(100);
    let dataset = KeypointDataset::new(samples)?;
    let cfg = KeypointTrainConfig { epochs, ..Default::default() };
    let (reg, history) = train_keypoints(&dataset, &cfg)?;
    for (i, l) in history.iter().enumerate().filter(|(i, _)| i % 5 == 0 || *i + 1 == epochs) {
        println!("epoch {i:>3}  mse {l:.5}");
    }
    let mut total = 0.0;
    for (img, truth) in &held_out {
        let pred = reg.predict(img)?;
        total += pred.points().iter().zip(truth.points()).map(|(p, t)| ((p.0 - t.0).powi(2) + (p.1 - t.1).powi(2)).sqrt()).sum::<f64>() / 15.0;
    }
    println!("held-out mean landmark error {:.2} px", total / held_out.len() as f64);
    Ok(())
}
