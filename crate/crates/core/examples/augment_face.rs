//! Turns one synthetic face into a diver face, writing every stage.
//!
//! cargo run --example augment_face -- [out_dir] [seed]

use std::path::PathBuf;

use diverid::augmentation::{builtin_templates, run_pipeline, KeypointSource, PipelineConfig};
use diverid::synth::Cohort;

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "augment_out".into()));
    let seed: u64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(7);
    std::fs::create_dir_all(&out)?;

    let cohort = Cohort::new(4, 128, seed);
    let templates = builtin_templates();
    for i in 0..cohort.subjects.len() {
        let (img, kps) = cohort.photo(i, 0)?;
        let stem = Cohort::subject_id(i);
        img.save(&out.join(format!("{stem}.png")))?;
        let result = run_pipeline(&img, KeypointSource::Given(&kps), &templates, &PipelineConfig::default(), seed + i as u64, true)?;
        result.write_stages(&out, &stem)?;
        println!(
            "{stem}: {}x{} with {} + {}",
            result.image.width(),
            result.image.height(),
            result.mask.as_deref().unwrap_or("-"),
            result.snorkel.as_deref().unwrap_or("-")
        );
    }
    println!("wrote {}", out.display());
    Ok(())
}
