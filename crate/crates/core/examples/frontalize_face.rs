//! Frontalizes a posed synthetic face and compares it with the true frontal
//! rendering.
//!
//! cargo run --release --example frontalize_face -- [out_dir] [yaw]

use std::path::PathBuf;

use diverid::augmentation::{frontalize_detailed, Reference3DModel};
use diverid::imaging::FaceImage;
use diverid::synth::{render_photo, PhotoConditions, SubjectTraits};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn mean_abs_diff(a: &FaceImage, b: &FaceImage) -> f64 {
    let (a, b) = (a.to_rgb(), b.to_rgb());
    a.data().iter().zip(b.data()).map(|(x, y)| (*x as f64 - *y as f64).abs()).sum::<f64>() / a.data().len() as f64
}

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "frontalize_out".into()));
    let yaw: f64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(0.26);
    std::fs::create_dir_all(&out)?;

    let traits = SubjectTraits::random(&mut ChaCha8Rng::seed_from_u64(3));
    let (frontal, _) = render_photo(&traits, &PhotoConditions::frontal(), 128)?;
    let (posed, kps) = render_photo(&traits, &PhotoConditions { yaw, ..PhotoConditions::frontal() }, 128)?;
    let model = Reference3DModel::for_frame(128, 128);
    let f = frontalize_detailed(&posed, &kps, &model)?;

    frontal.save(&out.join("frontal.png"))?;
    posed.save(&out.join("posed.png"))?;
    f.image.save(&out.join("frontalized.png"))?;
    let filled = f.filled.iter().filter(|&&v| v).count();
    println!("yaw {yaw:.2}: posed vs frontal {:.2}, frontalized vs frontal {:.2}", mean_abs_diff(&posed, &frontal), mean_abs_diff(&f.image, &frontal));
    println!("camera fit rms {:.3} px; {filled} pixels filled from the mirror side", f.fit.rms_error);
    Ok(())
}
