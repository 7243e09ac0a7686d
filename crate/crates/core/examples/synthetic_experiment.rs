//! The seeded end-to-end experiment: 10 synthetic subjects, diver-face
//! augmentation, embedding training, then diver↔diver vs regular↔diver
//! identification.
//!
//! cargo run --release --example synthetic_experiment [out_dir] [epochs]

use std::path::PathBuf;
use std::time::Instant;

use diverid::evalkit::{run_experiment, ExperimentConfig, Strategy};

fn main() -> anyhow::Result<()> {
    env_logger::init();
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "target/synthetic_experiment".into()));
    let mut cfg = ExperimentConfig::default();
    if let Some(e) = args.next() {
        cfg.train.epochs = e.parse()?;
    }
    let t0 = Instant::now();
    let r = run_experiment(&cfg, &[Strategy::DiverDiver, Strategy::RegularDiver], Some(&out))?;
    println!("final training loss {:.4}", r.history.last().copied().unwrap_or(f64::NAN));
    for rep in &r.reports {
        println!("{:<14} {:>2}/{:<2} accuracy {:.3}", rep.fingerprint.strategy, rep.n_correct, rep.n_total, rep.accuracy);
    }
    println!("artifacts in {} ({:.1?})", out.display(), t0.elapsed());
    Ok(())
}
