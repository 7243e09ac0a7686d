//! A small grid over embedding size on the synthetic cohort, written as the
//! sweep CSV plus one loss history per cell.
//!
//! cargo run --release --example sweep -- [out_dir] [epochs]

use std::path::PathBuf;

use diverid::augmentation::builtin_templates;
use diverid::evalkit::{build_assets, sweep, write_sweep_csv, ExperimentConfig, SweepAxes};

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "sweep_out".into()));
    let mut cfg = ExperimentConfig { subjects: 6, base_photos: 2, ..Default::default() };
    cfg.train.epochs = args.next().map(|s| s.parse()).transpose()?.unwrap_or(40);
    let assets = build_assets(&cfg, &builtin_templates())?;
    let axes = SweepAxes { dims: vec![128, 256], ..Default::default() };
    let rows = sweep(&assets, &cfg, &axes, &out)?;
    write_sweep_csv(&out.join("sweep.csv"), &rows)?;
    print!("{}", std::fs::read_to_string(out.join("sweep.csv"))?);
    Ok(())
}
