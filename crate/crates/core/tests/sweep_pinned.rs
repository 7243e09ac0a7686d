//! The seeded reference sweep over embedding width on the ten-subject cohort.

use diverid::augmentation::builtin_templates;
use diverid::evalkit::{build_assets, sweep, ExperimentConfig, SweepAxes};

#[test]
fn narrow_embedding_does_not_beat_wide() {
    let cfg = ExperimentConfig::default();
    let assets = build_assets(&cfg, &builtin_templates()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let axes = SweepAxes { dims: vec![128, 512], ..Default::default() };
    let rows = sweep(&assets, &cfg, &axes, dir.path()).unwrap();
    let acc: Vec<(usize, usize)> = rows
        .iter()
        .map(|r| {
            let rep = r.report.as_ref().expect("cell ran");
            (rep.n_correct, rep.n_total)
        })
        .collect();
    assert_eq!((rows[0].dim, rows[1].dim), (128, 512));
    assert!(acc[0].0 <= acc[1].0);
    // measured once and frozen
    assert_eq!(acc, [(33, 40), (34, 40)]);
}
