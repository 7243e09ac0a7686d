//! Enrollment, persistence and identification with a hand-made database.
//!
//! cargo run --example enroll_identify

use diverid::embedding::Embedding;
use diverid::identity::{Decision, IdentityDatabase, IdentityStore};

fn main() -> anyhow::Result<()> {
    let e = |v: &[f64]| Embedding::normalized(v);
    let mut db = IdentityDatabase::new(3);
    db.enroll("alice", vec![e(&[1.0, 0.1, 0.0])?, e(&[0.9, 0.2, 0.1])?], None)?;
    db.enroll("bruno", vec![e(&[0.0, 1.0, 0.2])?, e(&[0.1, 0.9, 0.0])?], None)?;
    let under = db.enroll("chen", vec![e(&[0.1, 0.1, 1.0])?], None)?;
    println!("chen under-enrolled: {}", under.under_enrolled);

    let dir = tempfile::tempdir()?;
    let path = dir.path().join("divers.dvdb");
    db.save(&path)?;
    let store = IdentityStore::new(IdentityDatabase::load(&path)?);
    println!("saved and reloaded {} subjects ({} bytes)", store.snapshot().len(), std::fs::metadata(&path)?.len());

    for (q, threshold) in [([0.95, 0.15, 0.05], None), ([0.2, 0.2, 0.9], Some(0.99)), ([0.5, 0.5, 0.5], Some(0.5))] {
        let m = store.identify(&e(&q)?, threshold)?;
        let (who, cs) = m.best.clone().unwrap_or_default();
        let verdict = match m.decision {
            Decision::Accepted => "accepted",
            Decision::RejectedByThreshold => "rejected",
            Decision::NoEntries => "no entries",
        };
        println!("query {q:?} threshold {threshold:?}: best {who} (CS {cs:.4}) {verdict}");
    }
    Ok(())
}
