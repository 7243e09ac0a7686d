//! End-to-end runs of the `diverid` binary on small synthetic inputs.

mod common;

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use diverid::identity::IdentityDatabase;
use tempfile::TempDir;

fn diverid<I, S>(args: I) -> Output
where
    I: IntoIterator<Item = S>,
    S: AsRef<std::ffi::OsStr>,
{
    Command::new(env!("CARGO_BIN_EXE_diverid"))
        .args(args)
        .env_remove("SOURCE_DATE_EPOCH")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = diverid(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(dir: &Path, subjects: usize, photos: usize) -> PathBuf {
    let out = dir.join("faces");
    ok(&["synth", "--out", s(&out), "--subjects", &subjects.to_string(), "--photos", &photos.to_string()]);
    out
}

fn data_rows(csv: &Path) -> usize {
    std::fs::read_to_string(csv).unwrap().lines().count() - 1
}

#[test]
fn augment_two_faces_gives_eighteen_rows_reproducibly() {
    let tmp = TempDir::new().unwrap();
    let faces = synth(tmp.path(), 2, 1);
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    ok(&["--seed", "3", "augment", "--input", s(&faces), "--out", s(&a)]);
    ok(&["--seed", "3", "augment", "--input", s(&faces), "--out", s(&b)]);
    assert_eq!(data_rows(&a.join("manifest.csv")), 18);
    assert_eq!(common::sha256_tree(&a), common::sha256_tree(&b));

    let c = tmp.path().join("c");
    ok(&["--seed", "4", "augment", "--input", s(&faces), "--out", s(&c)]);
    assert_ne!(common::sha256_tree(&a), common::sha256_tree(&c));
}

#[test]
fn dumped_config_reproduces_the_run() {
    let tmp = TempDir::new().unwrap();
    let faces = synth(tmp.path(), 1, 2);
    let direct = tmp.path().join("direct");
    let via = tmp.path().join("via");
    ok(&["--seed", "9", "augment", "--input", s(&faces), "--out", s(&direct), "--depth", "2.5", "--skip-stages", "f"]);
    let dumped = ok(&["--seed", "9", "augment", "--input", s(&faces), "--out", s(&via), "--depth", "2.5", "--skip-stages", "f", "--dump-config"]);
    assert!(!via.exists(), "dumping must not run the command");
    let cfg = tmp.path().join("run.toml");
    std::fs::write(&cfg, dumped).unwrap();
    ok(&["augment", "--config", s(&cfg)]);
    assert_eq!(common::sha256_tree(&direct), common::sha256_tree(&via));

    // explicit flags win over the file
    let other = tmp.path().join("other");
    ok(&["augment", "--config", s(&cfg), "--out", s(&other), "--depth", "1.0"]);
    assert_ne!(common::sha256_tree(&direct), common::sha256_tree(&other));

    std::fs::write(&cfg, "[augment]\nno_such_flag = 1\n").unwrap();
    assert_eq!(code(&diverid(["augment", "--config", s(&cfg), "--input", s(&faces), "--out", s(&other)])), 1);
}

#[test]
fn keypoint_training_history_and_resume() {
    let tmp = TempDir::new().unwrap();
    let faces = tmp.path().join("kp");
    ok(&["synth", "--out", s(&faces), "--subjects", "1", "--photos", "1", "--keypoint-samples", "6"]);
    let csv = faces.join("keypoints.csv");
    let model = tmp.path().join("kp.dvnn");
    let out = ok(&["train-keypoints", "--data", s(&csv), "--out", s(&model), "--epochs", "5", "--batch-size", "3"]);
    assert!(out.contains("optimizer step 10"), "{out}");
    let history = tmp.path().join("kp.dvnn.loss.csv");
    assert_eq!(data_rows(&history), 5);

    let resumed = tmp.path().join("kp2.dvnn");
    let out = ok(&["train-keypoints", "--data", s(&csv), "--out", s(&resumed), "--epochs", "1", "--batch-size", "3", "--resume", s(&model)]);
    assert!(out.contains("optimizer step 12"), "{out}");
}

#[test]
fn enroll_identify_bench_and_exit_codes() {
    let tmp = TempDir::new().unwrap();
    let faces = synth(tmp.path(), 3, 3);
    let aug = tmp.path().join("aug");
    ok(&["augment", "--input", s(&faces), "--out", s(&aug)]);
    let model = tmp.path().join("embed.dvnn");
    ok(&[
        "train-embed", "--data", s(&aug), "--out", s(&model), "--dim", "128", "--backbone", "toy-cnn-lite",
        "--input-size", "32", "--epochs", "2", "--batch-size", "16",
    ]);
    let db = tmp.path().join("ids.dvdb");
    let subject = faces.join("subject_000");
    let images = format!("{},{}", s(&subject.join("p00.png")), s(&subject.join("p01.png")));
    ok(&["enroll", "--db", s(&db), "--subject", "subject_000", "--images", &images, "--model", s(&model), "--timestamp", "5"]);
    assert!(IdentityDatabase::meta_path(&db).exists());

    let query = subject.join("p02.png");
    let out = diverid(["identify", "--db", s(&db), "--model", s(&model), "--image", s(&query)]);
    assert_eq!(code(&out), 0);
    let line = String::from_utf8(out.stdout).unwrap();
    let fields: Vec<&str> = line.trim().split('\t').collect();
    assert_eq!((fields[0], fields[2]), ("subject_000", "accepted"));
    let cs: f64 = fields[1].parse().unwrap();

    let above = format!("{}", cs + 1e-3);
    let out = diverid(["identify", "--db", s(&db), "--model", s(&model), "--image", s(&query), "--threshold", &above]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stdout).trim_end().ends_with("\trejected"));

    let empty = tmp.path().join("empty.dvdb");
    IdentityDatabase::new(128).save(&empty).unwrap();
    let out = diverid(["identify", "--db", s(&empty), "--model", s(&model), "--image", s(&query)]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stdout).contains("no-entries"));

    let missing = tmp.path().join("missing.dvdb");
    assert_eq!(code(&diverid(["identify", "--db", s(&missing), "--model", s(&model), "--image", s(&query)])), 1);

    let bench = ok(&["bench", "--db", s(&db), "--model", s(&model), "--image", s(&query), "--n", "50", "--json"]);
    let v: serde_json::Value = serde_json::from_str(&bench).unwrap();
    assert_eq!(v["runs"], 50);
    assert!(v["p95_ms"].as_f64().unwrap() >= v["median_ms"].as_f64().unwrap());
}

#[test]
fn export_import_and_pca_scatter() {
    let tmp = TempDir::new().unwrap();
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(12);
    let subjects: Vec<serde_json::Value> = (0..6)
        .map(|i| {
            let embs: Vec<Vec<f64>> = (0..4).map(|_| common::unit_vector(&mut rng, 16).into_iter().map(|v| v * 3.0).collect()).collect();
            serde_json::json!({ "id": format!("diver_{i}"), "embeddings": embs })
        })
        .collect();
    let file = tmp.path().join("in.json");
    std::fs::write(&file, serde_json::json!({ "subjects": subjects }).to_string()).unwrap();
    let db = tmp.path().join("db.dvdb");
    // unnormalized vectors are refused unless asked for
    assert_eq!(code(&diverid(["import-embeddings", "--db", s(&db), "--file", s(&file)])), 1);
    ok(&["import-embeddings", "--db", s(&db), "--file", s(&file), "--normalize"]);

    let export = tmp.path().join("export.json");
    ok(&["export", "--db", s(&db), "--out", s(&export)]);
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&export).unwrap()).unwrap();
    assert_eq!(v["dim"], 16);
    assert_eq!(v["subjects"].as_array().unwrap().len(), 6);

    let scatter = tmp.path().join("scatter.csv");
    ok(&["pca", "--db", s(&db), "--out", s(&scatter)]);
    assert_eq!(data_rows(&scatter), 24);
    let from_export = tmp.path().join("scatter2.csv");
    ok(&["pca", "--embeddings", s(&export), "--out", s(&from_export)]);
    assert_eq!(std::fs::read(&scatter).unwrap(), std::fs::read(&from_export).unwrap());
}

#[test]
fn small_sweep_has_one_row_per_cell_and_repeats() {
    let tmp = TempDir::new().unwrap();
    let run = |dir: &Path| {
        ok(&[
            "sweep", "--out", s(dir), "--subjects", "3", "--epochs", "1", "--dims", "128,256", "--backbones", "toy-cnn,toy-cnn-lite",
        ]);
        std::fs::read_to_string(dir.join("sweep.csv")).unwrap()
    };
    let a = run(&tmp.path().join("a"));
    let b = run(&tmp.path().join("b"));
    let lines: Vec<&str> = a.lines().collect();
    assert_eq!(lines[0], diverid::evalkit::SWEEP_HEADER.join(","));
    assert_eq!(lines.len(), 5);
    // rows differ only in their loss-history paths, which name the run dir
    let strip = |t: &str| t.lines().map(|l| l.rsplit_once(',').map_or(l, |p| p.0).to_string()).collect::<Vec<_>>();
    assert_eq!(strip(&a), strip(&b));
}

#[test]
fn experiment_writes_its_artifacts() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("exp");
    ok(&["experiment", "--out", s(&out), "--subjects", "3", "--epochs", "1", "--dim", "128"]);
    for f in ["embedding.dvnn", "loss.csv", "diver-diver.dvdb", "regular-diver.dvdb", "diver-diver.samples.csv", "reports.json"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    let out2 = tmp.path().join("exp2");
    let demasked = tmp.path().join("nothing");
    std::fs::create_dir_all(&demasked).unwrap();
    let r = diverid(["experiment", "--out", s(&out2), "--subjects", "3", "--epochs", "1", "--dim", "128", "--strategies", "regular-demasked"]);
    assert_eq!(code(&r), 1);
    assert!(String::from_utf8_lossy(&r.stderr).contains("regular-demasked"));
}

#[test]
fn usage_and_input_errors() {
    let tmp = TempDir::new().unwrap();
    let empty = tmp.path().join("empty");
    std::fs::create_dir_all(&empty).unwrap();
    assert_eq!(code(&diverid(["augment", "--input", s(&empty), "--out", s(&tmp.path().join("o"))])), 1);
    assert_eq!(code(&diverid(["train-embed", "--data", s(&empty), "--out", s(&tmp.path().join("m.dvnn"))])), 1);
    assert_eq!(code(&diverid(["train-keypoints", "--out", "x.dvnn"])), 1);
    assert_eq!(code(&diverid(["no-such-command"])), 1);
    assert_eq!(code(&diverid(["--help"])), 0);
    let r = diverid(["augment", "--input", s(&empty), "--out", "o", "--attenuation", "1,2"]);
    assert_eq!(code(&r), 1);
}

#[test]
fn failed_save_leaves_the_previous_database() {
    let tmp = TempDir::new().unwrap();
    let path = tmp.path().join("ids.dvdb");
    let mut db = IdentityDatabase::new(2);
    db.enroll("a", vec![diverid::embedding::Embedding::normalized(&[1.0, 0.0]).unwrap()], None).unwrap();
    db.save(&path).unwrap();
    let before = std::fs::read(&path).unwrap();

    // a directory squatting on the temporary name makes the write fail midway
    let tmp_name = tmp.path().join(format!(".ids.dvdb.tmp{}", std::process::id()));
    std::fs::create_dir(&tmp_name).unwrap();
    db.enroll("b", vec![diverid::embedding::Embedding::normalized(&[0.0, 1.0]).unwrap()], None).unwrap();
    assert!(db.save(&path).is_err());
    assert_eq!(std::fs::read(&path).unwrap(), before);
    assert_eq!(IdentityDatabase::load(&path).unwrap().len(), 1);

    std::fs::remove_dir(&tmp_name).unwrap();
    db.save(&path).unwrap();
    assert_eq!(IdentityDatabase::load(&path).unwrap().len(), 2);
}
