use std::path::Path;
use std::process::{Command, Output};

use dcn::data::DatasetManifest;
use dcn::protocol::read_reports;

fn dcn(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dcn"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .env_remove("DCN_SEED")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn small_manifest(dir: &Path) {
    let mut m = DatasetManifest::desk_scale(5);
    m.height = 32;
    m.width = 32;
    for s in &mut m.splits {
        s.count = 12;
        s.live = 6;
        s.spoof = 6;
    }
    m.save(&dir.join("small.json")).unwrap();
}

const TINY: &str = r#"
steps = 4
batch_size = 4
dtype = "f64"
checkpoint_every = 2
manifest = "small.json"
output_dir = "run"
[model]
height = 32
width = 32
grid_rows = 2
grid_cols = 2
channels = [4, 8]
"#;

#[test]
fn gradcheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = dcn(dir.path(), &["gradcheck"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&dcn(dir.path(), &["frobnicate"])), 2);
    assert_eq!(code(&dcn(dir.path(), &["train", "--stepz", "3"])), 2);
    assert_eq!(
        code(&dcn(dir.path(), &["eval", "--protocol", "sideways", "--oracle"])),
        2
    );
    std::fs::write(dir.path().join("bad.toml"), "steps = 0\n").unwrap();
    let o = dcn(dir.path(), &["train", "--config", "bad.toml"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("steps"));
    std::fs::write(dir.path().join("odd.toml"), "batch_size = 7\nunknown_key = 1\n").unwrap();
    assert_eq!(code(&dcn(dir.path(), &["train", "--config", "odd.toml"])), 2);
}

#[test]
fn runtime_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let o = dcn(
        dir.path(),
        &["eval", "--checkpoint", "missing.dcn", "--protocol", "intra"],
    );
    assert_eq!(code(&o), 1);
    std::fs::write(dir.path().join("junk.dcn"), b"not a checkpoint").unwrap();
    assert_eq!(
        code(&dcn(
            dir.path(),
            &["eval", "--checkpoint", "junk.dcn", "--protocol", "intra"]
        )),
        1
    );
}

#[test]
fn oracle_scorer_reports_zero_acer() {
    let dir = tempfile::tempdir().unwrap();
    small_manifest(dir.path());
    let o = dcn(
        dir.path(),
        &[
            "eval",
            "--oracle",
            "--manifest",
            "small.json",
            "--protocol",
            "cross",
            "--report",
            "r.jsonl",
        ],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let reports = read_reports(&dir.path().join("r.jsonl")).unwrap();
    assert_eq!(reports.len(), 1);
    assert_eq!(reports[0].acer, 0.0);
    assert_eq!(reports[0].scorer, "oracle");
}

#[test]
fn identity_preview_equals_input() {
    let dir = tempfile::tempdir().unwrap();
    small_manifest(dir.path());
    std::fs::write(dir.path().join("c.toml"), TINY).unwrap();
    let o = dcn(
        dir.path(),
        &[
            "augment-preview",
            "--config",
            "c.toml",
            "--seed",
            "2",
            "--out",
            "p",
            "--identity",
            "--no-augment",
        ],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for i in 0..4 {
        let before = std::fs::read(dir.path().join(format!("p/view_{i:02}_before.ppm"))).unwrap();
        let after = std::fs::read(dir.path().join(format!("p/view_{i:02}_after.ppm"))).unwrap();
        assert_eq!(before, after, "view {i}");
    }
    let sidecar: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("p/provenance.json")).unwrap()).unwrap();
    assert_eq!(sidecar["views"].as_array().unwrap().len(), 4);
    assert_eq!(
        sidecar["views"][0]["permutation"],
        serde_json::json!([0, 1, 2, 3])
    );

    let o = dcn(
        dir.path(),
        &[
            "augment-preview",
            "--config",
            "c.toml",
            "--seed",
            "2",
            "--out",
            "q",
        ],
    );
    assert_eq!(code(&o), 0);
    let changed = (0..4).any(|i| {
        std::fs::read(dir.path().join(format!("q/view_{i:02}_before.ppm"))).unwrap()
            != std::fs::read(dir.path().join(format!("q/view_{i:02}_after.ppm"))).unwrap()
    });
    assert!(changed);
}

#[test]
fn gen_data_writes_samples() {
    let dir = tempfile::tempdir().unwrap();
    let o = dcn(
        dir.path(),
        &[
            "gen-data",
            "--manifest",
            "m.json",
            "--init",
            "--out",
            "data",
            "--limit",
            "2",
        ],
    );
    assert_eq!(code(&o), 0);
    assert!(dir.path().join("data/test_cross/index.csv").exists());
    assert!(dir.path().join("data/train/000000.ppm").exists());
    std::fs::write(
        dir.path().join("broken.json"),
        r#"{"seed":1,"num_domains":0,"height":8,"width":8,"splits":[]}"#,
    )
    .unwrap();
    let o = dcn(
        dir.path(),
        &["gen-data", "--manifest", "broken.json", "--out", "x", "--check"],
    );
    assert_eq!(code(&o), 2);
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("num_domains") && err.contains("splits"), "{err}");
}

#[test]
fn train_resume_and_eval() {
    let dir = tempfile::tempdir().unwrap();
    small_manifest(dir.path());
    std::fs::write(dir.path().join("c.toml"), TINY).unwrap();
    assert_eq!(code(&dcn(dir.path(), &["train", "--config", "c.toml"])), 0);
    let full = std::fs::read_to_string(dir.path().join("run/train_log.jsonl")).unwrap();
    assert_eq!(full.lines().count(), 4);
    assert!(dir.path().join("run/step_000002.dcn").exists());

    let o = dcn(
        dir.path(),
        &["train", "--config", "c.toml", "--resume", "run/step_000002.dcn"],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let resumed = std::fs::read_to_string(dir.path().join("run/train_log.jsonl")).unwrap();
    let strip = |s: &str| -> Vec<String> {
        s.lines()
            .map(|l| {
                let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
                v.as_object_mut().unwrap().remove("wall_time");
                v.to_string()
            })
            .collect()
    };
    assert_eq!(strip(&full), strip(&resumed));

    let o = dcn(
        dir.path(),
        &[
            "eval",
            "--checkpoint",
            "run/final.dcn",
            "--manifest",
            "small.json",
            "--protocol",
            "intra",
            "--dump-scores",
            "s.csv",
            "--dump-sim",
            "sim.csv",
            "--dump-features",
            "f.csv",
        ],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let scores = std::fs::read_to_string(dir.path().join("s.csv")).unwrap();
    assert!(scores.starts_with("sample_id,score,class,attack_type,domain_id"));
    assert_eq!(scores.lines().count(), 13);
    let sim = std::fs::read_to_string(dir.path().join("sim.csv")).unwrap();
    assert_eq!(sim.lines().count(), 1 + 12 * 16);
    assert!(dir.path().join("f.csv").exists());

    let o = Command::new(env!("CARGO_BIN_EXE_dcn"))
        .args(["train", "--config", "c.toml"])
        .current_dir(dir.path())
        .env("DCN_SEED", "seven")
        .output()
        .unwrap();
    assert_eq!(code(&o), 2);
}
