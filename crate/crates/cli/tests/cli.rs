use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
seed = 5
[synth]
seed = 5
frame_size = [32, 32]
frames_per_split = { train = 6, val = 2, test = 2 }
structure_family_c0 = "filaments"
structure_family_c1 = "blobs"
density = [20.0, 20.0]
intensity_scale = [1.0, 1.0]
background_level = 0.05
[scin]
n_bins = 10
samples_per_bin = 20
[train]
max_steps = 20
batch_size = 2
patch_size = 16
val_every = 10
val_patches = 1
gen_arch = { depth = 2, base_width = 4, conditioning_mode = "scalar-broadcast-concat" }
reg_spec = { depth = 2, base_width = 4, head = "sigmoid-bounded" }
[infer]
mmse_count = 2
[eval]
regimes = [{ name = "dominant", w_values = [0.8] }, { name = "balanced", w_values = [0.5] }, { name = "weak", w_values = [0.2] }]
sweep_actual_w = [0.5]
sweep_assumed_w = [0.4, 0.5, 0.6]
"#;

fn scsplit(dir: &Path, args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_scsplit"))
        .current_dir(dir)
        .args(["--config", "tiny.toml"])
        .args(args)
        .output()
        .expect("binary runs");
    out
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = scsplit(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
    dir
}

#[test]
fn pipeline_runs_end_to_end_and_is_reproducible() {
    let tmp = setup();
    let d = tmp.path();
    ok(d, &["--out", "run", "synth"]);
    let frames = fs::read(d.join("run/dataset/frames.tif")).unwrap();
    ok(d, &["--out", "run", "build-scin", "--dataset", "run/dataset"]);
    ok(
        d,
        &["--out", "run", "train", "--dataset", "run/dataset", "--table", "run/scin_table.json"],
    );
    ok(d, &["--out", "run", "eval", "--bundle", "run/bundle", "--dataset", "run/dataset"]);
    for f in ["report.csv", "report.json", "plot_data.csv", "eval.config.toml", "train_log.jsonl"] {
        assert!(d.join("run").join(f).exists(), "missing {f}");
    }
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(d.join("run/report.json")).unwrap()).unwrap();
    assert_eq!(report["metadata"]["seed"], 5);
    assert!(report["metadata"]["run_config_hash"].is_string());
    assert!(report["metadata"]["timestamp"].is_null());

    // A single --variant reproduces that variant's rows from the full run.
    ok(
        d,
        &["--out", "single", "eval", "--bundle", "run/bundle", "--dataset", "run/dataset", "--variant", "fixed:0.5"],
    );
    let rows_of = |path: &Path, name: &str| -> Vec<String> {
        fs::read_to_string(path)
            .unwrap()
            .lines()
            .filter(|l| l.starts_with(&format!("{name},")))
            .map(String::from)
            .collect()
    };
    let full = rows_of(&d.join("run/report.csv"), "scSplit_0.5");
    assert!(!full.is_empty());
    assert_eq!(full, rows_of(&d.join("single/report.csv"), "scSplit_0.5"));

    // Same seed, noise off: byte-identical inference outputs.
    let infer = |out: &str| {
        ok(
            d,
            &["--out", out, "infer", "--bundle", "run/bundle", "--input", "run/dataset/frames.tif", "--no-noise"],
        );
    };
    infer("a");
    infer("b");
    for f in ["frames_c0.tif", "frames_c1.tif", "frames.json"] {
        let a = fs::read(d.join("a/infer").join(f)).unwrap();
        let b = fs::read(d.join("b/infer").join(f)).unwrap();
        assert!(a == b, "{f} differs between runs");
    }

    ok(d, &["--out", "run", "sweep", "--bundle", "run/bundle", "--dataset", "run/dataset"]);
    assert!(d.join("run/sweep.csv").exists());

    // No command touched its inputs.
    assert_eq!(frames, fs::read(d.join("run/dataset/frames.tif")).unwrap());
}

#[test]
fn config_errors_list_every_violation() {
    let tmp = setup();
    let d = tmp.path();
    let out = scsplit(
        d,
        &["eval", "--bundle", "nowhere", "--mmse-count", "0", "--steps", "0", "--variant", "bogus"],
    );
    assert_eq!(out.status.code(), Some(2));
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"], "config");
    assert!(err["details"].as_array().unwrap().len() >= 3, "{err}");
}

#[test]
fn missing_bundle_is_a_structured_failure() {
    let tmp = setup();
    let out = scsplit(tmp.path(), &["--out", "x", "sweep", "--bundle", "nowhere"]);
    assert_eq!(out.status.code(), Some(1));
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert!(err["error"].is_string());
}
