//! Drives the binary through its subcommands on a tiny generated dataset.

use std::collections::HashSet;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_lifelong-lcd");

const SPEC: &str = r#"
envs = 3
places = 6
height = 8
width = 8
max_frequency = 3.0
walk_len = 60
"#;

const CONFIG: &str = r#"
seed = 3
[memory]
capacity = 16
[model]
input = [3, 8, 8]
hidden = 8
dim = 8
[[model.conv]]
channels = 4
kernel = 3
stride = 2
[[model.conv]]
channels = 4
kernel = 3
stride = 2
"#;

fn lcd(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = lcd(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn generate(dir: &Path) -> std::path::PathBuf {
    let spec = dir.join("spec.toml");
    fs::write(&spec, SPEC).unwrap();
    let data = dir.join("data");
    ok(&["gen-synth", "--spec", p(&spec), "--out", p(&data)]);
    data
}

#[test]
fn train_eval_report_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let data = generate(dir.path());
    let manifest = data.join("manifest.json");
    let config = dir.path().join("train.toml");
    fs::write(&config, CONFIG).unwrap();
    let run = dir.path().join("run");
    ok(&[
        "train",
        "--manifest",
        p(&manifest),
        "--config",
        p(&config),
        "--method",
        "airloop",
        "--out",
        p(&run),
        "--access-log",
    ]);
    for t in 1..=3 {
        assert!(run.join(format!("env_{t}.ckpt")).exists());
    }
    let losses = fs::read_to_string(run.join("losses.csv")).unwrap();
    assert!(losses.starts_with("step,env,L_triplet,L_reg,L_kd,total\n"));
    let run_report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run.join("run.json")).unwrap()).unwrap();
    assert_eq!(run_report["seed"], 3);
    assert_eq!(run_report["checkpoints"].as_array().unwrap().len(), 3);

    // every training frame is read exactly once, in stream order
    let access = fs::read_to_string(run.join("access.csv")).unwrap();
    let keys: Vec<&str> = access.lines().collect();
    assert_eq!(keys.len(), 3 * 48);
    assert_eq!(keys.iter().collect::<HashSet<_>>().len(), keys.len());
    let envs: Vec<u32> = keys
        .iter()
        .map(|k| k.split(',').next().unwrap().parse().unwrap())
        .collect();
    assert!(envs.windows(2).all(|w| w[0] <= w[1]));

    let matrix = dir.path().join("R.csv");
    ok(&[
        "eval",
        "--checkpoints",
        p(&run),
        "--manifest",
        p(&manifest),
        "--out",
        p(&matrix),
    ]);
    let summary = dir.path().join("summary.json");
    ok(&["report", "--matrix", p(&matrix), "--out", p(&summary)]);
    let s: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&summary).unwrap()).unwrap();
    for key in ["ap", "bwt", "fwt"] {
        assert!(s[key].as_f64().unwrap().is_finite(), "{key}");
    }
    assert_eq!(s["matrix"].as_array().unwrap().len(), 3);
    assert_eq!(s["environments"][0], "env0");
}

#[test]
fn report_on_two_environment_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let matrix = dir.path().join("R.csv");
    fs::write(&matrix, "trained_on,a,b\na,0.8,0.2\nb,0.6,0.7\n").unwrap();
    let out = dir.path().join("s.json");
    let stdout = ok(&["report", "--matrix", p(&matrix), "--out", p(&out)]);
    assert!(stdout.contains("AP 0.7000"));
    let s: serde_json::Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    assert!((s["ap"].as_f64().unwrap() - 0.7).abs() < 1e-12);
    assert!((s["bwt"].as_f64().unwrap() + 0.2).abs() < 1e-12);
    assert!((s["fwt"].as_f64().unwrap() - 0.2).abs() < 1e-12);
}

#[test]
fn repeated_training_writes_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    let data = generate(dir.path());
    let manifest = data.join("manifest.json");
    let config = dir.path().join("train.toml");
    fs::write(&config, CONFIG).unwrap();
    let mut outputs = Vec::new();
    for name in ["x", "y"] {
        let out = dir.path().join(name);
        ok(&[
            "--seed",
            "11",
            "train",
            "--manifest",
            p(&manifest),
            "--config",
            p(&config),
            "--method",
            "rkd",
            "--out",
            p(&out),
        ]);
        outputs.push(out);
    }
    for file in ["losses.csv", "env_3.ckpt", "final.ckpt"] {
        assert_eq!(
            fs::read(outputs[0].join(file)).unwrap(),
            fs::read(outputs[1].join(file)).unwrap(),
            "{file}"
        );
    }
}

#[test]
fn label_writes_every_pair() {
    let dir = tempfile::tempdir().unwrap();
    let data = generate(dir.path());
    let out = dir.path().join("pairs.csv");
    ok(&[
        "label",
        "--manifest",
        p(&data.join("manifest.json")),
        "--env",
        "env1",
        "--split",
        "test",
        "--out",
        p(&out),
    ]);
    let text = fs::read_to_string(&out).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "env,seq_a,idx_a,seq_b,idx_b,label,siou"
    );
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 12 * 11 / 2);
    assert!(rows.iter().all(|r| r.starts_with("env1,test,")));
}

#[test]
fn seed_flag_and_environment_variable_agree() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.toml");
    fs::write(&spec, SPEC).unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    ok(&[
        "--seed",
        "5",
        "gen-synth",
        "--spec",
        p(&spec),
        "--out",
        p(&a),
    ]);
    let out = Command::new(BIN)
        .args(["gen-synth", "--spec", p(&spec)])
        .env("LCD_SEED", "5")
        .env("LCD_OUT", p(&b))
        .output()
        .unwrap();
    assert!(out.status.success());
    let image = "env2/test/00055.png";
    assert_eq!(
        fs::read(a.join(image)).unwrap(),
        fs::read(b.join(image)).unwrap()
    );
}

#[test]
fn gradcheck_passes_and_usage_errors_exit_two() {
    let out = lcd(&["gradcheck"]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("triplet"));
    assert_eq!(lcd(&["no-such-command"]).status.code(), Some(2));
    assert_eq!(lcd(&["train", "--bogus"]).status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.json");
    let code = lcd(&[
        "train",
        "--manifest",
        p(&missing),
        "--out",
        p(&dir.path().join("o")),
    ])
    .status
    .code();
    assert_eq!(code, Some(1));
}
