use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const CONFIG: &str = r#"
[data]
source = "synthetic"
probe_size = 120
[data.synthetic]
dim = 6
classes = 3
train = 400
test = 150
[model]
input = [1, 1, 6]
layers = [{ kind = "dense", units = 10 }, { kind = "dense", units = 3 }]
[train]
iterations = 150
[prune]
layer_ratios = [0.4, 0.7]
[retrain]
iterations = 60
[curve]
ratios = [0.25, 0.5, 0.9]
criteria = ["lobs", "magnitude", "random"]
"#;

fn lobs(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lobs"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = lobs(args);
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn setup(text: &str) -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.toml");
    fs::write(&cfg, text).unwrap();
    (dir, cfg)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn prune_then_replay_reproduces_the_model() {
    let (dir, cfg) = setup(CONFIG);
    let out = dir.path().join("run");
    let text = ok(&["prune", "--config", s(&cfg), "--out", s(&out), "--threads", "2"]);
    assert!(text.contains("compression ratio"));
    for f in ["model.lobs", "pruned.lobs", "decisions.csv", "hessian.lobs", "bounds.csv", "report.txt", "report.csv", "config.toml"] {
        assert!(out.join(f).exists(), "missing {f}");
    }
    let log = fs::read_to_string(out.join("decisions.csv")).unwrap();
    assert!(log.starts_with("# base_sha256="));

    let replayed = dir.path().join("replayed.lobs");
    ok(&[
        "replay",
        "--log",
        s(&out.join("decisions.csv")),
        "--model",
        s(&out.join("model.lobs")),
        "--hessian",
        s(&out.join("hessian.lobs")),
        "--out",
        s(&replayed),
    ]);
    assert_eq!(fs::read(&replayed).unwrap(), fs::read(out.join("pruned.lobs")).unwrap());
}

#[test]
fn replay_of_lobs_log_without_hessian_fails() {
    let (dir, cfg) = setup(CONFIG);
    let out = dir.path().join("run");
    ok(&["prune", "--config", s(&cfg), "--out", s(&out)]);
    let res = lobs(&[
        "replay",
        "--log",
        s(&out.join("decisions.csv")),
        "--model",
        s(&out.join("model.lobs")),
        "--out",
        s(&dir.path().join("x.lobs")),
    ]);
    assert!(!res.status.success());
    assert!(String::from_utf8_lossy(&res.stderr).contains("error"));
}

#[test]
fn criterion_flag_overrides_config() {
    let (dir, cfg) = setup(CONFIG);
    let out = dir.path().join("mag");
    let text = ok(&["prune", "--config", s(&cfg), "--out", s(&out), "--criterion", "magnitude"]);
    assert!(text.contains("magnitude"));
    assert!(!out.join("hessian.lobs").exists());
    let report = fs::read_to_string(out.join("report.csv")).unwrap();
    assert!(report.contains("criterion,magnitude"));
}

#[test]
fn same_seed_gives_identical_reports() {
    let (dir, cfg) = setup(CONFIG);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    ok(&["prune", "--config", s(&cfg), "--out", s(&a), "--seed", "5"]);
    ok(&["prune", "--config", s(&cfg), "--out", s(&b), "--seed", "5"]);
    let strip = |p: &Path| {
        fs::read_to_string(p.join("report.csv"))
            .unwrap()
            .lines()
            .filter(|l| !l.starts_with("seconds_"))
            .collect::<Vec<_>>()
            .join("\n")
    };
    assert_eq!(strip(&a), strip(&b));
    assert_eq!(fs::read(a.join("pruned.lobs")).unwrap(), fs::read(b.join("pruned.lobs")).unwrap());
}

#[test]
fn curve_trace_and_bounds_write_csv() {
    let (dir, cfg) = setup(CONFIG);
    let out = dir.path().join("c");
    ok(&["curve", "--config", s(&cfg), "--out", s(&out)]);
    let curve = fs::read_to_string(out.join("curve.csv")).unwrap();
    let rows: Vec<&str> = curve.lines().collect();
    assert_eq!(rows[0], "criterion,ratio,accuracy");
    assert!(rows[1].starts_with("original,0,"));
    assert_eq!(rows.len(), 2 + 3 * 3);

    ok(&["retrain-trace", "--config", s(&cfg), "--out", s(&out)]);
    let trace = fs::read_to_string(out.join("retrain_trace.csv")).unwrap();
    assert!(trace.lines().any(|l| l.starts_with("lobs,0,")));
    assert!(trace.lines().any(|l| l.starts_with("magnitude,0,")));

    let text = ok(&["bounds", "--config", s(&cfg), "--out", s(&out)]);
    assert!(text.contains("holds"));
    assert!(out.join("bounds.csv").exists());
}

#[test]
fn unknown_config_key_is_rejected() {
    let (dir, cfg) = setup(&format!("{CONFIG}\n[output]\ndirectory = \"x\"\n"));
    let res = lobs(&["train", "--config", s(&cfg), "--out", s(&dir.path().join("t"))]);
    assert!(!res.status.success());
    assert!(String::from_utf8_lossy(&res.stderr).contains("directory"));
}

#[test]
fn train_saves_a_model() {
    let (dir, cfg) = setup(CONFIG);
    let out = dir.path().join("t");
    let text = ok(&["train", "--config", s(&cfg), "--out", s(&out)]);
    assert!(text.contains("test error"));
    assert!(out.join("model.lobs").exists());
}
