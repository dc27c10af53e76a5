use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_tfdpm");

const TINY_CONFIG: &str = "\
window = 6
diffusion_steps = 10
tau = 2
epochs = 2
batch_size = 50
hidden_size = 8
residual_channels = 8
scheduler_hidden = 8
";

fn tfdpm(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env_remove("TFDPM_SEED")
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn tfdpm")
}

fn ok(args: &[&str]) -> Output {
    let out = tfdpm(args);
    assert!(
        out.status.success(),
        "tfdpm {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Simulated data, a trained model and a trained scheduler in `dir`.
struct Pipeline {
    data: PathBuf,
    ckpt: PathBuf,
    sched: PathBuf,
}

fn pipeline(dir: &Path) -> Pipeline {
    let data = dir.join("data");
    ok(&["simulate", "--train-steps", "300", "--test-steps", "200", "--seed", "1", "--out", s(&data)]);
    let cfg = dir.join("run.ini");
    std::fs::write(&cfg, TINY_CONFIG).unwrap();
    let ckpt = dir.join("model.ckpt");
    ok(&["train", "--data", s(&data.join("train.csv")), "--config", s(&cfg), "--out", s(&ckpt)]);
    let sched = dir.join("sched.ckpt");
    ok(&[
        "train-scheduler",
        "--ckpt",
        s(&ckpt),
        "--data",
        s(&data.join("train.csv")),
        "--out",
        s(&sched),
    ]);
    Pipeline { data, ckpt, sched }
}

#[test]
fn simulate_is_deterministic_and_labels_only_test() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        ok(&["simulate", "--train-steps", "400", "--test-steps", "300", "--seed", "1", "--out", s(out)]);
    }
    for f in ["train.csv", "test.csv", "schema.json", "attacks.json"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let header = |f: &str| {
        let text = std::fs::read_to_string(a.join(f)).unwrap();
        text.lines().next().unwrap().split(',').map(str::to_string).collect::<Vec<_>>()
    };
    assert!(header("test.csv").contains(&"label".to_string()));
    assert!(!header("train.csv").contains(&"label".to_string()));
    let rows = std::fs::read_to_string(a.join("test.csv")).unwrap().lines().count();
    assert_eq!(rows, 301);
}

#[test]
fn seed_env_overrides_default() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["simulate", "--train-steps", "200", "--test-steps", "100", "--seed", "7", "--out", s(&a)]);
    let out = Command::new(BIN)
        .args(["simulate", "--train-steps", "200", "--test-steps", "100", "--out", s(&b)])
        .env("TFDPM_SEED", "7")
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(
        std::fs::read(a.join("train.csv")).unwrap(),
        std::fs::read(b.join("train.csv")).unwrap()
    );
    let bad = Command::new(BIN)
        .args(["simulate", "--out", s(&b)])
        .env("TFDPM_SEED", "seven")
        .output()
        .unwrap();
    assert_eq!(code(&bad), 2);
}

#[test]
fn full_pipeline_runs_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let p = pipeline(dir.path());
    let test = p.data.join("test.csv");
    let q = std::fs::read_to_string(&test).unwrap().lines().count() - 1 - 6;

    let full = dir.path().join("full.csv");
    let full2 = dir.path().join("full2.csv");
    for out in [&full, &full2] {
        ok(&["detect", "--ckpt", s(&p.ckpt), "--data", s(&test), "--mode", "full", "--out", s(out)]);
    }
    assert_eq!(std::fs::read(&full).unwrap(), std::fs::read(&full2).unwrap());
    let text = std::fs::read_to_string(&full).unwrap();
    assert_eq!(text.lines().next().unwrap(), "time_index,score,label,n_calls");
    assert_eq!(text.lines().count() - 1, q);
    assert!(text.lines().skip(1).all(|l| l.ends_with(",10")));

    let fast = dir.path().join("fast.csv");
    ok(&[
        "detect",
        "--ckpt",
        s(&p.ckpt),
        "--sched-ckpt",
        s(&p.sched),
        "--data",
        s(&test),
        "--mode",
        "fast",
        "--out",
        s(&fast),
    ]);
    let text = std::fs::read_to_string(&fast).unwrap();
    assert_eq!(text.lines().count() - 1, q);

    let report = dir.path().join("report.json");
    ok(&["evaluate", "--scores", s(&fast), "--out", s(&report)]);
    let r: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    for key in ["threshold", "precision", "recall", "f1"] {
        assert!(r[key].is_number(), "{key}");
    }
    assert_eq!(r["q"], q);
    assert_eq!(r["mode"], "fast");
    assert_eq!(r["checkpoint_hash"].as_str().unwrap().len(), 64);

    let plot = dir.path().join("plot.csv");
    ok(&["plot", "--scores", s(&full), "--out", s(&plot)]);
    let text = std::fs::read_to_string(&plot).unwrap();
    let header = text.lines().next().unwrap();
    assert!(header.starts_with("t,observed_"));
    assert!(header.ends_with(",score,label"));
    assert_eq!(text.lines().count() - 1, q);
}

#[test]
fn failure_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let p = pipeline(dir.path());
    let test = p.data.join("test.csv");
    let out = dir.path().join("x.csv");

    // Fast mode without a scheduler is a usage error, raised before loading.
    let r = tfdpm(&["detect", "--ckpt", "missing.ckpt", "--data", s(&test), "--mode", "fast", "--out", s(&out)]);
    assert_eq!(code(&r), 2);
    assert_eq!(code(&tfdpm(&["detect", "--mode", "sideways"])), 2);
    assert_eq!(code(&tfdpm(&["no-such-verb"])), 2);

    // Corrupted and mismatched checkpoints.
    let mut bytes = std::fs::read(&p.ckpt).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 0x40;
    let bad = dir.path().join("bad.ckpt");
    std::fs::write(&bad, &bytes).unwrap();
    let r = tfdpm(&["detect", "--ckpt", s(&bad), "--data", s(&test), "--out", s(&out)]);
    assert_eq!(code(&r), 4);
    assert!(!out.exists());
    let other = dir.path().join("other");
    std::fs::create_dir_all(&other).unwrap();
    let cfg = dir.path().join("run.ini");
    let other_ckpt = other.join("model.ckpt");
    ok(&[
        "train",
        "--data",
        s(&p.data.join("train.csv")),
        "--config",
        s(&cfg),
        "--seed",
        "5",
        "--out",
        s(&other_ckpt),
    ]);
    let r = tfdpm(&[
        "detect",
        "--ckpt",
        s(&other_ckpt),
        "--sched-ckpt",
        s(&p.sched),
        "--data",
        s(&test),
        "--mode",
        "fast",
        "--out",
        s(&out),
    ]);
    assert_eq!(code(&r), 4);

    // Data errors.
    let r = tfdpm(&["detect", "--ckpt", s(&p.ckpt), "--data", "missing.csv", "--out", s(&out)]);
    assert_eq!(code(&r), 3);
    let unlabelled = dir.path().join("u.csv");
    ok(&["detect", "--ckpt", s(&p.ckpt), "--data", s(&p.data.join("train.csv")), "--out", s(&unlabelled)]);
    let r = tfdpm(&["evaluate", "--scores", s(&unlabelled), "--out", s(&dir.path().join("r.json"))]);
    assert_eq!(code(&r), 3);
    let r = tfdpm(&["plot", "--scores", s(&unlabelled), "--out", s(&dir.path().join("p.csv"))]);
    assert_eq!(code(&r), 3);

    // Config invariant violations are usage errors.
    let bad_cfg = dir.path().join("bad.ini");
    std::fs::write(&bad_cfg, "tau = 500\n").unwrap();
    let r = tfdpm(&["train", "--data", s(&p.data.join("train.csv")), "--config", s(&bad_cfg), "--out", s(&out)]);
    assert_eq!(code(&r), 2);
}

#[test]
fn evaluate_hand_built_scores() {
    let dir = tempfile::tempdir().unwrap();
    let scores = dir.path().join("s.csv");
    std::fs::write(&scores, "time_index,score,label,n_calls\n0,1,0,1\n1,9,1,1\n2,9,1,1\n3,1,0,1\n").unwrap();
    let report = dir.path().join("r.json");
    ok(&["evaluate", "--scores", s(&scores), "--out", s(&report)]);
    let r: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(r["f1"], 1.0);
    assert_eq!(r["precision"], 1.0);
    assert_eq!(r["q"], 4);
    assert!(r["mode"].is_null());
}
