use std::path::Path;
use std::process::{Command, Output};

fn quitlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_quitlab"))
        .args(args)
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn read(p: impl AsRef<Path>) -> String {
    std::fs::read_to_string(p).unwrap()
}

fn generate(path: &Path, seed: &str) -> Output {
    quitlab(&[
        "generate",
        "--seed",
        seed,
        "--places",
        "20",
        "-o",
        path.to_str().unwrap(),
    ])
}

#[test]
fn generate_default_city_has_800_records() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("city.jsonl");
    let o = quitlab(&["generate", "-o", path.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(read(&path).lines().count(), 800);
}

#[test]
fn generate_is_seed_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b, c) = (
        dir.path().join("a.jsonl"),
        dir.path().join("b.jsonl"),
        dir.path().join("c.jsonl"),
    );
    assert_eq!(code(&generate(&a, "7")), 0);
    assert_eq!(code(&generate(&b, "7")), 0);
    assert_eq!(code(&generate(&c, "8")), 0);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_ne!(read(&a), read(&c));
}

#[test]
fn unwritable_output_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("missing").join("city.jsonl");
    assert_eq!(code(&generate(&path, "1")), 2);
}

#[test]
fn unknown_loss_is_a_usage_error_listing_valid_names() {
    let o = quitlab(&["train", "--loss", "bogus", "--out", "unused"]);
    assert_eq!(code(&o), 1);
    let err = stderr(&o);
    for name in [
        "quit_trihard",
        "quit_quad",
        "triplet",
        "quad",
        "trihard",
        "msml",
    ] {
        assert!(err.contains(name), "{name} missing from: {err}");
    }
}

#[test]
fn bad_configs_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{ not json").unwrap();
    let v2 = dir.path().join("v2.json");
    std::fs::write(&v2, r#"{"version": 2}"#).unwrap();
    let missing = dir.path().join("nope.json");
    for cfg in [&bad, &v2, &missing] {
        let o = quitlab(&[
            "train",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            "unused",
        ]);
        assert_eq!(code(&o), 1, "{}", cfg.display());
    }
}

#[test]
fn train_without_output_directory_is_a_usage_error() {
    assert_eq!(
        code(&quitlab(&["train", "--places", "20", "--max-epochs", "1"])),
        1
    );
}

#[test]
fn invalid_thread_count_is_a_usage_error() {
    let o = Command::new(env!("CARGO_BIN_EXE_quitlab"))
        .args(["gradcheck", "--losses", "trihard", "--trials", "1"])
        .env("QUITLAB_THREADS", "abc")
        .output()
        .unwrap();
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("QUITLAB_THREADS"));
}

#[test]
fn help_exits_cleanly() {
    let o = quitlab(&["--help"]);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stdout).contains("sweep-k"));
}

#[test]
fn gradcheck_single_loss_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("gc");
    let o = quitlab(&[
        "gradcheck",
        "--losses",
        "quit_trihard",
        "--trials",
        "20",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(out.join("gradcheck.txt").exists());
}

#[test]
fn train_then_eval_agree_and_reruns_are_identical() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("city.jsonl");
    assert_eq!(code(&generate(&data, "3")), 0);
    let train = |name: &str| {
        let out = dir.path().join(name);
        let o = quitlab(&[
            "train",
            "--seed",
            "3",
            "--data",
            data.to_str().unwrap(),
            "--max-epochs",
            "5",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        out
    };
    let (a, b) = (train("a"), train("b"));
    for f in [
        "checkpoint.json",
        "train_log.csv",
        "report.json",
        "report.csv",
    ] {
        assert!(a.join(f).exists(), "{f} missing");
    }
    assert_eq!(
        read(a.join("checkpoint.json")),
        read(b.join("checkpoint.json"))
    );
    assert_eq!(read(a.join("report.json")), read(b.join("report.json")));

    let ev = dir.path().join("eval");
    let o = quitlab(&[
        "eval",
        "--checkpoint",
        a.join("checkpoint.json").to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        ev.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let parse = |p: &Path| serde_json::from_str::<serde_json::Value>(&read(p)).unwrap();
    let (trained, evaluated) = (
        parse(&a.join("report.json")),
        parse(&ev.join("report.json")),
    );
    assert_eq!(trained["recall_at"], evaluated["recall_at"]);
    assert_eq!(trained["per_query"], evaluated["per_query"]);
    assert_eq!(read(a.join("report.csv")), read(ev.join("report.csv")));
}

#[test]
fn sweep_k_writes_one_row_per_k() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sweep");
    let o = quitlab(&[
        "sweep-k",
        "--k-values",
        "1,3",
        "--places",
        "20",
        "--max-epochs",
        "2",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = read(out.join("sweep_k.csv"));
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "k,recall@1,recall@5,recall@10");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("1,") && lines[2].starts_with("3,"));
}
