use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vesselseg"))
        .args(args)
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn exit_codes() {
    assert_eq!(run(&["--help"]).status.code(), Some(0));
    assert_eq!(run(&[]).status.code(), Some(1));
    assert_eq!(run(&["train", "--no-such-flag"]).status.code(), Some(1));
    assert_eq!(run(&["predict", "--mode", "sideways"]).status.code(), Some(1));

    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.tsv");
    let out = dir.path().join("out");
    assert_eq!(
        run(&["evaluate", "--manifest", s(&missing), "--predictions", s(&out)])
            .status
            .code(),
        Some(2)
    );
    let bad = dir.path().join("bad.bin");
    fs::write(&bad, b"not a model").unwrap();
    let img = dir.path().join("x.pgm");
    assert_eq!(
        run(&["predict", "--model", s(&bad), "--image", s(&img), "--out", s(&out)])
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn small_run_is_deterministic_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&[
        "synth",
        "--count",
        "3",
        "--width",
        "72",
        "--height",
        "64",
        "--seed",
        "5",
        "--out",
        s(&data),
    ]);
    let manifest = data.join("manifest.tsv");

    let train = |name: &str| {
        let out = dir.path().join(name);
        ok(&[
            "train",
            "--manifest",
            s(&manifest),
            "--out",
            s(&out),
            "--epochs",
            "2",
            "--patches-per-image",
            "2",
            "--seed",
            "9",
            "--arch",
            s(&arch(dir.path())),
        ]);
        out
    };
    let a = train("a");
    let b = train("b");
    assert_eq!(
        fs::read(a.join("model.bin")).unwrap(),
        fs::read(b.join("model.bin")).unwrap()
    );
    assert_eq!(
        fs::read(a.join("train_log.csv")).unwrap(),
        fs::read(b.join("train_log.csv")).unwrap()
    );
    let log = fs::read_to_string(a.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 3);

    let pred = dir.path().join("pred");
    ok(&[
        "predict",
        "--model",
        s(&a.join("model.bin")),
        "--manifest",
        s(&manifest),
        "--out",
        s(&pred),
    ]);
    for i in 0..3 {
        assert!(pred.join(format!("syn_{i:02}_prob.pgm")).is_file());
        assert!(pred.join(format!("syn_{i:02}_seg.pgm")).is_file());
    }
    let report = ok(&["evaluate", "--manifest", s(&manifest), "--predictions", s(&pred)]);
    let lines: Vec<&str> = report.lines().collect();
    assert!(lines[0].starts_with("image,"));
    assert_eq!(lines.iter().filter(|l| l.starts_with("syn_")).count(), 3);
}

fn arch(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("arch.txt");
    fs::write(&path, "base_width = 2\n").unwrap();
    path
}
