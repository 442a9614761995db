use std::path::Path;
use std::process::{Command, Output};

fn timesaf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_timesaf")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = timesaf(args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

const QUICK: [&str; 8] = [
    "--dataset",
    "sine",
    "--preset",
    "micro",
    "--horizons",
    "4",
    "--max-steps",
    "20",
];

#[test]
fn bad_input_exits_nonzero() {
    let out = timesaf(&["train", "--dataset", "missing"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
    let out = timesaf(&["train", "--set", "model.depth"]);
    assert!(!out.status.success());
}

#[test]
fn theory_writes_tables() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let table = ok(&[
        "theory",
        "--trials",
        "20000",
        "--correlations",
        "iid,rho=0.5",
        "--gates",
        "-4,0,4",
        "--out",
        out,
    ]);
    assert!(table.contains("iid") && table.contains("rho=0.5"), "{table}");
    let theory = std::fs::read_to_string(dir.path().join("theory.csv")).unwrap();
    assert_eq!(theory.lines().count(), 3);
    let gates = std::fs::read_to_string(dir.path().join("gates.csv")).unwrap();
    assert_eq!(gates.lines().count(), 4);
}

#[test]
fn render_prompts_to_stdout() {
    let text = ok(&[
        &["render-prompts"][..],
        &QUICK,
        &["--split", "test", "--window", "0", "--prompt", "timestamp"],
    ]
    .concat());
    let text = text.trim_end();
    assert!(!text.is_empty());
    assert_eq!(text.lines().count(), 2, "{text}");
    assert!(text.lines().all(|l| l.ends_with("every 1 step.")), "{text}");
}

#[test]
fn dump_attention_after_training() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    ok(&[&["train"][..], &QUICK, &["--out", run.to_str().unwrap()]].concat());
    let ckpt = run.join("checkpoints/sine_full_h4.tsaf");
    assert!(ckpt.exists());
    let attn = dir.path().join("attn");
    ok(&[
        &["dump-attn"][..],
        &QUICK,
        &["--checkpoint", ckpt.to_str().unwrap(), "--out", attn.to_str().unwrap()],
    ]
    .concat());
    let names: Vec<String> = std::fs::read_dir(&attn)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    for expected in ["features_time.csv", "features_text.csv", "features_memory1.csv"] {
        assert!(names.iter().any(|n| n == expected), "{expected} missing from {names:?}");
    }
    assert!(names.len() > 3, "{names:?}");
    assert!(Path::new(&run.join("spec.toml")).exists());
}
