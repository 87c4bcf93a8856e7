//! The `eqimaging` binary end to end.

use std::path::Path;
use std::process::{Command, Output};

use eqimaging::io::read_tensor;
use eqimaging::Tensor;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_eqimaging")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

const SMALL: [&str; 10] = [
    "--set",
    "dataset.size=8",
    "--set",
    "dataset.count=6",
    "--set",
    "dataset.test_count=2",
    "--group",
    "c4",
    "--model",
    "kind=direct;net=cnn:layers=2:channels=2:zero-last",
];

fn with(extra: &[&str], out: &Path) -> Vec<String> {
    let mut v: Vec<String> = extra.iter().map(|s| s.to_string()).collect();
    v.extend(SMALL.iter().map(|s| s.to_string()));
    v.push("--output".into());
    v.push(out.display().to_string());
    v
}

fn strs(v: &[String]) -> Vec<&str> {
    v.iter().map(String::as_str).collect()
}

#[test]
fn help_lists_every_subcommand() {
    let help = ok(&["--help"]);
    for cmd in ["make-dataset", "train", "eval", "analyze-operator", "compare"] {
        assert!(help.contains(cmd), "{cmd}");
    }
}

#[test]
fn make_dataset_writes_images_and_a_tensor() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().display().to_string();
    ok(&["make-dataset", "--out", &out, "--count", "3", "--size", "8", "--format", "pgm", "--seed", "4"]);
    let t: Tensor = read_tensor(dir.path().join("dataset.eqt")).unwrap();
    assert_eq!(t.shape(), &[3, 1, 8, 8]);
    for i in 0..3 {
        assert!(dir.path().join(format!("images/img_{i:05}.pgm")).exists());
    }
}

#[test]
fn analyze_operator_prints_report_and_appends_csv() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("ranks.csv").display().to_string();
    let text = ok(&["analyze-operator", "--operator", "blur:kernel=0.5,0.5", "--group", "shifts", "--size", "4", "--csv", &csv]);
    assert!(text.contains("rank condition fails"));
    ok(&["analyze-operator", "--operator", "inpaint:p=0.5:seed=1", "--group", "shifts", "--size", "4", "--csv", &csv]);
    let rows = std::fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = rows.lines().collect();
    assert_eq!(lines[0], "operator,group,m,n,group_order,rank,verdict");
    assert_eq!(lines.len(), 3);
    assert!(lines[2].ends_with(",16,16,rank condition satisfied"), "{}", lines[2]);
}

#[test]
fn train_then_eval_reproduces_the_checkpoint_score() {
    let dir = tempfile::tempdir().unwrap();
    let run_dir = dir.path().join("run");
    let args = with(&["train", "--loss", "mc", "--epochs", "1"], &run_dir);
    let stdout = ok(&strs(&args));
    assert!(stdout.contains("test PSNR mc"));
    let trained: f64 = std::fs::read_to_string(run_dir.join("summary.csv"))
        .unwrap()
        .lines()
        .nth(2)
        .unwrap()
        .split(',')
        .nth(3)
        .unwrap()
        .parse()
        .unwrap();

    let config = run_dir.join("config.ini").display().to_string();
    let ckpt = run_dir.join("model.ckpt").display().to_string();
    let eval_dir = dir.path().join("eval").display().to_string();
    ok(&["eval", "--config", &config, "--checkpoint", &ckpt, "--output", &eval_dir]);
    let eval = std::fs::read_to_string(dir.path().join("eval/eval.csv")).unwrap();
    let row = eval.lines().find(|l| l.starts_with("checkpoint")).unwrap();
    let score: f64 = row.split(',').nth(3).unwrap().parse().unwrap();
    assert_eq!(score, trained);
    assert!(dir.path().join("eval/eval_images/test_000.png").exists());
}

#[test]
fn compare_prints_one_row_per_method_plus_baseline() {
    let dir = tempfile::tempdir().unwrap();
    let args = with(&["compare", "--methods", "supervised,mc", "--epochs", "1", "--jobs", "2"], dir.path());
    let csv = ok(&strs(&args));
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 4);
    assert!(lines[1].starts_with("pinv,") && lines[2].starts_with("supervised,") && lines[3].starts_with("mc,"));
}

#[test]
fn flags_override_set_which_overrides_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.ini");
    std::fs::write(&cfg, "[train]\nepochs = 5\nlr = 0.5\n\n[loss]\nkind = mc\n").unwrap();
    let out = dir.path().join("o");
    let c = cfg.display().to_string();
    let args = with(&["train", "--config", &c, "--set", "train.epochs=3", "--set", "train.lr=0.25", "--epochs", "0"], &out);
    ok(&strs(&args));
    let resolved = std::fs::read_to_string(out.join("config.ini")).unwrap();
    assert!(resolved.contains("epochs = 0") && resolved.contains("lr = 0.25") && resolved.contains("kind = mc"), "{resolved}");
}

#[test]
fn errors_exit_nonzero_with_the_grammar() {
    let dir = tempfile::tempdir().unwrap();
    let args = with(&["train", "--operator", "warp:2"], dir.path());
    let out = run(&strs(&args));
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.starts_with("error:") && err.contains("inpaint:p="), "{err}");
    let out = run(&["analyze-operator", "--operator", "identity", "--group", "q9"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("shifts2d"));
}
