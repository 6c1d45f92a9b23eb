use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use vip_cli::files::{read_selection, read_summary};

const TINY: &[&str] = &[
    "--q", "8", "--d", "2", "--d-tod", "2", "--d-dow", "2", "--d-v", "2", "--heads", "2", "--ffn-hidden", "4",
    "--output-hidden", "8", "--input-len", "4", "--output-len", "3", "--batch-size", "16",
];

fn vip(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vip")).args(args).output().expect("spawn vip")
}

fn ok(args: &[&str]) -> String {
    let out = vip(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn with_tiny(mut args: Vec<&str>) -> Vec<&str> {
    args.extend_from_slice(TINY);
    args
}

/// Synthetic data, a short pretraining run and one pruning run, shared by
/// the tests below.
struct Workspace {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Workspace {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let data = root.join("data");
        ok(&["synth", "--out-dir", s(&data), "--n", "10", "--T-total", "500", "--k-d", "3", "--seed", "2"]);
        Workspace { _dir: dir, root }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn pretrain(&self) -> PathBuf {
        let out = self.path("pre");
        let data = self.path("data");
        ok(&with_tiny(vec!["pretrain", "--data-dir", s(&data), "--out-dir", s(&out), "--pretrain-epochs", "2"]));
        out.join("pretrain.ckpt")
    }
}

#[test]
fn synth_writes_the_dataset_files() {
    let ws = Workspace::new();
    let data = ws.path("data");
    let values = fs::read_to_string(data.join("values.csv")).unwrap();
    assert!(values.starts_with("10,500,300,0\n"), "{}", &values[..40]);
    assert_eq!(values.lines().count(), 11);
    let drivers = read_selection(&data.join("drivers.csv"), 10).unwrap();
    assert_eq!(drivers.len(), 3);
    assert!(fs::read_to_string(data.join("adjacency.csv")).unwrap().lines().count() > 0);
}

#[test]
fn pipeline_outputs_and_reproducible_evaluation() {
    let ws = Workspace::new();
    let data = ws.path("data");
    let ckpt = ws.pretrain();
    let pre = ckpt.parent().unwrap();
    for f in ["config.txt", "pretrain_epochs.csv", "metrics_val.csv"] {
        assert!(pre.join(f).is_file(), "{f}");
    }

    let run = ws.path("run");
    ok(&with_tiny(vec![
        "train-vip", "--data-dir", s(&data), "--out-dir", s(&run), "--checkpoint", s(&ckpt), "--target-m", "2",
        "--r-b", "0.5", "--r-p", "0.5", "--final-epochs", "1",
    ]));
    for f in ["config.txt", "final.ckpt", "record.jsonl", "selection.csv", "metrics_val.csv", "metrics_test.csv", "summary.json"] {
        assert!(run.join(f).is_file(), "{f}");
    }
    assert!(fs::read_dir(run.join("checkpoints")).unwrap().count() >= 2);
    let summary = read_summary(&run.join("summary.json")).unwrap();
    assert_eq!((summary.method.as_str(), summary.n, summary.m, summary.q_kept), ("vip", 10, 2, 4));
    assert_eq!(read_selection(&run.join("selection.csv"), 10).unwrap(), summary.selected);
    assert!(summary.jaccard_distance.is_some());

    // evaluating the saved model on the validation split gives the same file
    let ev = ws.path("ev");
    let final_ckpt = run.join("final.ckpt");
    ok(&["evaluate", "--data-dir", s(&data), "--out-dir", s(&ev), "--checkpoint", s(&final_ckpt), "--split", "val"]);
    assert_eq!(
        fs::read_to_string(ev.join("metrics_val.csv")).unwrap(),
        fs::read_to_string(run.join("metrics_val.csv")).unwrap()
    );

    // base model restricted to a heuristic selection
    let sel = ws.path("sel");
    ok(&["select", "--data-dir", s(&data), "--out-dir", s(&sel), "--method", "max-connectivity", "--target-m", "2"]);
    let picked = sel.join("selection.csv");
    assert_eq!(read_selection(&picked, 10).unwrap().len(), 2);
    let base = ws.path("base");
    ok(&["evaluate", "--data-dir", s(&data), "--out-dir", s(&base), "--checkpoint", s(&ckpt), "--selection", s(&picked)]);
    let b = read_summary(&base.join("summary.json")).unwrap();
    assert_eq!((b.method.as_str(), b.m, b.split.as_str()), ("stmf-selected", 2, "test"));

    let rep = ws.path("rep");
    let missing = ws.path("nowhere");
    let out = vip(&["report", "--out-dir", s(&rep), s(&run), s(&base), s(&missing)]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("skipping"));
    let table = fs::read_to_string(rep.join("report.csv")).unwrap();
    assert_eq!(table.lines().count(), 3);
    assert!(table.lines().nth(1).unwrap().starts_with("stmf-selected,"));
    assert!(rep.join("sparsity_rmse.csv").is_file());
}

#[test]
fn selection_methods_write_budgets() {
    let ws = Workspace::new();
    let data = ws.path("data");
    for method in ["max-value", "max-connectivity", "random"] {
        let out = ws.path(method);
        ok(&["select", "--data-dir", s(&data), "--out-dir", s(&out), "--method", method, "--target-m", "3"]);
        assert_eq!(read_selection(&out.join("selection.csv"), 10).unwrap().len(), 3, "{method}");
    }
}

#[test]
fn bad_input_exits_with_two_and_non_finite_with_three() {
    let ws = Workspace::new();
    let data = ws.path("data");
    let out = ws.path("x");
    let code = |args: &[&str]| vip(args).status.code();
    assert_eq!(code(&["pretrain", "--data-dir", s(&data), "--bogus-key", "1"]), Some(2));
    assert_eq!(code(&["pretrain", "--data-dir", s(&ws.path("missing"))]), Some(2));
    assert_eq!(code(&["select", "--data-dir", s(&data), "--out-dir", s(&out), "--method", "grid"]), Some(2));
    assert_eq!(code(&["synth", "--out-dir", s(&out), "--n", "1"]), Some(2));
    assert_eq!(code(&["evaluate", "--data-dir", s(&data)]), Some(2));
    assert_eq!(code(&["train-vip", "--data-dir", s(&data), "stray"]), Some(2));
    let blown = with_tiny(vec!["pretrain", "--data-dir", s(&data), "--out-dir", s(&out), "--lr", "1e300", "--pretrain-epochs", "2"]);
    let res = vip(&blown);
    assert_eq!(res.status.code(), Some(3), "{}", String::from_utf8_lossy(&res.stderr));
}
