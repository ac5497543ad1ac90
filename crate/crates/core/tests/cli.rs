use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn gstuda(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gstuda"))
        .args(args)
        .env("RUST_LOG", "warn")
        .env("GSTUDA_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn tiny_cfg() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/tiny.cfg")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn run_plot_eval_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let cfg = tiny_cfg();
    let o = gstuda(&["run", "--config", s(&cfg), "--out", s(&out), "--seeds", "0", "--methods", "no_uda,ac_gst"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["report.csv", "report.md", "significance.csv", "sensitivity.csv", "failures.csv", "config.txt"] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    assert!(out.join("seed_0/ac_gst/final.ckpt").is_file());
    assert!(out.join("seed_0/ac_gst/maps/mask.png").is_file());
    let report = std::fs::read(out.join("report.csv")).unwrap();

    let o = gstuda(&["plot", "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("plots/summary.txt").is_file());

    let o = gstuda(&["eval", "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(std::fs::read(out.join("report.csv")).unwrap(), report);
}

#[test]
fn existing_output_needs_force() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("gen");
    let cfg = tiny_cfg();
    assert!(gstuda(&["gen", "--config", s(&cfg), "--out", s(&out)]).status.success());
    assert!(out.join("source").is_dir() && out.join("target").is_dir());
    assert_eq!(gstuda(&["gen", "--config", s(&cfg), "--out", s(&out)]).status.code(), Some(2));
    assert!(gstuda(&["gen", "--config", s(&cfg), "--out", s(&out), "--force"]).status.success());
}

#[test]
fn force_never_clears_foreign_directories() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("keep.txt"), "precious").unwrap();
    let o = gstuda(&["gen", "--config", s(&tiny_cfg()), "--out", s(tmp.path()), "--force"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(tmp.path().join("keep.txt").is_file());
}

#[test]
fn config_errors_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.cfg");
    std::fs::write(&bad, "seeds = 0\ntrain.no_such_key = 3\n").unwrap();
    let o = gstuda(&["gen", "--config", s(&bad), "--out", s(&tmp.path().join("x"))]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("line 2"), "{err}");

    let o = gstuda(&["run", "--config", s(&tiny_cfg()), "--out", s(&tmp.path().join("y")), "--methods", "magic"]);
    assert_eq!(o.status.code(), Some(2));

    let o = Command::new(env!("CARGO_BIN_EXE_gstuda"))
        .args(["gen", "--out", s(&tmp.path().join("z"))])
        .env("GSTUDA_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn plot_on_empty_directory_fails_at_runtime() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(gstuda(&["plot", "--out", s(tmp.path())]).status.code(), Some(3));
}
