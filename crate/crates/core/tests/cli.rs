use std::path::Path;
use std::process::{Command, Output};

fn labelprop(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_labelprop")).args(args).current_dir(dir).output().unwrap()
}

fn ok(dir: &Path, args: &[&str]) {
    let out = labelprop(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn gen(dir: &Path, out: &str) {
    ok(dir, &["gen", "--seed", "4", "--count", "1", "--out", out]);
}

#[test]
fn gen_is_deterministic() {
    let d = tempfile::tempdir().unwrap();
    gen(d.path(), "a");
    gen(d.path(), "b");
    for f in ["manifest.json", "run.json", "seq_000/frame_010.png", "seq_000/label_010.png", "seq_000/flow_010.flo"] {
        let a = std::fs::read(d.path().join("a").join(f)).unwrap();
        let b = std::fs::read(d.path().join("b").join(f)).unwrap();
        assert!(a == b, "{f} differs");
    }
}

#[test]
fn warp_refine_without_refiner_names_the_flag() {
    let d = tempfile::tempdir().unwrap();
    gen(d.path(), "data");
    let out = labelprop(
        d.path(),
        &["propagate", "--manifest", "data/manifest.json", "--method", "warp-refine", "--out-dir", "p"],
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--refiner"));
}

#[test]
fn exit_codes() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(labelprop(d.path(), &["gen", "--out", "x", "--frobnicate"]).status.code(), Some(1));
    assert_eq!(labelprop(d.path(), &["--help"]).status.code(), Some(0));
    assert_eq!(labelprop(d.path(), &["gen", "--out", "x", "--set", "nonsense=1"]).status.code(), Some(1));
    assert_eq!(
        labelprop(d.path(), &["eval", "--manifest", "missing.json", "--out-dir", "e"]).status.code(),
        Some(2)
    );
}

#[test]
fn overrides_are_echoed_in_run_json() {
    let d = tempfile::tempdir().unwrap();
    ok(d.path(), &["gen", "--out", "data", "--set", "seed=9", "--set", "noise=perfect"]);
    let run: serde_json::Value =
        serde_json::from_slice(&std::fs::read(d.path().join("data/run.json")).unwrap()).unwrap();
    assert_eq!(run["config"]["seed"], 9);
    assert_eq!(run["config"]["noise"], "perfect");
    assert_eq!(run["sources"]["seed"], "override");
    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(d.path().join("data/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["generator_seed"], 9);
}

#[test]
fn end_to_end_smoke() {
    let d = tempfile::tempdir().unwrap();
    let dir = d.path();
    gen(dir, "data");
    ok(dir, &["train-refiner", "--manifest", "data/manifest.json", "--steps", "100", "--out", "model/params.lprf"]);
    let trace = std::fs::read_to_string(dir.join("model/loss_trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 101);
    for m in ["motion-only", "semantic-only", "warp-inpaint"] {
        ok(dir, &["propagate", "--manifest", "data/manifest.json", "--method", m, "--horizon", "2", "--out-dir", "p"]);
    }
    ok(
        dir,
        &[
            "propagate", "--manifest", "data/manifest.json", "--method", "warp-refine", "--refiner",
            "model/params.lprf", "--horizon", "2", "--out-dir", "p",
        ],
    );
    for m in ["motion-only", "semantic-only", "warp-inpaint", "warp-refine"] {
        for f in [8, 9, 11, 12] {
            assert!(dir.join(format!("p/seq_000/{f:03}_{m}.png")).exists(), "{m} frame {f}");
        }
    }
    ok(
        dir,
        &["eval", "--manifest", "data/manifest.json", "--refiner", "model/params.lprf", "--horizon", "3", "--out-dir", "e"],
    );
    ok(dir, &["report", "--input", "e/report.json", "--exclude-ignore", "--out-dir", "r"]);
    for out in ["e", "r"] {
        let summary = std::fs::read_to_string(dir.join(out).join("summary.csv")).unwrap();
        let rows: Vec<Vec<&str>> = summary.lines().skip(1).map(|l| l.split(',').collect()).collect();
        assert_eq!(rows.len(), 4 * 4);
        for r in &rows {
            let miou: f64 = r[4].parse().unwrap();
            assert!((0.0..=1.0).contains(&miou), "{r:?}");
        }
        assert!(dir.join(out).join("curve.svg").exists());
    }
    ok(dir, &["tau-sweep", "--manifest", "data/manifest.json", "--taus", "0,0.1", "--horizon", "2", "--out-dir", "t"]);
    assert_eq!(std::fs::read_to_string(dir.join("t/tau_sweep.csv")).unwrap().lines().count(), 3);
    ok(dir, &["gradcheck", "--out-dir", "g"]);
    assert!(dir.join("g/gradcheck.json").exists());
}
