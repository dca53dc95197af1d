use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use mopflow::config::PipelineConfig;
use mopflow::dataset::{frames_dir, load_image, read_flo, read_label_mask};
use mopflow::pipeline::{run_eval, run_flow, run_predict, run_segment, run_train};
use mopflow::synthetic::MovingSquare;

fn fixture_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/moving-square")
}

fn fixture_config(out: &Path) -> PipelineConfig {
    let mut cfg = PipelineConfig::load(&fixture_root().join("pipeline.cfg")).unwrap();
    cfg.root = Some(fixture_root());
    cfg.output = out.to_path_buf();
    cfg
}

/// Relative path -> bytes for every file under `dir`.
fn snapshot(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
#[ignore = "rewrites the bundled fixture"]
fn regenerate_fixture() {
    MovingSquare::default().write_dataset(&fixture_root()).unwrap();
}

#[test]
fn bundled_fixture_matches_generator() {
    let gen = MovingSquare::default();
    let frames = frames_dir(&fixture_root()).join(MovingSquare::NAME);
    for t in 0..gen.frames {
        let stem = format!("{t:05}.png");
        assert_eq!(load_image(&frames.join(&stem)).unwrap(), gen.frame(t));
        let ann = fixture_root().join("Annotations/480p").join(MovingSquare::NAME).join(&stem);
        assert_eq!(read_label_mask(&ann).unwrap(), gen.mask(t));
    }
}

#[test]
fn flow_segment_eval_on_moving_square() {
    let out = tempfile::tempdir().unwrap();
    let cfg = fixture_config(out.path());
    let flows = run_flow(&cfg).unwrap();
    assert_eq!(flows.len(), 2);
    let gen = MovingSquare::default();
    let flow = read_flo(&flows[0]).unwrap();
    let inside = gen.mask(0);
    let (mut su, mut sv, mut n) = (0.0, 0.0, 0.0);
    for y in 0..flow.height {
        for x in 0..flow.width {
            if inside.get(x, y) {
                su += flow.at(x, y).0;
                sv += flow.at(x, y).1;
                n += 1.0;
            }
        }
    }
    assert!((su / n - 2.0).abs() < 0.5 && (sv / n - 1.0).abs() < 0.5, "mean motion ({}, {})", su / n, sv / n);

    assert_eq!(run_segment(&cfg, None).unwrap().len(), 2);
    let report = run_eval(&cfg, &out.path().join("masks"), None).unwrap();
    assert!(report.mean_iou >= 0.7, "mean IoU {}", report.mean_iou);
    assert!(out.path().join("report.csv").is_file());
}

#[test]
fn eval_against_itself_is_perfect() {
    let out = tempfile::tempdir().unwrap();
    let cfg = fixture_config(out.path());
    let ann = fixture_root().join("Annotations/480p");
    let report = run_eval(&cfg, &ann, Some(&ann)).unwrap();
    assert_eq!(report.mean_iou, 1.0);
}

#[test]
fn train_and_predict_write_outputs() {
    let out = tempfile::tempdir().unwrap();
    let mut cfg = fixture_config(out.path());
    cfg.train.iterations = 20;
    run_flow(&cfg).unwrap();
    let ckpt = run_train(&cfg, None).unwrap();
    assert!(ckpt.is_file());
    let loss = fs::read_to_string(out.path().join("loss.csv")).unwrap();
    assert_eq!(loss.lines().count(), 21);
    let masks = run_predict(&cfg, &ckpt, None).unwrap();
    assert_eq!(masks.len(), 2);
    assert_eq!(read_label_mask(&masks[0]).unwrap().height, 64);
}

#[test]
fn missing_inputs_name_the_stage() {
    let out = tempfile::tempdir().unwrap();
    let mut cfg = fixture_config(out.path());
    cfg.root = Some(out.path().join("nowhere"));
    let msg = run_flow(&cfg).unwrap_err().to_string();
    assert!(msg.starts_with("flow: inputs"), "{msg}");
    let msg = run_segment(&cfg, None).unwrap_err().to_string();
    assert!(msg.starts_with("segment:"), "{msg}");
}

fn cli(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_mopflow")).args(args).env("MOPFLOW_THREADS", "1").output().unwrap()
}

#[test]
fn cli_runs_are_bitwise_reproducible() {
    let root = fixture_root();
    let cfg = root.join("pipeline.cfg");
    let mut snaps = Vec::new();
    for _ in 0..2 {
        let out = tempfile::tempdir().unwrap();
        let common = [
            "--config",
            cfg.to_str().unwrap(),
            "--root",
            root.to_str().unwrap(),
            "--out",
            out.path().to_str().unwrap(),
            "--seed",
            "7",
        ];
        for sub in [&["flow"][..], &["segment"], &["eval", "--pred", out.path().join("masks").to_str().unwrap()]] {
            let o = cli(&[&common[..], sub].concat());
            assert!(o.status.success(), "{sub:?}: {}", String::from_utf8_lossy(&o.stderr));
        }
        let flo = fs::read_dir(out.path().join("flow").join(MovingSquare::NAME)).unwrap().count();
        assert_eq!(flo, 4);
        snaps.push(snapshot(out.path()));
    }
    assert_eq!(snaps[0], snaps[1]);
}

#[test]
fn cli_rejects_bad_input() {
    let o = cli(&["frobnicate"]);
    assert!(!o.status.success());
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "solver.levles = 3\n").unwrap();
    let o = cli(&["--config", cfg.to_str().unwrap(), "flow"]);
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("config") && err.contains("solver.levles"), "{err}");
    let o = cli(&["flow"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("dataset.root"));
}

#[test]
fn cli_config_dump_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let o = cli(&["--seed", "9", "--sequences", "a,b", "config"]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    let path = dir.path().join("dump.cfg");
    fs::write(&path, &text).unwrap();
    let cfg = PipelineConfig::load(&path).unwrap();
    assert_eq!(cfg.seed, 9);
    assert_eq!(cfg.dump(), text);
}

#[test]
fn cli_selftest_passes() {
    let o = cli(&["selftest"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("EPE") && text.contains("grad max rel"), "{text}");
}
