use std::fs;
use std::io::BufReader;
use std::path::Path;
use std::process::{Command, Output};

use robust_nsr::field::read_ply;
use robust_nsr::geometry::read_trajectory;
use robust_nsr::io::read_checkpoint;
use robust_nsr::scene_graph::SceneGraph;

const TINY: &str = r#"
seed = 4
[dataset]
cameras = 10
width = 24
height = 24
[train]
iterations = 300
grid_resolution = 16
rays_per_batch = 32
samples_per_ray = 24
matches_per_step = 16
probe_pixels = 32
confidence_period = 100
graph_samples = 32
[reloc]
particles = 4
stage1_steps = 5
stage2_steps = 10
probe_pixels = 32
[eval]
surface_points = 2000
reference_resolution = 48
"#;

fn rnsr(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rnsr"))
        .current_dir(dir)
        .arg("--quiet")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = rnsr(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn setup(extra: &str) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("cfg.toml"), format!("{TINY}{extra}")).unwrap();
    ok(dir.path(), &["--config", "cfg.toml", "--out", "data", "synth"]);
    dir
}

#[test]
fn synth_writes_a_deterministic_dataset() {
    let dir = setup("");
    let d = dir.path();
    ok(d, &["--config", "cfg.toml", "--out", "again", "synth"]);
    let m1 = fs::read(d.join("data/manifest.toml")).unwrap();
    let m2 = fs::read(d.join("again/manifest.toml")).unwrap();
    assert_eq!(m1, m2);
    assert_eq!(fs::read(d.join("data/.gt_labels")).unwrap(), fs::read(d.join("again/.gt_labels")).unwrap());
    let text = String::from_utf8(m1).unwrap();
    assert!(text.contains("cameras = 10"));
    assert!(text.contains("seed = 4"));
    assert!(text.contains("labels = \".gt_labels\""));
    assert!(d.join("data/images/0009.pfm").exists());
}

#[test]
fn malformed_config_reports_the_line() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.toml"), "seed = 1\n[dataset]\ncameras = -3\n").unwrap();
    let out = rnsr(dir.path(), &["--config", "bad.toml", "--out", "x", "synth"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("bad.toml:3"), "{err}");
    assert!(!dir.path().join("x").exists());

    let out = rnsr(dir.path(), &["--config", "nope.toml", "--out", "x", "synth"]);
    assert!(!out.status.success());
}

#[test]
fn train_eval_export_round_trip() {
    let dir = setup("");
    let d = dir.path();
    ok(d, &["--config", "cfg.toml", "--out", "run", "train", "data"]);
    for f in ["report.json", "events.jsonl", "trajectory.txt", "classes.txt", "checkpoint/state.json"] {
        assert!(d.join("run").join(f).exists(), "{f} missing");
    }
    let state = read_checkpoint(&d.join("run/checkpoint")).unwrap();
    assert_eq!(state.iteration, 300);

    let out = ok(d, &["--config", "cfg.toml", "eval", "run", "data"]);
    let metrics: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    for key in ["ape_rot_deg", "rpe_rot_deg", "chamfer", "fscore", "outlier_precision", "outliers_recovered"] {
        assert!(metrics.get(key).is_some(), "{key} missing");
    }
    assert!(d.join("run/metrics.json").exists());

    ok(d, &["export", "run", "trajectory", "--out", "traj.txt"]);
    let poses = read_trajectory(BufReader::new(fs::File::open(d.join("traj.txt")).unwrap()), "traj.txt").unwrap();
    assert_eq!(poses.len(), state.poses.len());
    for (a, b) in poses.iter().zip(&state.poses) {
        assert!((a.translation - b.translation).norm() < 1e-9);
        assert!((a.rotation.matrix() - b.rotation.matrix()).norm() < 1e-9);
    }

    ok(d, &["export", "run", "mesh", "--out", "mesh.ply"]);
    let mesh = read_ply(BufReader::new(fs::File::open(d.join("mesh.ply")).unwrap()), "mesh.ply").unwrap();
    assert!(!mesh.faces.is_empty());

    ok(d, &["export", "run", "graph", "--out", "graph.txt"]);
    let g = SceneGraph::read(BufReader::new(fs::File::open(d.join("graph.txt")).unwrap()), "graph.txt").unwrap();
    assert_eq!(g.len(), 10);

    let out = rnsr(d, &["export", "run", "volume"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn eval_without_checkpoint_fails() {
    let dir = setup("");
    let out = rnsr(dir.path(), &["eval", "norun", "data"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("checkpoint"));
}

#[test]
fn resume_continues_where_it_stopped() {
    let dir = setup("");
    let d = dir.path();
    ok(d, &["--config", "cfg.toml", "--out", "full", "train", "data"]);
    ok(d, &["--config", "cfg.toml", "--out", "split", "train", "data", "--until", "150"]);
    assert_eq!(read_checkpoint(&d.join("split/checkpoint")).unwrap().iteration, 150);
    ok(d, &["--config", "cfg.toml", "--out", "split", "train", "data", "--resume"]);
    let a = read_checkpoint(&d.join("full/checkpoint")).unwrap();
    let b = read_checkpoint(&d.join("split/checkpoint")).unwrap();
    assert_eq!(b.iteration, 300);
    assert_eq!(a.poses, b.poses);
    assert_eq!(a.field, b.field);
    assert_eq!(a.events, b.events);
}

#[test]
fn training_is_deterministic() {
    let dir = setup("");
    let d = dir.path();
    ok(d, &["--config", "cfg.toml", "--out", "a", "train", "data"]);
    ok(d, &["--config", "cfg.toml", "--out", "b", "--threads", "2", "train", "data"]);
    for f in ["events.jsonl", "trajectory.txt", "checkpoint/state.json", "checkpoint/field.bin"] {
        assert_eq!(fs::read(d.join("a").join(f)).unwrap(), fs::read(d.join("b").join(f)).unwrap(), "{f}");
    }
}

#[test]
fn noiseless_run_keeps_ground_truth_poses() {
    let extra = "inlier_rot_sigma_deg = 0.0\ninlier_trans_sigma = 0.0\noutlier_fraction = 0.0\n";
    let cfg = TINY.replace("height = 24\n", &format!("height = 24\n{extra}")).replace("[train]\n", "[train]\nlr_pose = 1e-12\n");
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("cfg.toml"), cfg).unwrap();
    ok(d, &["--config", "cfg.toml", "--out", "data", "synth"]);
    ok(d, &["--config", "cfg.toml", "--out", "run", "train", "data"]);
    let out = ok(d, &["--config", "cfg.toml", "eval", "run", "data"]);
    let metrics: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let ape = metrics["ape_rot_deg"].as_f64().unwrap();
    assert!(ape < 1e-6, "ape {ape}");
}
