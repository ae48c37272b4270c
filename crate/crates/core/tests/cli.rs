use std::path::Path;
use std::process::Command;

use crowdcast::cli::main_with_args;
use crowdcast::density::read_sequence;
use tempfile::TempDir;

/// Runs the CLI in-process; returns (exit code, stdout, stderr).
fn run(args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let argv = std::iter::once("crowdcast").chain(args.iter().copied());
    let code = main_with_args(argv, &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn p(dir: &TempDir, name: &str) -> String {
    dir.path().join(name).to_string_lossy().into_owned()
}

fn ok(args: &[&str]) -> String {
    let (code, out, err) = run(args);
    assert_eq!(code, 0, "{args:?}: {err}");
    out
}

/// 24 frames of the reference preset, rasterized and smoothed.
fn small_data(dir: &TempDir) -> (String, String) {
    let ann = p(dir, "ann.csv");
    let data = p(dir, "data.cdmf");
    ok(&["simulate", "--scenario", "two-groups", "--frames", "24", "--seed", "7", "--out", &ann]);
    ok(&["rasterize", "--ann", &ann, "--sigma", "3", "--out", &data]);
    (ann, data)
}

#[test]
fn simulate_is_deterministic_and_validates() {
    let dir = TempDir::new().unwrap();
    let (a, b) = (p(&dir, "a.csv"), p(&dir, "b.csv"));
    ok(&["simulate", "--scenario", "two-groups", "--seed", "7", "--out", &a]);
    ok(&["simulate", "--scenario", "two-groups", "--seed", "7", "--out", &b]);
    let text = std::fs::read_to_string(&a).unwrap();
    assert!(text.starts_with("frame,id,x,y\n"));
    assert_eq!(text, std::fs::read_to_string(&b).unwrap());
    assert_eq!(run(&["simulate", "--scenario", "two-groups"]).0, 2);
    assert_eq!(run(&["simulate", "--scenario", "two-groups", "--frames", "0", "--out", &a]).0, 2);
    assert_eq!(run(&["simulate", "--scenario", "no-such-preset", "--out", &a]).0, 2);
}

#[test]
fn simulate_accepts_scenario_files() {
    let dir = TempDir::new().unwrap();
    let sc = p(&dir, "sc.json");
    let scenario = crowdcast::sim::Scenario::preset("static").unwrap();
    std::fs::write(&sc, serde_json::to_string(&scenario).unwrap()).unwrap();
    ok(&["simulate", "--scenario", &sc, "--frames", "5", "--out", &p(&dir, "s.csv")]);
    std::fs::write(&sc, "{ not json").unwrap();
    assert_eq!(run(&["simulate", "--scenario", &sc, "--out", &p(&dir, "s.csv")]).0, 2);
}

#[test]
fn rasterize_cases() {
    let dir = TempDir::new().unwrap();
    let (ann, data) = small_data(&dir);
    let seq = read_sequence(&data).unwrap();
    assert_eq!((seq.width(), seq.height(), seq.len()), (80, 80, 24));
    let raw = p(&dir, "raw.cdmf");
    ok(&["rasterize", "--ann", &ann, "--out", &raw]);
    let raw = read_sequence(&raw).unwrap();
    assert!(raw.frames()[0].values().iter().any(|&v| v == 1.0));

    let empty = p(&dir, "empty.csv");
    std::fs::write(&empty, "frame,id,x,y\n").unwrap();
    let out = p(&dir, "empty.cdmf");
    ok(&["rasterize", "--ann", &empty, "--out", &out]);
    let z = read_sequence(&out).unwrap();
    assert!(z.frames().iter().all(|f| f.sum() == 0.0));

    let bad = p(&dir, "bad.csv");
    std::fs::write(&bad, "frame,id,x,y\n0,0,80.5,3\n").unwrap();
    let (code, _, err) = run(&["rasterize", "--ann", &bad, "--out", &out]);
    assert_eq!(code, 2);
    assert!(err.contains("frame 0"), "{err}");
}

#[test]
fn training_commands() {
    let dir = TempDir::new().unwrap();
    let (_, data) = small_data(&dir);
    let (ae1, ae2, fc) = (p(&dir, "ae1.ckpt"), p(&dir, "ae2.ckpt"), p(&dir, "fc.ckpt"));
    let base = ["--data", &data, "--iters", "2", "--batch", "2", "--seed", "3"];
    let out = ok(&[&["train-ae"], &base[..], &["--out", &ae1]].concat());
    assert!(out.lines().next().unwrap().starts_with("iter=0 loss="));
    assert_eq!(out.lines().count(), 2);
    ok(&[&["train-ae"], &base[..], &["--out", &ae2]].concat());
    assert_eq!(std::fs::read(&ae1).unwrap(), std::fs::read(&ae2).unwrap());
    assert_eq!(run(&["train-ae", "--data", &data, "--iters", "0", "--out", &ae1]).0, 2);

    ok(&[&["train-forecaster"], &base[..], &["--ae", &ae1, "--out", &fc]].concat());
    let missing = p(&dir, "missing.ckpt");
    assert_eq!(run(&[&["train-forecaster"], &base[..], &["--ae", &missing, "--out", &fc]].concat()).0, 2);

    let pred = p(&dir, "pred.cdmf");
    ok(&["forecast", "--data", &data, "--ae", &ae1, "--fc", &fc, "--window-start", "4", "--out", &pred]);
    assert_eq!(read_sequence(&pred).unwrap().len(), 12);
    assert_eq!(run(&["forecast", "--data", &data, "--ae", &ae1, "--fc", &fc, "--window-start", "5", "--out", &pred]).0, 2);
    assert_eq!(run(&["forecast", "--data", &data, "--ae", &missing, "--fc", &fc, "--window-start", "0", "--out", &pred]).0, 2);
    // autoencoder and forecaster checkpoints are not interchangeable
    assert_eq!(run(&["forecast", "--data", &data, "--ae", &fc, "--fc", &ae1, "--window-start", "0", "--out", &pred]).0, 2);
}

#[test]
fn baselines_and_evaluation() {
    let dir = TempDir::new().unwrap();
    let (ann, _) = small_data(&dir);
    let raw = p(&dir, "raw.cdmf");
    ok(&["rasterize", "--ann", &ann, "--out", &raw]);
    let raw_seq = read_sequence(&raw).unwrap();

    let pers = p(&dir, "pers.cdmf");
    ok(&["baseline", "--method", "persistence", "--ann", &ann, "--window-start", "2", "--sigma", "0", "--out", &pers]);
    let pers_seq = read_sequence(&pers).unwrap();
    assert_eq!(pers_seq.len(), 12);
    assert_eq!(pers_seq.frames()[0], raw_seq.frames()[9]);

    let cv = p(&dir, "cv.cdmf");
    ok(&["baseline", "--method", "constvel", "--ann", &ann, "--window-start", "2", "--out", &cv]);
    assert_eq!(read_sequence(&cv).unwrap().len(), 12);
    assert_eq!(run(&["baseline", "--method", "constvel", "--ann", &ann, "--window-start", "5", "--out", &cv]).0, 2);
    assert_eq!(run(&["baseline", "--method", "kalman", "--ann", &ann, "--window-start", "0", "--out", &cv]).0, 2);

    let report = p(&dir, "r.csv");
    let out = ok(&["evaluate", "--pred", &pers, "--gt", &pers, "--out", &report]);
    let text = std::fs::read_to_string(&report).unwrap();
    assert_eq!(out, text);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "frame,d_kl,d_ikl,d_js");
    assert_eq!(lines.len(), 15);
    for l in &lines[1..] {
        assert!(l.split(',').skip(1).all(|v| v.parse::<f64>().unwrap() == 0.0), "{l}");
    }

    let plain = p(&dir, "plain.csv");
    let scaled = p(&dir, "scaled.csv");
    ok(&["evaluate", "--pred", &cv, "--gt", &pers, "--out", &plain]);
    ok(&["evaluate", "--pred", &cv, "--gt", &pers, "--prefactor", "--out", &scaled]);
    let vals = |path: &str| -> Vec<f64> {
        std::fs::read_to_string(path)
            .unwrap()
            .lines()
            .skip(1)
            .flat_map(|l| l.split(',').skip(1).map(|v| v.parse::<f64>().unwrap()).collect::<Vec<_>>())
            .collect()
    };
    for (a, b) in vals(&plain).iter().zip(vals(&scaled)) {
        assert_eq!(a / 6400.0, b);
    }
    assert_eq!(run(&["evaluate", "--pred", &raw, "--gt", &pers, "--out", &report]).0, 2);
}

fn binary() -> Command {
    Command::new(env!("CARGO_BIN_EXE_crowdcast"))
}

#[test]
fn selftest_exit_codes() {
    let out = binary().arg("selftest").output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    for prim in crowdcast::gradcheck::Primitive::ALL {
        assert!(
            text.lines().any(|l| l.starts_with("PASS") && l.contains(&format!(" {} ", prim.name()))),
            "no passing line for {}",
            prim.name()
        );
    }
    assert!(text.contains("PASS shapes batch 16"));

    let out = binary().args(["selftest", "--inject-fault", "deconv2d"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.lines().any(|l| l.starts_with("FAIL gradcheck deconv2d")));

    let out = binary().arg("--no-such-flag").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(Path::new(env!("CARGO_BIN_EXE_crowdcast")).exists());
}
