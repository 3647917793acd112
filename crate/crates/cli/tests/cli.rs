use std::path::Path;
use std::process::{Command, Output};

fn edgefield(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_edgefield")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = edgefield(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_config(dir: &Path, extra: &str) -> String {
    let p = dir.join("cfg.toml");
    let text = format!(
        "[trainer]\niterations = 6\npatches_per_iter = 8\nlr_init = 0.1\nlr_final = 0.01\nlog_every = 2\n\
         [renderer]\nsamples_per_ray = 8\n[field]\nresolution = [6, 6, 6]\n{extra}"
    );
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn pipeline_from_generation_to_evaluation() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    ok(&["gen", "--scene", "box", "--views-train", "2", "--views-test", "1", "--size", "16", "--out", path(&data)]);
    assert!(data.join("cameras.txt").exists());

    let edges = dir.path().join("edges");
    ok(&["edges", "--input", path(&data), "--method", "canny", "--tau-e", "125", "--out", path(&edges)]);
    for i in 0..3 {
        assert!(edges.join("indicator").join(format!("{i:03}.png")).exists());
    }

    let cfg = write_config(dir.path(), "");
    let log = ok(&["train", "--config", &cfg, "--data", path(&data), "--out", path(&run), "--seed", "3", "--deterministic"]);
    assert_eq!(log.lines().filter(|l| l.ends_with(" -")).count(), 3);
    let ckpt = run.join("final.ckpt");

    let report = ok(&["eval", "--checkpoint", path(&ckpt), "--data", path(&data), "--samples", "8"]);
    assert_eq!(report.lines().filter(|l| l.starts_with("view: ")).count(), 1);
    assert!(report.contains("mean_psnr: "));

    let shot = dir.path().join("shot");
    ok(&["render", "--checkpoint", path(&ckpt), "--data", path(&data), "--pose", "2", "--samples", "8", "--out", path(&shot)]);
    for f in ["rgb.png", "depth.pfm", "normal.pfm"] {
        assert!(shot.join(f).exists(), "{f}");
    }

    let pose = dir.path().join("pose.txt");
    std::fs::write(&pose, "1 0 0 0\n0 -1 0 4\n0 0 -1 0\n").unwrap();
    ok(&["render", "--checkpoint", path(&ckpt), "--data", path(&data), "--pose", path(&pose), "--samples", "8", "--out", path(&shot)]);
}

#[test]
fn configuration_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&["gen", "--size", "8", "--views-train", "1", "--views-test", "1", "--out", path(&data)]);
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[trainer]\nbeta1 = 2.0\n").unwrap();
    let out = edgefield(&["train", "--config", path(&bad), "--data", path(&data), "--out", path(&dir.path().join("r"))]);
    assert_eq!(out.status.code(), Some(2));
    let out = edgefield(&["render", "--checkpoint", "x", "--data", path(&data), "--pose", "9", "--out", "y"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(edgefield(&["gen", "--scene", "teapot", "--out", "z"]).status.code(), Some(2));
}

#[test]
fn numerical_failure_exits_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&["gen", "--size", "8", "--views-train", "1", "--views-test", "1", "--out", path(&data)]);
    let cfg = write_config(dir.path(), "init_density = nan\n");
    let out = edgefield(&["train", "--config", &cfg, "--data", path(&data), "--out", path(&dir.path().join("r"))]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn gradcheck_reports_every_term() {
    let text = ok(&["gradcheck", "--trials", "2", "--coords", "4"]);
    for term in ["L_c", "L_z", "L_n", "L "] {
        assert!(text.contains(&format!("term: {term}")), "{term}");
    }
}
