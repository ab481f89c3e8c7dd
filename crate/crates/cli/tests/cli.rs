use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_handcap");

fn configs() -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn handcap(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("spawn handcap")
}

fn ok(args: &[&str]) -> Output {
    let out = handcap(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn same_bytes(a: &Path, b: &Path) {
    let (x, y) = (std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
    assert!(x == y, "{} differs from {}", a.display(), b.display());
}

#[test]
fn step_by_step_matches_pipeline() {
    let d = tempfile::tempdir().unwrap();
    let (p, st) = (d.path().join("pipe"), d.path().join("steps"));
    let burst = configs().join("burst.toml");
    let out = ok(&["pipeline", "--config", s(&burst), "--out", s(&p)]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("check thumb_band_fraction") && !text.contains("FAIL"), "{text}");

    ok(&["simulate", "--config", s(&burst), "--out", s(&st)]);
    ok(&["sync", "--samples", s(&st.join("samples.txt")), "--anchors", s(&st.join("anchors.txt")), "--out", s(&st)]);
    ok(&["calibrate", "--captures", s(&st.join("captures.txt")), "--out", s(&st.join("calibration.txt"))]);
    ok(&[
        "reconstruct",
        "--aligned",
        s(&st.join("aligned.txt")),
        "--calibration",
        s(&st.join("calibration.txt")),
        "--out",
        s(&st.join("hand_frames.txt")),
    ]);
    ok(&["spectrum", "--input", s(&st.join("aligned.txt")), "--out", s(&st.join("spectrum.txt"))]);
    ok(&["targets", "--frames", s(&st.join("hand_frames.txt")), "--out", s(&st.join("targets.txt"))]);
    ok(&["chain", "--hand", "five-finger", "--out", s(&st.join("chain.toml"))]);
    ok(&[
        "retarget",
        "--chain",
        s(&st.join("chain.toml")),
        "--targets",
        s(&st.join("targets.txt")),
        "--joints",
        s(&st.join("joints.txt")),
        "--report",
        s(&st.join("retarget_report.txt")),
    ]);
    for f in [
        "samples.txt",
        "anchors.txt",
        "ground_truth.txt",
        "captures.txt",
        "aligned.txt",
        "drift.txt",
        "calibration.txt",
        "hand_frames.txt",
        "spectrum.txt",
        "targets.txt",
        "joints.txt",
        "retarget_report.txt",
    ] {
        same_bytes(&p.join(f), &st.join(f));
    }
}

#[test]
fn simulate_is_deterministic_and_gzip_is_readable() {
    let d = tempfile::tempdir().unwrap();
    let cfg = d.path().join("c.toml");
    std::fs::write(&cfg, "seed = 3\nduration_s = 2.0\ngzip = true\n").unwrap();
    ok(&["simulate", "--config", s(&cfg), "--out", s(&d.path().join("a"))]);
    ok(&["simulate", "--config", s(&cfg), "--out", s(&d.path().join("b"))]);
    for f in ["samples.txt.gz", "anchors.txt.gz", "ground_truth.txt.gz", "captures.txt.gz"] {
        same_bytes(&d.path().join("a").join(f), &d.path().join("b").join(f));
    }
    let a = d.path().join("a");
    ok(&["sync", "--samples", s(&a.join("samples.txt.gz")), "--anchors", s(&a.join("anchors.txt.gz")), "--out", s(&a)]);
    let aligned = std::fs::read_to_string(a.join("aligned.txt")).unwrap();
    assert!(aligned.starts_with("# format_version=1 kind=aligned"));
}

#[test]
fn malformed_config_names_the_field() {
    let d = tempfile::tempdir().unwrap();
    let cfg = d.path().join("bad.toml");
    std::fs::write(&cfg, "duration_s = -4.0\n").unwrap();
    let out = handcap(&["simulate", "--config", s(&cfg), "--out", s(d.path())]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("duration_s"));

    std::fs::write(&cfg, "[noise]\norientation_deg = 0.1\nacc = 2\n").unwrap();
    let out = handcap(&["simulate", "--config", s(&cfg), "--out", s(d.path())]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("acc"));
}

#[test]
fn missing_anchor_file_is_an_io_error() {
    let d = tempfile::tempdir().unwrap();
    let cfg = d.path().join("c.toml");
    std::fs::write(&cfg, "duration_s = 1.0\n").unwrap();
    ok(&["simulate", "--config", s(&cfg), "--out", s(d.path())]);
    let out = handcap(&[
        "sync",
        "--samples",
        s(&d.path().join("samples.txt")),
        "--anchors",
        s(&d.path().join("nope.txt")),
        "--out",
        s(d.path()),
    ]);
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.txt"));
}

#[test]
fn chain_target_mismatch_is_a_validation_error() {
    let d = tempfile::tempdir().unwrap();
    let t = d.path().join("targets.txt");
    let mut text = String::from("# format_version=1 kind=targets fields=frame_time_s,finger_index,x,y,z\n");
    for i in 0..5 {
        text.push_str(&format!("0.0 {i} 0.0 0.1 0.0\n"));
    }
    std::fs::write(&t, text).unwrap();
    ok(&["chain", "--hand", "four-finger", "--out", s(&d.path().join("c.toml"))]);
    let out = handcap(&[
        "retarget",
        "--chain",
        s(&d.path().join("c.toml")),
        "--targets",
        s(&t),
        "--joints",
        s(&d.path().join("j.txt")),
        "--report",
        s(&d.path().join("r.txt")),
    ]);
    assert_eq!(out.status.code(), Some(5));
    assert!(String::from_utf8_lossy(&out.stderr).contains("fingertips"));
}

#[test]
fn usage_errors_and_help() {
    assert_eq!(handcap(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(handcap(&["simulate"]).status.code(), Some(2));
    for verb in ["simulate", "sync", "calibrate", "reconstruct", "spectrum", "targets", "retarget", "chain", "pipeline", "plot"] {
        let out = ok(&[verb, "--help"]);
        assert!(String::from_utf8_lossy(&out.stdout).contains("--"), "{verb}");
    }
}

#[test]
fn static_pipeline_and_plot() {
    let d = tempfile::tempdir().unwrap();
    let out = ok(&["pipeline", "--config", s(&configs().join("static.toml")), "--out", s(d.path()), "--strict"]);
    assert!(!String::from_utf8_lossy(&out.stdout).contains("FAIL"));
    let png = d.path().join("spec.png");
    ok(&["plot", "--spectrum", s(&d.path().join("spectrum.txt")), "--out", s(&png)]);
    assert_eq!(&std::fs::read(&png).unwrap()[..8], b"\x89PNG\r\n\x1a\n");
}
