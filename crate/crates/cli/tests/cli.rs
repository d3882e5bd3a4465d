use std::process::Command;

fn fairmech() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fairmech"))
}

#[test]
fn gaming_curve_writes_csv_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.json");
    std::fs::write(&spec, r#"{"ratios": [0.25, 0.5, 2.0]}"#).unwrap();
    let out = dir.path().join("out");
    let status = fairmech()
        .args(["gaming-curve", "--seed", "4", "--spec"])
        .arg(&spec)
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
    let csv = std::fs::read_to_string(out.join("gaming_curve.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    let manifest = std::fs::read_to_string(out.join("manifest.json")).unwrap();
    assert!(manifest.contains("\"seed\": 4"));
}

#[test]
fn sample_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let path = dir.path().join(name);
        let status = fairmech()
            .args(["sample", "--dims", "3x2", "--count", "5", "--seed", "11", "--out"])
            .arg(&path)
            .status()
            .unwrap();
        assert!(status.success());
        std::fs::read_to_string(path).unwrap()
    };
    assert_eq!(run("a.json"), run("b.json"));
}

#[test]
fn bad_dimensions_fail_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let output = fairmech()
        .args(["sample", "--dims", "3by2", "--out"])
        .arg(dir.path().join("x.json"))
        .output()
        .unwrap();
    assert!(!output.status.success());
    assert!(String::from_utf8_lossy(&output.stderr).contains("2x3"));
}
