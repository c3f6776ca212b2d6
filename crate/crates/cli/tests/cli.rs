use std::path::Path;
use std::process::{Command, Output};

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dilation-mra"))
        .arg("--out-dir")
        .arg(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn synth_recover_invert_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let o = run(d, &["synth", "--signal", "f2", "--sigma", "0", "--eta", "0", "-m", "32"]);
    assert!(o.status.success(), "{o:?}");
    let obs = d.join("observations.csv");
    let header = std::fs::read_to_string(&obs).unwrap();
    assert!(header.starts_with("t,tau,y0,"));
    assert_eq!(header.lines().count(), 33);

    let o = run(
        d,
        &["recover-bispectrum", "--input", obs.to_str().unwrap(), "--sigma", "0", "--eta", "0"],
    );
    assert!(o.status.success(), "{o:?}");
    assert!(d.join("bispectrum.csv.meta").exists());

    let o = run(
        d,
        &[
            "invert",
            "--bispectrum",
            d.join("bispectrum.csv").to_str().unwrap(),
            "--power",
            d.join("power.csv").to_str().unwrap(),
            "--reference",
            d.join("hidden.csv").to_str().unwrap(),
        ],
    );
    assert!(o.status.success(), "{o:?}");
    let out = stdout(&o);
    let err: f64 = out
        .lines()
        .find_map(|l| l.strip_prefix("aligned relative error = "))
        .expect("error line")
        .parse()
        .unwrap();
    assert!(err < 0.05, "{out}");
}

#[test]
fn experiment_from_config_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = d.join("tiny.toml");
    std::fs::write(
        &cfg,
        "signal = \"f1\"\nsigmas = [0.5]\nms = [64, 128, 256]\ntrials = 1\nlattice_stride = 8\n",
    )
    .unwrap();
    let o = run(d, &["--seed", "5", "experiment", cfg.to_str().unwrap()]);
    assert!(o.status.success(), "{o:?}");
    assert!(stdout(&o).contains("slope"));
    let csv = std::fs::read_to_string(d.join("tiny.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 * 3);
    assert!(d.join("tiny.bispectrum.svg").exists());
    assert!(d.join("tiny.manifest.txt").exists());

    let again = tempfile::tempdir().unwrap();
    let o = run(again.path(), &["--seed", "5", "--threads", "1", "experiment", cfg.to_str().unwrap()]);
    assert!(o.status.success());
    assert_eq!(csv, std::fs::read_to_string(again.path().join("tiny.csv")).unwrap());
}

#[test]
fn estimate_reports_sigma() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["estimate", "--signal", "f1", "--sigma", "1", "-m", "512"]);
    let out = stdout(&o);
    let sigma: f64 = out
        .lines()
        .find_map(|l| l.strip_prefix("sigma_hat = "))
        .expect("sigma line")
        .parse()
        .unwrap();
    assert!((sigma - 1.0).abs() < 0.1, "{out}");
    // The profile is written whether or not the search settles.
    assert!(dir.path().join("eta_profile.csv").exists());
}

#[test]
fn unknown_target_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["experiment", "fig9z"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("neither a preset"));
}
