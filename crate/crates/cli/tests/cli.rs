use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::path::Path;
use std::process::{Command, Output};

use p2es::eval::MetricsReport;
use p2es::signals::io::{read_cohort, write_segments};
use p2es::signals::SignalSegment;

fn p2es(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_p2es"))
        .arg("--out")
        .arg(dir)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let o = p2es(dir, args);
    assert!(o.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn small_config(dir: &Path) -> String {
    let p = dir.join("config.json");
    std::fs::write(&p, r#"{"seed": 11, "schedule": {"steps": 110}, "training": {"epochs": 2}}"#).unwrap();
    p.to_string_lossy().into_owned()
}

#[test]
fn synth_is_deterministic_and_splits_by_subject() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    ok(a.path(), &["--seed", "3", "synth"]);
    ok(b.path(), &["--seed", "3", "synth"]);
    for f in ["cohort_train.bin", "cohort_test.bin"] {
        assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap());
    }
    let tr = read_cohort(&a.path().join("cohort_train.bin")).unwrap();
    let te = read_cohort(&a.path().join("cohort_test.bin")).unwrap();
    assert_eq!(tr.len() + te.len(), 64);
    let s_tr: BTreeSet<&str> = tr.iter().map(|r| r.subject_id()).collect();
    let s_te: BTreeSet<&str> = te.iter().map(|r| r.subject_id()).collect();
    assert!(s_tr.is_disjoint(&s_te));
    let total = (s_tr.len() + s_te.len()) as f64;
    assert!((s_tr.len() as f64 - 0.8 * total).abs() <= 1.0);

    let c = tempfile::tempdir().unwrap();
    ok(c.path(), &["--seed", "4", "synth"]);
    assert_ne!(std::fs::read(a.path().join("cohort_train.bin")).unwrap(), std::fs::read(c.path().join("cohort_train.bin")).unwrap());
}

#[test]
fn missing_artifacts_exit_2() {
    let d = tempfile::tempdir().unwrap();
    let input = d.path().join("nothing.bin");
    let o = p2es(d.path(), &["generate", "--input", input.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("train"));
    assert_eq!(p2es(d.path(), &["cluster"]).status.code(), Some(2));
    assert_eq!(p2es(d.path(), &["evaluate"]).status.code(), Some(2));
}

#[test]
fn invalid_input_exits_1() {
    let d = tempfile::tempdir().unwrap();
    let cfg = d.path().join("bad.json");
    std::fs::write(&cfg, r#"{"train_fraction": 2.0}"#).unwrap();
    assert_eq!(p2es(d.path(), &["--config", cfg.to_str().unwrap(), "synth"]).status.code(), Some(1));
    assert_eq!(p2es(d.path(), &["--steps", "1", "synth"]).status.code(), Some(1));
    assert_eq!(p2es(d.path(), &["--eta", "-1", "synth"]).status.code(), Some(1));
}

#[test]
fn entropy_of_pure_sinusoid() {
    let d = tempfile::tempdir().unwrap();
    let x: Vec<f64> = (0..250).map(|i| (2.0 * PI * 10.0 * i as f64 / 250.0).sin()).collect();
    let path = d.path().join("sine.csv");
    write_segments(&[SignalSegment::ppg(x, 125.0, "sine").unwrap()], &path).unwrap();
    let out = ok(d.path(), &["entropy", "--input", path.to_str().unwrap()]);
    let mut lines = out.lines();
    assert_eq!(lines.next(), Some("segment,subject_id,channel,te,se"));
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(&row[..3], &["0", "sine", "PPG"]);
    assert!(row[4].parse::<f64>().unwrap().abs() < 1e-9);
}

#[test]
fn full_pipeline_emits_report_and_plot_data() {
    let d = tempfile::tempdir().unwrap();
    let cfg = small_config(d.path());
    let c = cfg.as_str();
    ok(d.path(), &["--config", c, "synth"]);
    let cluster: serde_json::Value = serde_json::from_str(ok(d.path(), &["--config", c, "cluster"]).trim()).unwrap();
    assert_eq!(cluster["k"], 3);
    ok(d.path(), &["--config", c, "train"]);
    let history = std::fs::read_to_string(d.path().join("history.csv")).unwrap();
    assert_eq!(history.lines().next(), Some("epoch,L_L,L_F,L_Stheta,L_a,total,eps_loss"));
    assert_eq!(history.lines().count(), 4);

    let test = d.path().join("cohort_test.bin");
    ok(d.path(), &["--config", c, "--threads", "1", "generate", "--input", test.to_str().unwrap()]);
    let first = std::fs::read(d.path().join("generated.csv")).unwrap();
    ok(d.path(), &["--config", c, "generate", "--input", test.to_str().unwrap()]);
    assert_eq!(first, std::fs::read(d.path().join("generated.csv")).unwrap());

    let table = ok(d.path(), &["evaluate"]);
    assert!(table.starts_with("metric,overall,chest,limb\n"));
    let report: MetricsReport =
        serde_json::from_str(&std::fs::read_to_string(d.path().join("metrics.json")).unwrap()).unwrap();
    assert_eq!(report.records, 12);
    assert!((-1.0..=1.0).contains(&report.s_theta));
    for g in [&report.mse, &report.dtw, &report.var, &report.kl, &report.mw] {
        assert!(g.per_lead.iter().all(|v| *v >= 0.0));
    }

    ok(d.path(), &["--config", c, "plotdata", "--index", "2"]);
    let overlay = std::fs::read_to_string(d.path().join("overlay_2.csv")).unwrap();
    let header: Vec<&str> = overlay.lines().next().unwrap().split(',').collect();
    assert_eq!(header.len(), 25);
    assert_eq!(&header[..3], &["time", "gt_I", "gt_II"]);
    assert_eq!(header[13], "gen_I");
    assert_eq!(header[24], "gen_V6");
    assert_eq!(overlay.lines().count(), 251);
    let curve = std::fs::read_to_string(d.path().join("entropy_curve_2.csv")).unwrap();
    assert_eq!(curve.lines().count(), 1 + 111);
}

#[test]
fn data_dir_comes_from_environment() {
    let d = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_p2es"))
        .arg("synth")
        .env("P2ES_DATA_DIR", d.path())
        .env("RUST_LOG", "warn")
        .current_dir(d.path())
        .output()
        .unwrap();
    assert!(o.status.success());
    assert!(d.path().join("cohort_train.bin").exists());
    assert!(!d.path().join("data").exists());
}
