use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_detrank"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

fn synth(dir: &Path, qualities: &str, classes: usize, seed: u64) {
    let o = run(&[
        "synth",
        "--out-dir",
        dir.to_str().unwrap(),
        "--qualities",
        qualities,
        "--classes",
        &classes.to_string(),
        "--objects",
        "120",
        "--dim",
        "24",
        "--seed",
        &seed.to_string(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
}

fn first_bundle(dir: &Path) -> PathBuf {
    detrank::cli::list_bundles(dir).unwrap().remove(0)
}

#[test]
fn score_single_bundle_emits_one_row() {
    let t = tempfile::tempdir().unwrap();
    synth(t.path(), "0.5", 2, 1);
    let b = first_bundle(t.path());
    let o = run(&["score", "--bundle", b.to_str().unwrap(), "--method", "u-logme"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let lines: Vec<_> = text.lines().collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0], "model_name,u_logme_raw");
    assert!(lines[1].starts_with("synth-q0.50-s1,"));
}

#[test]
fn det_logme_on_single_bundle_is_usage_error() {
    let t = tempfile::tempdir().unwrap();
    synth(t.path(), "0.5", 2, 1);
    let b = first_bundle(t.path());
    let o = run(&["score", "--bundle", b.to_str().unwrap(), "--method", "det-logme"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("det-logme requires a zoo (use rank)"));
}

#[test]
fn sfda_on_single_class_exits_3() {
    let t = tempfile::tempdir().unwrap();
    synth(t.path(), "0.5", 1, 1);
    let b = first_bundle(t.path());
    let o = run(&["score", "--bundle", b.to_str().unwrap(), "--method", "sfda"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("not applicable"));
}

#[test]
fn rank_orders_planted_quality() {
    let t = tempfile::tempdir().unwrap();
    synth(t.path(), "0.2,0.5,0.9", 3, 7);
    let o = run(&["rank", "--bundles", t.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let names: Vec<&str> = text.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(names, vec!["synth-q0.90-s9", "synth-q0.50-s8", "synth-q0.20-s7"]);
    assert_eq!(
        text.lines().next().unwrap(),
        "model_name,u_logme_raw,iou_logme_raw,u_norm,iou_norm,det_logme"
    );
}

#[test]
fn rank_mu_zero_follows_u_logme() {
    let t = tempfile::tempdir().unwrap();
    synth(t.path(), "0.1,0.6,0.3,0.8", 2, 20);
    let o = run(&["rank", "--bundles", t.path().to_str().unwrap(), "--mu", "0", "--format", "json-lines"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rows: Vec<serde_json::Value> = stdout(&o).lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    let u: Vec<f64> = rows.iter().map(|r| r["u_logme_raw"].as_f64().unwrap()).collect();
    assert!(u.windows(2).all(|w| w[0] >= w[1]), "{u:?}");
}

#[test]
fn rank_rejects_mixed_class_counts_and_small_zoos() {
    let t = tempfile::tempdir().unwrap();
    synth(t.path(), "0.5", 2, 1);
    let o = run(&["rank", "--bundles", t.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    synth(t.path(), "0.5", 3, 2);
    let o = run(&["rank", "--bundles", t.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("share the class count"));
}

#[test]
fn invalid_flags_fail_before_io() {
    let o = run(&["rank", "--bundles", "/nonexistent/dir", "--mu=-1"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("mu"));
    let o = run(&["stability", "--scores", "/nope.csv", "--gt", "/nope.csv", "--subset-size", "3", "--fraction", "2", "--seed", "0"]);
    assert_eq!(o.status.code(), Some(1));
    // missing mandatory seed is a usage error
    let o = run(&["stability", "--scores", "a.csv", "--gt", "a.csv", "--subset-size", "3"]);
    assert_eq!(o.status.code(), Some(1));
    let o = run(&["no-such-command"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn evaluate_perfect_and_missing() {
    let t = tempfile::tempdir().unwrap();
    let scores = t.path().join("s.csv");
    let gt = t.path().join("g.csv");
    std::fs::write(&scores, "model_name,det_logme\na,3\nb,2\nc,1\n").unwrap();
    std::fs::write(&gt, "model,map\na,80\nb,70\nc,60\n").unwrap();
    let o = run(&[
        "evaluate",
        "--scores",
        scores.to_str().unwrap(),
        "--gt",
        gt.to_str().unwrap(),
        "--metrics",
        "tauw-plain,tauw-weighted,pearson,rel1",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("det_logme,tauw-plain,1.0"), "{text}");
    assert!(text.contains("det_logme,tauw-weighted,1.0"));
    assert!(text.contains("det_logme,rel1,1.0"));

    std::fs::write(&gt, "model,map\na,80\nc,60\n").unwrap();
    let o = run(&["evaluate", "--scores", scores.to_str().unwrap(), "--gt", gt.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("b"), "{}", stderr(&o));
}

#[test]
fn evaluate_fixture_marks_not_applicable() {
    let f = fixtures().join("crowdhuman.csv");
    let o = run(&["evaluate", "--scores", f.to_str().unwrap(), "--gt", f.to_str().unwrap(), "--metrics", "tauw-plain"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("sfda,tauw-plain,N/A"));
}

#[test]
fn stability_exhaustive_and_deterministic() {
    let t = tempfile::tempdir().unwrap();
    let scores = t.path().join("s.csv");
    std::fs::write(&scores, "model,x,map\na,5,50\nb,4,45\nc,3,47\nd,2,40\ne,1,30\n").unwrap();
    let args = |out: &Path| {
        vec![
            "stability".to_string(),
            "--scores".into(),
            scores.to_str().unwrap().into(),
            "--gt".into(),
            scores.to_str().unwrap().into(),
            "--subset-size".into(),
            "4".into(),
            "--fraction".into(),
            "1.0".into(),
            "--seed".into(),
            "3".into(),
            "--out".into(),
            out.to_str().unwrap().into(),
        ]
    };
    let (a, b) = (t.path().join("a.csv"), t.path().join("b.csv"));
    let o = bin().args(args(&a)).output().unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stderr(&o).starts_with("5 subsets of 4 from 5 models"));
    let o = bin().args(args(&b)).env("TRANSFER_RANK_THREADS", "2").output().unwrap();
    assert!(o.status.success());
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let text = std::fs::read_to_string(&a).unwrap();
    assert!(text.starts_with("metric,mean_tauw,std_tauw,mean_rel1,std_rel1\nx,"));
}

#[test]
fn invalid_thread_count_is_usage_error() {
    let o = bin()
        .args(["assign-levels", "--width", "10", "--height", "10"])
        .env("TRANSFER_RANK_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn assign_levels_single_and_batch() {
    let o = run(&["assign-levels", "--width", "224", "--height", "224"]);
    assert_eq!(stdout(&o), "width,height,level\n224.0,224.0,3\n");
    let t = tempfile::tempdir().unwrap();
    let input = t.path().join("sizes.csv");
    std::fs::write(&input, "width,height\n10,10\n448,448\n1000,900\n").unwrap();
    let o = run(&["assign-levels", "--input", input.to_str().unwrap()]);
    let text = stdout(&o);
    let levels: Vec<&str> = text.lines().skip(1).map(|l| l.rsplit(',').next().unwrap()).collect();
    assert_eq!(levels, vec!["2", "4", "5"]);
}

#[test]
fn reproduce_reports_all_variants() {
    let t = tempfile::tempdir().unwrap();
    let prefix = t.path().join("report");
    let o = run(&["reproduce", "--fixtures", fixtures().to_str().unwrap(), "--out", prefix.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let md = std::fs::read_to_string(prefix.with_extension("md")).unwrap();
    for name in ["Pascal VOC", "CityScapes", "SODA", "CrowdHuman", "VisDrone", "DeepLesion"] {
        assert!(md.contains(name));
    }
    let csv = std::fs::read_to_string(prefix.with_extension("csv")).unwrap();
    assert!(csv.starts_with("dataset,metric,printed,tau_plain,tau_weighted,tau_hyperbolic"));
    assert!(csv.contains("crowdhuman,sfda,N/A,N/A,N/A,N/A"));
    assert_eq!(csv.lines().count(), 1 + 36);
}

#[test]
fn reproduce_lists_missing_fixture() {
    let t = tempfile::tempdir().unwrap();
    for f in std::fs::read_dir(fixtures()).unwrap() {
        let p = f.unwrap().path();
        if p.file_name().unwrap() != "deeplesion.csv" {
            std::fs::copy(&p, t.path().join(p.file_name().unwrap())).unwrap();
        }
    }
    let o = run(&["reproduce", "--fixtures", t.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("deeplesion.csv"));
}

#[test]
fn validate_accepts_good_and_rejects_corrupt() {
    let t = tempfile::tempdir().unwrap();
    synth(t.path(), "0.5", 2, 1);
    let b = first_bundle(t.path());
    let o = run(&["validate", "--bundle", b.to_str().unwrap()]);
    assert!(o.status.success());
    assert!(stdout(&o).starts_with("ok "));

    let mut bytes = std::fs::read(&b).unwrap();
    bytes[100] ^= 0xff;
    std::fs::write(&b, bytes).unwrap();
    let o = run(&["validate", "--bundle", b.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("checksum"));
}

#[test]
fn failed_command_leaves_no_output_file() {
    let t = tempfile::tempdir().unwrap();
    synth(t.path(), "0.5", 1, 1);
    let b = first_bundle(t.path());
    let out = t.path().join("out.csv");
    let o = run(&["score", "--bundle", b.to_str().unwrap(), "--method", "sfda", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    assert!(!out.exists());
    let leftovers: Vec<_> = std::fs::read_dir(t.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| !n.ends_with(".dtfb") && !n.ends_with(".manifest.json"))
        .collect();
    assert!(leftovers.is_empty(), "{leftovers:?}");
}

#[test]
fn knas_needs_gradients() {
    let t = tempfile::tempdir().unwrap();
    synth(t.path(), "0.5", 2, 1);
    let b = first_bundle(t.path());
    let o = run(&["score", "--bundle", b.to_str().unwrap(), "--method", "knas"]);
    assert_eq!(o.status.code(), Some(1));
    let g = tempfile::tempdir().unwrap();
    let o = run(&[
        "synth", "--out-dir", g.path().to_str().unwrap(), "--qualities", "0.5", "--gradient-dim", "8", "--seed", "1",
    ]);
    assert!(o.status.success());
    let b = first_bundle(g.path());
    let o = run(&["score", "--bundle", b.to_str().unwrap(), "--method", "knas", "--format", "markdown"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("| model_name | knas |"));
}
