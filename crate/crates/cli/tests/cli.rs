use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use vita_core::cam::Heatmap;

fn vita(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vita")).args(args).output().unwrap()
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Binary PPM with a deterministic pattern.
fn write_ppm(path: &Path, w: usize, h: usize, seed: usize) {
    let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
    for i in 0..w * h * 3 {
        bytes.push(((i * 37 + seed * 101) % 251) as u8);
    }
    fs::write(path, bytes).unwrap();
}

struct Fixture {
    dir: tempfile::TempDir,
    weights: PathBuf,
    manifest: PathBuf,
}

fn fixture(n: usize) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let weights = dir.path().join("toy.vita");
    ok(&vita(&["toy-weights", "--seed", "3", "--out", s(&weights)]));
    let mut csv = String::from("image,heatmap,label\n");
    for i in 0..n {
        write_ppm(&dir.path().join(format!("img{i}.ppm")), 12, 10, i);
        let values: Vec<f64> = (0..64).map(|v| ((v * (i + 3)) % 17) as f64).collect();
        Heatmap::normalized(8, 8, values)
            .unwrap()
            .write_raw(&dir.path().join(format!("gt{i}.f32")))
            .unwrap();
        csv.push_str(&format!("img{i}.ppm,gt{i}.f32,{}\n", i % 5));
    }
    let manifest = dir.path().join("manifest.csv");
    fs::write(&manifest, csv).unwrap();
    Fixture { dir, weights, manifest }
}

#[test]
fn eval_writes_records_and_summary() {
    let f = fixture(3);
    let out = f.dir.path().join("run");
    let stdout = ok(&vita(&[
        "eval",
        "--arch",
        "toy",
        "--weights",
        s(&f.weights),
        "--manifest",
        s(&f.manifest),
        "--astro",
        "4,2,-0.5,1.5,0.05",
        "--workers",
        "2",
        "--out",
        s(&out),
    ]));
    assert!(stdout.contains("3 of 3 images evaluated"));
    let records = fs::read_to_string(out.join("records.csv")).unwrap();
    assert!(records.starts_with("image,cam,metric,target_class,baseline,astro,k,tau,phi,alpha,beta\n"));
    assert_eq!(records.lines().count(), 1 + 3 * 2 * 3);
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["stats"].as_array().unwrap().len(), 6);
    assert_eq!(summary["failed"], 0);
    assert_eq!(summary["astro"], "4,2,-0.5,1.5,0.05");

    // same inputs, byte-identical reports
    let again = f.dir.path().join("again");
    ok(&vita(&[
        "eval", "--arch", "toy", "--weights", s(&f.weights), "--manifest", s(&f.manifest),
        "--astro", "4,2,-0.5,1.5,0.05", "--workers", "1", "--out", s(&again),
    ]));
    for name in ["records.csv", "summary.json"] {
        assert_eq!(fs::read(out.join(name)).unwrap(), fs::read(again.join(name)).unwrap(), "{name}");
    }

    let stats_json = f.dir.path().join("stats.json");
    let table = ok(&vita(&["stats", "--records", s(&out.join("records.csv")), "--out", s(&stats_json)]));
    assert_eq!(table.lines().count(), 7);
    let stats: serde_json::Value = serde_json::from_str(&fs::read_to_string(stats_json).unwrap()).unwrap();
    assert_eq!(stats["records"], 18);
}

#[test]
fn config_file_supplies_flags_and_flags_override() {
    let f = fixture(2);
    let cfg = f.dir.path().join("cfg.json");
    let out = f.dir.path().join("cfgrun");
    let body = serde_json::json!({
        "arch": "toy",
        "weights": f.weights,
        "manifest": f.manifest,
        "cam": ["gradcam"],
        "metric": ["dsc", "ssim"],
        "astro": "best",
        "out": out,
        "metrics": {"comparison_resolution": 32}
    });
    fs::write(&cfg, body.to_string()).unwrap();
    ok(&vita(&["eval", "--config", s(&cfg), "--metric", "spearman"]));
    let records = fs::read_to_string(out.join("records.csv")).unwrap();
    let rows: Vec<&str> = records.lines().skip(1).collect();
    assert_eq!(rows.len(), 2);
    // Grad-CAM / Spearman best configuration
    assert!(rows.iter().all(|r| r.contains(",gradcam,spearman,") && r.ends_with(",8,1,0.2,1.25,0.005")), "{rows:?}");

    fs::write(&cfg, r#"{"bogus": 1}"#).unwrap();
    assert!(!vita(&["eval", "--config", s(&cfg)]).status.success());
}

#[test]
fn gridsearch_writes_ranked_table() {
    let f = fixture(2);
    let grid = f.dir.path().join("grid.json");
    fs::write(&grid, r#"{"k":[4,6],"tau":[1,3],"phi":[0.0],"alpha":[1.2,1.5],"beta":[0.05]}"#).unwrap();
    let out = f.dir.path().join("grid");
    let stdout = ok(&vita(&[
        "gridsearch", "--arch", "toy", "--weights", s(&f.weights), "--manifest", s(&f.manifest),
        "--cam", "gradcampp", "--metric", "dsc", "--grid", s(&grid), "--out", s(&out),
    ]));
    assert!(stdout.starts_with("gradcampp/dsc: best "));
    let table = fs::read_to_string(out.join("grid_gradcampp_dsc.csv")).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], "rank,k,tau,phi,alpha,beta,mean,evaluated,failed,error");
    assert_eq!(lines.len(), 1 + 8);
    assert!(lines[1].starts_with("1,"));
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("grid_summary.json")).unwrap()).unwrap();
    assert_eq!(summary[0]["combinations"], 8);
}

#[test]
fn explain_writes_pgm_raw_and_sidecar() {
    let f = fixture(1);
    let stem = f.dir.path().join("maps").join("probe");
    let img = f.dir.path().join("img0.ppm");
    let stdout = ok(&vita(&[
        "explain", "--arch", "toy", "--weights", s(&f.weights), "--image", s(&img),
        "--cam", "gradcam", "--astro", "6,3,-0.5,1.5,0.05", "--out", s(&stem),
    ]));
    assert!(stdout.starts_with("predicted class "));
    let pgm = fs::read(stem.with_extension("pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n224 224\n255\n"));
    let raw = fs::read(stem.with_extension("f32")).unwrap();
    assert_eq!(raw.len(), 224 * 224 * 4);
    let side: serde_json::Value = serde_json::from_str(&fs::read_to_string(stem.with_extension("json")).unwrap()).unwrap();
    assert_eq!(side["width"], 224);
    assert_eq!(side["astro"]["alpha"], 1.5);

    let labelled = f.dir.path().join("labelled");
    ok(&vita(&[
        "explain", "--arch", "toy", "--weights", s(&f.weights), "--image", s(&img),
        "--target-class", "label", "--label", "3", "--out", s(&labelled),
    ]));
    let side: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(labelled.with_extension("json")).unwrap()).unwrap();
    assert_eq!(side["target_class"], 3);
}

#[test]
fn errors_exit_nonzero_with_a_message() {
    let f = fixture(1);
    let missing = vita(&["eval", "--arch", "toy", "--weights", s(&f.weights), "--manifest", "/nonexistent/m.csv"]);
    assert!(!missing.status.success());
    assert!(String::from_utf8_lossy(&missing.stderr).contains("/nonexistent/m.csv"));

    let no_weights = vita(&["eval", "--manifest", s(&f.manifest)]);
    assert!(!no_weights.status.success());
    assert!(String::from_utf8_lossy(&no_weights.stderr).contains("--weights"));

    let wrong_arch = vita(&["eval", "--weights", s(&f.weights), "--manifest", s(&f.manifest)]);
    assert!(!wrong_arch.status.success());
    assert!(String::from_utf8_lossy(&wrong_arch.stderr).contains("cls_token"));

    let bad_cam = vita(&["explain", "--arch", "toy", "--weights", s(&f.weights), "--cam", "lime"]);
    assert!(!bad_cam.status.success());

    let bad_astro = vita(&["eval", "--arch", "toy", "--weights", s(&f.weights), "--astro", "4,0,0,1.5,0.05"]);
    assert!(!bad_astro.status.success());
}
