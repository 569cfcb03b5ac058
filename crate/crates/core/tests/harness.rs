mod common;

use std::fs;

use common::{toy_model, write_dataset, write_manifest};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vita_core::astro::AstroParams;
use vita_core::cam::{CamMethod, Heatmap};
use vita_core::eval::{
    explain_single, read_records, render, run_eval, spatial_activation, write_records, AstroChoice,
    EvalConfig, ExplainOptions, TargetClass,
};
use vita_core::grid::{grid_search, write_grid, GridSpace};
use vita_core::manifest::load_manifest;
use vita_core::metrics::{Metric, MetricConfig};
use vita_core::preprocess::{preprocess_image, PreprocessConfig};

fn small_cfg() -> EvalConfig {
    EvalConfig {
        metrics: MetricConfig {
            comparison_resolution: Some(32),
            ..MetricConfig::default()
        },
        workers: 2,
        ..EvalConfig::default()
    }
}

#[test]
fn two_images_give_two_records_per_method_and_metric() {
    let model = toy_model(1);
    let data = write_dataset(2, 10);
    let manifest = load_manifest(&data.manifest, 5).unwrap();
    let astro = AstroChoice::Fixed(AstroParams::new(4, 1, 0.0, 1.5, 0.05).unwrap());
    let out = run_eval(&model, &manifest, &small_cfg(), Some(&astro), &CamMethod::ALL, &Metric::ALL).unwrap();
    assert!(out.failures.is_empty());
    assert_eq!(out.records.len(), 12);
    for m in CamMethod::ALL {
        for metric in Metric::ALL {
            let n = out.records.iter().filter(|r| r.cam == m && r.metric == metric).count();
            assert_eq!(n, 2);
        }
    }
    for r in &out.records {
        let (lo, hi) = r.metric.range();
        assert!((lo..=hi).contains(&r.baseline));
        assert!((lo..=hi).contains(&r.astro.unwrap()));
        assert_eq!(r.params(), Some(AstroParams::new(4, 1, 0.0, 1.5, 0.05).unwrap()));
    }
}

#[test]
fn identity_astro_matches_baseline() {
    let model = toy_model(2);
    let data = write_dataset(3, 11);
    let manifest = load_manifest(&data.manifest, 5).unwrap();
    let astro = AstroChoice::Fixed(AstroParams::identity(6));
    let out = run_eval(&model, &manifest, &small_cfg(), Some(&astro), &CamMethod::ALL, &Metric::ALL).unwrap();
    assert_eq!(out.records.len(), 18);
    for r in &out.records {
        assert!((r.baseline - r.astro.unwrap()).abs() <= 1e-6, "{r:?}");
    }
}

#[test]
fn reports_are_byte_identical_across_worker_counts() {
    let model = toy_model(3);
    let data = write_dataset(5, 12);
    let manifest = load_manifest(&data.manifest, 5).unwrap();
    let astro = AstroChoice::Best;
    let mut outputs = Vec::new();
    for workers in [1, 4] {
        let cfg = EvalConfig {
            workers,
            ..small_cfg()
        };
        let out = run_eval(&model, &manifest, &cfg, Some(&astro), &CamMethod::ALL, &Metric::ALL).unwrap();
        let csv = data.path(&format!("records_{workers}.csv"));
        write_records(&csv, &out.records).unwrap();
        let summary = serde_json::to_vec_pretty(&out.summary(Some(&astro), cfg.target_class)).unwrap();
        outputs.push((fs::read(&csv).unwrap(), summary));
        assert_eq!(read_records(&csv).unwrap(), out.records);
    }
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn summary_has_a_row_per_method_and_metric() {
    let model = toy_model(4);
    let data = write_dataset(4, 13);
    let manifest = load_manifest(&data.manifest, 5).unwrap();
    let astro = AstroChoice::Best;
    let out = run_eval(&model, &manifest, &small_cfg(), Some(&astro), &CamMethod::ALL, &Metric::ALL).unwrap();
    let summary = out.summary(Some(&astro), TargetClass::Predicted);
    assert_eq!(summary.stats.len(), 6);
    assert_eq!(summary.evaluated, 4);
    for row in &summary.stats {
        let p = row.p_value.unwrap();
        assert!(p > 0.0 && p <= 1.0);
    }
    // each (method, metric) pair used its own published configuration
    for r in &out.records {
        assert_eq!(r.params().unwrap(), vita_core::eval::best_params(r.cam, r.metric));
    }
}

#[test]
fn bad_images_are_skipped_and_counted() {
    let model = toy_model(5);
    let data = write_dataset(2, 14);
    fs::write(data.path("broken.png"), b"not an image").unwrap();
    let rows = vec![
        ("img_0.png".to_string(), "gt_0.f32".to_string(), 0, Some(4)),
        ("broken.png".to_string(), "gt_1.f32".to_string(), 1, None),
        ("img_1.png".to_string(), "gt_1.f32".to_string(), 1, None),
    ];
    let manifest_path = write_manifest(data.dir.path(), &rows);
    let manifest = load_manifest(&manifest_path, 5).unwrap();
    let predicted0 = model
        .predict(&preprocess_image(&manifest[0].image, 9, &PreprocessConfig::default()).unwrap())
        .unwrap();
    let out = run_eval(&model, &manifest, &small_cfg(), None, &[CamMethod::GradCam], &[Metric::Dsc]).unwrap();
    assert_eq!(out.failures.len(), 1);
    assert_eq!(out.failures[0].image, "broken.png");
    assert_eq!(out.records.len(), 2);
    assert_eq!(out.records[0].image, "img_0.png");
    assert_eq!(out.records[1].image, "img_1.png");
    assert!(out.records.iter().all(|r| r.astro.is_none()));
    let expected_mismatch = usize::from(predicted0 != 4);
    assert_eq!(out.parity_mismatches.len(), expected_mismatch);
}

#[test]
fn label_target_explains_the_label() {
    let model = toy_model(6);
    let data = write_dataset(3, 15);
    let manifest = load_manifest(&data.manifest, 5).unwrap();
    let cfg = EvalConfig {
        target_class: TargetClass::Label,
        ..small_cfg()
    };
    let out = run_eval(&model, &manifest, &cfg, None, &[CamMethod::GradCam], &[Metric::Spearman]).unwrap();
    let targets: Vec<usize> = out.records.iter().map(|r| r.target_class).collect();
    assert_eq!(targets, vec![0, 1, 2]);
}

#[test]
fn grid_of_one_combination() {
    let model = toy_model(7);
    let data = write_dataset(2, 16);
    let manifest = load_manifest(&data.manifest, 5).unwrap();
    let space = GridSpace::single(AstroParams::new(4, 2, 0.0, 1.2, 0.05).unwrap());
    let report = grid_search(&model, &manifest, &space, CamMethod::GradCam, Metric::Ssim, &small_cfg()).unwrap();
    assert_eq!(report.rows.len(), 1);
    assert_eq!(report.rows[0].rank, 1);
    assert_eq!(report.rows[0].evaluated, 2);
    assert!(report.rows[0].mean.is_some());
}

#[test]
fn modulated_config_wins_where_modulation_helps() {
    let model = toy_model(8);
    let data = write_dataset(3, 17);
    let modulated = AstroParams::new(4, 1, 0.0, 1.5, 1.0).unwrap();
    let cfg = EvalConfig {
        preprocess: PreprocessConfig {
            crop_ground_truth: false,
            ..PreprocessConfig::default()
        },
        ..small_cfg()
    };
    // ground truth = the modulated explanation itself
    let manifest = load_manifest(&data.manifest, 5).unwrap();
    for e in &manifest {
        let img = preprocess_image(&e.image, 9, &cfg.preprocess).unwrap();
        let class = model.predict(&img).unwrap();
        let sa = spatial_activation(&model, &img, Some(&modulated), class).unwrap();
        let map: Heatmap = render(CamMethod::GradCam, &sa, 32, true).unwrap();
        map.write_raw(&e.heatmap).unwrap();
    }
    let space = GridSpace {
        k: vec![4],
        tau: vec![1],
        phi: vec![0.0],
        alpha: vec![1.0, 1.5],
        beta: vec![1.0],
    };
    let report = grid_search(&model, &manifest, &space, CamMethod::GradCam, Metric::Spearman, &cfg).unwrap();
    assert_eq!(report.rows.len(), 2);
    assert_eq!(report.rows[0].alpha, 1.5);
    assert!(report.rows[0].mean.unwrap() > report.rows[1].mean.unwrap());
}

#[test]
fn grid_rows_are_deterministic() {
    let model = toy_model(9);
    let data = write_dataset(2, 18);
    let manifest = load_manifest(&data.manifest, 5).unwrap();
    let space = GridSpace {
        k: vec![4, 6],
        tau: vec![1, 3],
        phi: vec![-0.5, 0.5],
        alpha: vec![1.5],
        beta: vec![0.05],
    };
    let mut files = Vec::new();
    for workers in [1, 3] {
        let cfg = EvalConfig {
            workers,
            ..small_cfg()
        };
        let report = grid_search(&model, &manifest, &space, CamMethod::GradCamPlusPlus, Metric::Dsc, &cfg).unwrap();
        assert_eq!(report.rows.len(), 8);
        let p = data.path(&format!("grid_{workers}.csv"));
        write_grid(&p, &report.rows).unwrap();
        files.push(fs::read(p).unwrap());
    }
    assert_eq!(files[0], files[1]);
}

#[test]
fn explain_writes_deterministic_224_maps() {
    let model = toy_model(10);
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let img = dir.path().join("probe.png");
    common::random_image(&mut rng, 20, 14).save(&img).unwrap();

    let base = ExplainOptions::default();
    let a = explain_single(&model, &img, &base, &dir.path().join("a")).unwrap();
    let b = explain_single(&model, &img, &base, &dir.path().join("b")).unwrap();
    let pgm = fs::read(&a.pgm).unwrap();
    let header = b"P5\n224 224\n255\n";
    assert!(pgm.starts_with(header));
    assert_eq!(pgm.len(), header.len() + 224 * 224);
    assert_eq!(pgm, fs::read(&b.pgm).unwrap());
    assert_eq!(fs::read(&a.raw).unwrap(), fs::read(&b.raw).unwrap());
    let (w, h, values) = vita_core::cam::read_raw(&a.raw).unwrap();
    assert_eq!((w, h, values.len()), (224, 224, 224 * 224));

    let astro = ExplainOptions {
        method: CamMethod::GradCamPlusPlus,
        astro: Some(AstroParams::new(6, 3, -0.5, 1.5, 0.05).unwrap()),
        ..ExplainOptions::default()
    };
    let c = explain_single(&model, &img, &astro, &dir.path().join("c")).unwrap();
    assert_eq!(c.sidecar.predicted_class, a.sidecar.predicted_class);
    let json: serde_json::Value = serde_json::from_slice(&fs::read(&c.json).unwrap()).unwrap();
    assert_eq!(json["predicted_class"], a.sidecar.predicted_class);
    assert_eq!(json["cam"], "gradcampp");
    assert_eq!(json["astro"]["k"], 6);
}
