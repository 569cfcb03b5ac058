//! Baseline-vs-astro evaluation over a manifest, single-image explanations,
//! and the per-image record files.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::astro::AstroParams;
use crate::cam::{tokens_to_grid, upsample_bilinear, CamMethod, Heatmap, SpatialActivation};
use crate::error::{Error, Result};
use crate::manifest::ManifestEntry;
use crate::metrics::{Metric, MetricConfig};
use crate::preprocess::{load_ground_truth, preprocess_image, PreprocessConfig};
use crate::report::{stats_report, StatsRow};
use crate::tensor::Tensor;
use crate::vit::Vit;

/// Class whose score the CAM explains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetClass {
    /// Argmax of the unmodulated logits.
    #[default]
    Predicted,
    /// Manifest label.
    Label,
}

impl FromStr for TargetClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "predicted" => Ok(TargetClass::Predicted),
            "label" => Ok(TargetClass::Label),
            _ => Err(Error::InvalidParam(format!("unknown target class mode {s:?}"))),
        }
    }
}

/// Best configuration per CAM method and metric, as reported for ViT-B/16.
pub fn best_params(method: CamMethod, metric: Metric) -> AstroParams {
    let (k, tau, phi, alpha, beta) = match (method, metric) {
        (CamMethod::GradCam, Metric::Spearman) => (8, 1, 0.2, 1.25, 0.005),
        (CamMethod::GradCam, Metric::Dsc) => (4, 3, -0.5, 1.25, 0.05),
        (CamMethod::GradCam, Metric::Ssim) => (6, 3, -0.5, 1.5, 0.05),
        (CamMethod::GradCamPlusPlus, Metric::Spearman) => (6, 3, -0.5, 1.25, 0.25),
        (CamMethod::GradCamPlusPlus, Metric::Dsc) => (4, 3, -0.5, 1.5, 0.005),
        (CamMethod::GradCamPlusPlus, Metric::Ssim) => (8, 1, -0.5, 1.5, 0.005),
    };
    AstroParams {
        k,
        tau,
        phi,
        alpha,
        beta,
    }
}

/// Astro configuration for an evaluation run: one fixed setting, or the best
/// published setting for each (method, metric) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum AstroChoice {
    Fixed(AstroParams),
    Best,
}

impl AstroChoice {
    pub fn params_for(&self, method: CamMethod, metric: Metric) -> AstroParams {
        match self {
            AstroChoice::Fixed(p) => *p,
            AstroChoice::Best => best_params(method, metric),
        }
    }
}

impl fmt::Display for AstroChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AstroChoice::Fixed(p) => write!(f, "{p}"),
            AstroChoice::Best => f.write_str("best"),
        }
    }
}

impl FromStr for AstroChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.trim() == "best" {
            Ok(AstroChoice::Best)
        } else {
            Ok(AstroChoice::Fixed(s.parse()?))
        }
    }
}

impl TryFrom<String> for AstroChoice {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<AstroChoice> for String {
    fn from(c: AstroChoice) -> String {
        c.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub preprocess: PreprocessConfig,
    pub metrics: MetricConfig,
    pub target_class: TargetClass,
    /// Worker threads; 0 lets rayon decide.
    pub workers: usize,
}

impl EvalConfig {
    pub fn validate(&self, model: &Vit) -> Result<()> {
        self.preprocess.validate(model.config().image_size)?;
        self.metrics.validate()
    }

    /// Side length CAM and ground-truth maps are compared at.
    pub fn comparison_side(&self, model: &Vit) -> usize {
        self.metrics
            .comparison_resolution
            .unwrap_or_else(|| model.config().grid_size())
    }

    pub(crate) fn pool(&self) -> Result<rayon::ThreadPool> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.workers)
            .build()
            .map_err(|e| Error::InvalidParam(format!("cannot start worker pool: {e}")))
    }
}

/// One image, one CAM method, one metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub image: String,
    pub cam: CamMethod,
    pub metric: Metric,
    pub target_class: usize,
    pub baseline: f64,
    pub astro: Option<f64>,
    pub k: Option<usize>,
    pub tau: Option<u32>,
    pub phi: Option<f64>,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
}

impl EvalRecord {
    pub fn params(&self) -> Option<AstroParams> {
        Some(AstroParams {
            k: self.k?,
            tau: self.tau?,
            phi: self.phi?,
            alpha: self.alpha?,
            beta: self.beta?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub image: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOutcome {
    pub records: Vec<EvalRecord>,
    pub failures: Vec<Failure>,
    /// Images whose prediction differs from the manifest's expected class.
    pub parity_mismatches: Vec<String>,
    pub images: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub images: usize,
    pub evaluated: usize,
    pub failed: usize,
    pub failures: Vec<Failure>,
    pub parity_mismatches: Vec<String>,
    pub astro: Option<String>,
    pub target_class: TargetClass,
    pub stats: Vec<StatsRow>,
    /// Why `stats` is empty, when it is.
    pub stats_note: Option<String>,
}

impl EvalOutcome {
    pub fn summary(&self, astro: Option<&AstroChoice>, target_class: TargetClass) -> EvalSummary {
        let (stats, stats_note) = match stats_report(&self.records) {
            Ok(rows) => (rows, None),
            Err(e) => {
                log::warn!("no statistics: {e}");
                (Vec::new(), Some(e.to_string()))
            }
        };
        EvalSummary {
            images: self.images,
            evaluated: self.images - self.failures.len(),
            failed: self.failures.len(),
            failures: self.failures.clone(),
            parity_mismatches: self.parity_mismatches.clone(),
            astro: astro.map(|a| a.to_string()),
            target_class,
            stats,
            stats_note,
        }
    }
}

/// A preprocessed image with its aligned ground truth and chosen class.
pub(crate) struct Prepared {
    pub id: String,
    pub image: Tensor,
    pub truth: Heatmap,
    pub predicted: usize,
    pub target: usize,
}

pub(crate) fn prepare(
    model: &Vit,
    entry: &ManifestEntry,
    cfg: &EvalConfig,
) -> Result<(Prepared, SpatialActivation)> {
    let size = model.config().image_size;
    let image = preprocess_image(&entry.image, size, &cfg.preprocess)?;
    let truth = load_ground_truth(&entry.heatmap, size, &cfg.preprocess, cfg.comparison_side(model))?;
    let pass = model.forward(&image, None)?;
    let predicted = pass
        .logits()
        .argmax()
        .ok_or_else(|| Error::shape("model produced no logits"))?;
    let target = match cfg.target_class {
        TargetClass::Predicted => predicted,
        TargetClass::Label => entry.label,
    };
    let baseline = tokens_to_grid(&pass.capture(target)?, model.config())?;
    drop(pass);
    Ok((
        Prepared {
            id: entry.id.clone(),
            image,
            truth,
            predicted,
            target,
        },
        baseline,
    ))
}

/// CAM activation for `class` with an optional astro forward.
pub fn spatial_activation(
    model: &Vit,
    image: &Tensor,
    astro: Option<&AstroParams>,
    class: usize,
) -> Result<SpatialActivation> {
    let pass = model.forward(image, astro)?;
    tokens_to_grid(&pass.capture(class)?, model.config())
}

/// CAM map resampled to `side x side`.
pub fn render(method: CamMethod, sa: &SpatialActivation, side: usize, renormalize: bool) -> Result<Heatmap> {
    let map = method.apply(sa)?;
    if map.width() == side && map.height() == side {
        return Ok(map);
    }
    Ok(upsample_bilinear(&map, side, side, renormalize))
}

pub(crate) fn score(
    method: CamMethod,
    metric: Metric,
    sa: &SpatialActivation,
    truth: &Heatmap,
    cfg: &MetricConfig,
) -> Result<f64> {
    let map = render(method, sa, truth.width(), cfg.renormalize_after_upsample)?;
    let v = metric.compute(&map, truth, cfg)?;
    let (lo, hi) = metric.range();
    if !(lo..=hi).contains(&v) {
        return Err(Error::Numeric(format!("{metric} value {v} outside [{lo}, {hi}]")));
    }
    Ok(v)
}

struct ImageResult {
    records: Vec<EvalRecord>,
    parity_mismatch: bool,
}

fn eval_image(
    model: &Vit,
    entry: &ManifestEntry,
    cfg: &EvalConfig,
    astro: Option<&AstroChoice>,
    methods: &[CamMethod],
    metrics: &[Metric],
) -> Result<ImageResult> {
    let (prep, baseline) = prepare(model, entry, cfg)?;
    let parity_mismatch = entry.expected_class.is_some_and(|c| c != prep.predicted);
    // astro activations, one per distinct parameter set
    let mut modulated: Vec<(AstroParams, SpatialActivation)> = Vec::new();
    let mut records = Vec::with_capacity(methods.len() * metrics.len());
    for &method in methods {
        for &metric in metrics {
            let base = score(method, metric, &baseline, &prep.truth, &cfg.metrics)?;
            let params = astro.map(|a| a.params_for(method, metric));
            let astro_value = match &params {
                None => None,
                Some(p) => {
                    let idx = match modulated.iter().position(|(q, _)| q == p) {
                        Some(i) => i,
                        None => {
                            let sa = spatial_activation(model, &prep.image, Some(p), prep.target)?;
                            modulated.push((*p, sa));
                            modulated.len() - 1
                        }
                    };
                    Some(score(method, metric, &modulated[idx].1, &prep.truth, &cfg.metrics)?)
                }
            };
            records.push(EvalRecord {
                image: prep.id.clone(),
                cam: method,
                metric,
                target_class: prep.target,
                baseline: base,
                astro: astro_value,
                k: params.map(|p| p.k),
                tau: params.map(|p| p.tau),
                phi: params.map(|p| p.phi),
                alpha: params.map(|p| p.alpha),
                beta: params.map(|p| p.beta),
            });
        }
    }
    Ok(ImageResult {
        records,
        parity_mismatch,
    })
}

/// Evaluates every manifest entry. Per-image failures are logged and
/// collected; records come back in manifest order, then method, then metric.
pub fn run_eval(
    model: &Vit,
    manifest: &[ManifestEntry],
    cfg: &EvalConfig,
    astro: Option<&AstroChoice>,
    methods: &[CamMethod],
    metrics: &[Metric],
) -> Result<EvalOutcome> {
    cfg.validate(model)?;
    if let Some(AstroChoice::Fixed(p)) = astro {
        p.validate()?;
    }
    let results: Vec<Result<ImageResult>> = cfg.pool()?.install(|| {
        manifest
            .par_iter()
            .map(|e| eval_image(model, e, cfg, astro, methods, metrics))
            .collect()
    });
    let mut outcome = EvalOutcome {
        records: Vec::new(),
        failures: Vec::new(),
        parity_mismatches: Vec::new(),
        images: manifest.len(),
    };
    for (entry, result) in manifest.iter().zip(results) {
        match result {
            Ok(r) => {
                if r.parity_mismatch {
                    log::warn!("{}: prediction differs from expected class", entry.id);
                    outcome.parity_mismatches.push(entry.id.clone());
                }
                outcome.records.extend(r.records);
            }
            Err(e) => {
                log::warn!("skipping {}: {e}", entry.id);
                outcome.failures.push(Failure {
                    image: entry.id.clone(),
                    reason: e.to_string(),
                });
            }
        }
    }
    Ok(outcome)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExplainOptions {
    pub method: CamMethod,
    pub astro: Option<AstroParams>,
    /// Explained class; `None` uses the prediction.
    pub target: Option<usize>,
    /// Output side length.
    pub size: usize,
    pub preprocess: PreprocessConfig,
    pub renormalize: bool,
}

impl Default for ExplainOptions {
    fn default() -> Self {
        Self {
            method: CamMethod::GradCam,
            astro: None,
            target: None,
            size: 224,
            preprocess: PreprocessConfig::default(),
            renormalize: true,
        }
    }
}

/// JSON written next to an explanation's raw map. `width`/`height` keep it
/// readable as a raw-heatmap sidecar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplainSidecar {
    pub width: usize,
    pub height: usize,
    pub image: String,
    pub predicted_class: usize,
    pub target_class: usize,
    pub cam: CamMethod,
    pub astro: Option<AstroParams>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExplainOutput {
    pub heatmap: Heatmap,
    pub sidecar: ExplainSidecar,
    pub pgm: PathBuf,
    pub raw: PathBuf,
    pub json: PathBuf,
}

/// Writes `<out>.pgm`, `<out>.f32` and `<out>.json`.
pub fn explain_single(model: &Vit, image: &Path, opts: &ExplainOptions, out: &Path) -> Result<ExplainOutput> {
    if opts.size == 0 {
        return Err(Error::InvalidParam("output size must be positive".into()));
    }
    let tensor = preprocess_image(image, model.config().image_size, &opts.preprocess)?;
    let predicted = model.predict(&tensor)?;
    let target = opts.target.unwrap_or(predicted);
    if target >= model.config().num_classes {
        return Err(Error::InvalidParam(format!(
            "target class {target} outside [0, {})",
            model.config().num_classes
        )));
    }
    let sa = spatial_activation(model, &tensor, opts.astro.as_ref(), target)?;
    let heatmap = render(opts.method, &sa, opts.size, opts.renormalize)?;
    let sidecar = ExplainSidecar {
        width: heatmap.width(),
        height: heatmap.height(),
        image: image.display().to_string(),
        predicted_class: predicted,
        target_class: target,
        cam: opts.method,
        astro: opts.astro,
    };
    let with_ext = |ext: &str| {
        let mut s = out.as_os_str().to_owned();
        s.push(".");
        s.push(ext);
        PathBuf::from(s)
    };
    let (pgm, raw, json) = (with_ext("pgm"), with_ext("f32"), with_ext("json"));
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    heatmap.write_pgm(&pgm)?;
    fs::write(&raw, heatmap.to_raw_bytes()).map_err(|e| Error::io(&raw, e))?;
    write_json(&json, &sidecar)?;
    Ok(ExplainOutput {
        heatmap,
        sidecar,
        pgm,
        raw,
        json,
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn write_records(path: &Path, records: &[EvalRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_records(path: &Path) -> Result<Vec<EvalRecord>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let records = rdr.deserialize().collect::<std::result::Result<Vec<EvalRecord>, _>>()?;
    Ok(records)
}
