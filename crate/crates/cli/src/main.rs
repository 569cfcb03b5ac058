use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use vita_core::astro::AstroParams;
use vita_core::cam::CamMethod;
use vita_core::eval::{
    explain_single, read_records, run_eval, write_json, write_records, AstroChoice, EvalConfig, ExplainOptions,
    TargetClass,
};
use vita_core::grid::{grid_search, write_grid, GridRow, GridSpace};
use vita_core::manifest::load_manifest;
use vita_core::metrics::{Metric, MetricConfig};
use vita_core::preprocess::PreprocessConfig;
use vita_core::report::{format_table, stats_report, StatsRow};
use vita_core::vit::{Vit, VitConfig, VitWeights};

#[derive(Parser)]
#[command(name = "vita", version, about = "Astrocyte-modulated ViT explanations and alignment metrics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Baseline vs astro evaluation over a manifest.
    Eval(EvalArgs),
    /// Rank every astro configuration of a grid by mean metric.
    Gridsearch(GridArgs),
    /// Write the heatmap for one image.
    Explain(ExplainArgs),
    /// Summary statistics of a records CSV.
    Stats(StatsArgs),
    /// Write randomly initialized weights for an architecture.
    ToyWeights(ToyArgs),
}

#[derive(Args)]
struct Common {
    /// JSON file with defaults for any of the flags.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Weight container (.vita).
    #[arg(long)]
    weights: Option<PathBuf>,
    /// vit-b16, toy, or a JSON model config.
    #[arg(long)]
    arch: Option<String>,
    /// Worker threads (0 = all cores).
    #[arg(long)]
    workers: Option<usize>,
    /// Output directory, or file stem for `explain`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// gradcam or gradcampp; repeatable. Default: both.
    #[arg(long)]
    cam: Vec<CamMethod>,
    /// spearman, dsc or ssim; repeatable. Default: all.
    #[arg(long)]
    metric: Vec<Metric>,
    /// k,tau,phi,alpha,beta or "best".
    #[arg(long, allow_hyphen_values = true)]
    astro: Option<AstroChoice>,
    /// predicted or label.
    #[arg(long)]
    target_class: Option<TargetClass>,
}

#[derive(Args)]
struct GridArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// gradcam or gradcampp; repeatable. Default: both.
    #[arg(long)]
    cam: Vec<CamMethod>,
    /// spearman, dsc or ssim; repeatable. Default: all.
    #[arg(long)]
    metric: Vec<Metric>,
    /// JSON grid {k, tau, phi, alpha, beta}. Default: the 405-point grid.
    #[arg(long)]
    grid: Option<PathBuf>,
    #[arg(long)]
    target_class: Option<TargetClass>,
}

#[derive(Args)]
struct ExplainArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    image: Option<PathBuf>,
    #[arg(long)]
    cam: Option<CamMethod>,
    #[arg(long, allow_hyphen_values = true)]
    astro: Option<AstroParams>,
    /// predicted or label (needs --label).
    #[arg(long)]
    target_class: Option<TargetClass>,
    #[arg(long)]
    label: Option<usize>,
    /// Output side length in pixels.
    #[arg(long)]
    size: Option<usize>,
}

#[derive(Args)]
struct StatsArgs {
    /// JSON file with defaults for any of the flags.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Records CSV written by `eval`.
    #[arg(long)]
    records: Option<PathBuf>,
    /// Where to write the JSON summary.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ToyArgs {
    #[arg(long, default_value = "toy")]
    arch: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.5)]
    scale: f64,
    #[arg(long)]
    out: PathBuf,
}

/// Every flag, as read from `--config`. Flags given on the command line win.
#[derive(Debug, Default, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    weights: Option<PathBuf>,
    arch: Option<String>,
    manifest: Option<PathBuf>,
    cam: Option<Vec<CamMethod>>,
    metric: Option<Vec<Metric>>,
    astro: Option<AstroChoice>,
    target_class: Option<TargetClass>,
    out: Option<PathBuf>,
    workers: Option<usize>,
    image: Option<PathBuf>,
    label: Option<usize>,
    size: Option<usize>,
    records: Option<PathBuf>,
    grid: Option<GridSpace>,
    preprocess: Option<PreprocessConfig>,
    metrics: Option<MetricConfig>,
}

impl FileConfig {
    fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    fn eval_config(&self, workers: Option<usize>, target: Option<TargetClass>) -> EvalConfig {
        EvalConfig {
            preprocess: self.preprocess.clone().unwrap_or_default(),
            metrics: self.metrics.clone().unwrap_or_default(),
            target_class: target.or(self.target_class).unwrap_or_default(),
            workers: workers.or(self.workers).unwrap_or(0),
        }
    }
}

fn arch(name: Option<&str>) -> Result<VitConfig> {
    match name.unwrap_or("vit-b16") {
        "vit-b16" | "vit_b16" | "vit_base_patch16_224" => Ok(VitConfig::vit_b16()),
        "toy" => Ok(VitConfig::toy()),
        path => {
            let text = fs::read_to_string(path).with_context(|| format!("reading model config {path}"))?;
            let cfg: VitConfig = serde_json::from_str(&text).with_context(|| format!("parsing model config {path}"))?;
            cfg.validate()?;
            Ok(cfg)
        }
    }
}

fn load_model(common: &Common, file: &FileConfig) -> Result<Vit> {
    let cfg = arch(common.arch.as_deref().or(file.arch.as_deref()))?;
    let weights = common
        .weights
        .as_ref()
        .or(file.weights.as_ref())
        .context("--weights is required")?;
    log::info!("loading {}", weights.display());
    Vit::load(weights, cfg).with_context(|| format!("loading weights {}", weights.display()))
}

fn pick<T: Clone>(flag: &[T], file: &Option<Vec<T>>, all: &[T]) -> Vec<T> {
    if !flag.is_empty() {
        flag.to_vec()
    } else {
        file.clone().unwrap_or_else(|| all.to_vec())
    }
}

fn out_dir(common: &Common, file: &FileConfig) -> Result<PathBuf> {
    let dir = common.out.clone().or(file.out.clone()).unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let file = FileConfig::load(args.common.config.as_deref())?;
    let model = load_model(&args.common, &file)?;
    let cfg = file.eval_config(args.common.workers, args.target_class);
    let manifest_path = args.manifest.or(file.manifest.clone()).context("--manifest is required")?;
    let manifest = load_manifest(&manifest_path, model.config().num_classes)?;
    let methods = pick(&args.cam, &file.cam, &CamMethod::ALL);
    let metrics = pick(&args.metric, &file.metric, &Metric::ALL);
    let astro = args.astro.or(file.astro.clone());
    let dir = out_dir(&args.common, &file)?;

    let outcome = run_eval(&model, &manifest, &cfg, astro.as_ref(), &methods, &metrics)?;
    let summary = outcome.summary(astro.as_ref(), cfg.target_class);
    write_records(&dir.join("records.csv"), &outcome.records)?;
    write_json(&dir.join("summary.json"), &summary)?;
    print!("{}", format_table(&summary.stats));
    println!(
        "{} of {} images evaluated, {} failed; wrote {}",
        summary.evaluated,
        summary.images,
        summary.failed,
        dir.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct GridSummary<'a> {
    cam: CamMethod,
    metric: Metric,
    combinations: usize,
    best: Option<&'a GridRow>,
    skipped: &'a [vita_core::eval::Failure],
}

fn cmd_grid(args: GridArgs) -> Result<()> {
    let file = FileConfig::load(args.common.config.as_deref())?;
    let model = load_model(&args.common, &file)?;
    let cfg = file.eval_config(args.common.workers, args.target_class);
    let manifest_path = args.manifest.or(file.manifest.clone()).context("--manifest is required")?;
    let manifest = load_manifest(&manifest_path, model.config().num_classes)?;
    let space = match (&args.grid, &file.grid) {
        (Some(p), _) => serde_json::from_str(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)
            .with_context(|| format!("parsing grid {}", p.display()))?,
        (None, Some(g)) => g.clone(),
        (None, None) => GridSpace::standard(),
    };
    let dir = out_dir(&args.common, &file)?;
    let mut summaries = Vec::new();
    let mut reports = Vec::new();
    for method in pick(&args.cam, &file.cam, &CamMethod::ALL) {
        for metric in pick(&args.metric, &file.metric, &Metric::ALL) {
            log::info!("grid search {method}/{metric} over {} combinations", space.len());
            let report = grid_search(&model, &manifest, &space, method, metric, &cfg)?;
            let path = dir.join(format!("grid_{method}_{metric}.csv"));
            write_grid(&path, &report.rows)?;
            if let Some(best) = report.rows.first() {
                println!(
                    "{method}/{metric}: best {} mean {}",
                    best.params(),
                    best.mean.map_or("-".into(), |m| format!("{m:.4}"))
                );
            }
            reports.push((method, metric, report));
        }
    }
    for (method, metric, report) in &reports {
        summaries.push(GridSummary {
            cam: *method,
            metric: *metric,
            combinations: report.rows.len(),
            best: report.rows.first(),
            skipped: &report.skipped,
        });
    }
    write_json(&dir.join("grid_summary.json"), &summaries)?;
    Ok(())
}

fn cmd_explain(args: ExplainArgs) -> Result<()> {
    let file = FileConfig::load(args.common.config.as_deref())?;
    let model = load_model(&args.common, &file)?;
    let image = args.image.or(file.image.clone()).context("--image is required")?;
    let astro = match args.astro {
        Some(p) => Some(p),
        None => match &file.astro {
            Some(AstroChoice::Fixed(p)) => Some(*p),
            Some(AstroChoice::Best) => bail!("explain needs explicit astro parameters, not \"best\""),
            None => None,
        },
    };
    let target = match args.target_class.or(file.target_class).unwrap_or_default() {
        TargetClass::Predicted => None,
        TargetClass::Label => Some(args.label.or(file.label).context("--target-class label needs --label")?),
    };
    let method = args
        .cam
        .or_else(|| file.cam.as_ref().and_then(|c| c.first().copied()))
        .unwrap_or(CamMethod::GradCam);
    let opts = ExplainOptions {
        method,
        astro,
        target,
        size: args.size.or(file.size).unwrap_or(224),
        preprocess: file.preprocess.clone().unwrap_or_default(),
        renormalize: file.metrics.as_ref().is_none_or(|m| m.renormalize_after_upsample),
    };
    let out = args
        .common
        .out
        .or(file.out.clone())
        .unwrap_or_else(|| PathBuf::from("explanation"));
    let written = explain_single(&model, &image, &opts, &out)?;
    println!(
        "predicted class {}, explained class {}; wrote {}, {}, {}",
        written.sidecar.predicted_class,
        written.sidecar.target_class,
        written.pgm.display(),
        written.raw.display(),
        written.json.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct StatsSummary {
    records: usize,
    stats: Vec<StatsRow>,
}

fn cmd_stats(args: StatsArgs) -> Result<()> {
    let file = FileConfig::load(args.config.as_deref())?;
    let path = args.records.or(file.records.clone()).context("--records is required")?;
    let records = read_records(&path).with_context(|| format!("reading {}", path.display()))?;
    let stats = stats_report(&records)?;
    print!("{}", format_table(&stats));
    if let Some(out) = args.out.or(file.out.clone()) {
        write_json(
            &out,
            &StatsSummary {
                records: records.len(),
                stats,
            },
        )?;
    }
    Ok(())
}

fn cmd_toy_weights(args: ToyArgs) -> Result<()> {
    let cfg = arch(Some(&args.arch))?;
    let weights = VitWeights::random(&cfg, args.seed, args.scale)?;
    weights.save(&args.out, &cfg)?;
    println!("wrote {} ({} tensors)", args.out.display(), cfg.expected_tensors().len());
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match Cli::parse().command {
        Command::Eval(a) => cmd_eval(a),
        Command::Gridsearch(a) => cmd_grid(a),
        Command::Explain(a) => cmd_explain(a),
        Command::Stats(a) => cmd_stats(a),
        Command::ToyWeights(a) => cmd_toy_weights(a),
    }
}
