//! Exhaustive search over astro parameter grids.

use std::cmp::Ordering;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::astro::AstroParams;
use crate::cam::CamMethod;
use crate::error::{Error, Result};
use crate::eval::{prepare, score, spatial_activation, EvalConfig, Failure, Prepared};
use crate::manifest::ManifestEntry;
use crate::metrics::Metric;
use crate::vit::Vit;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpace {
    pub k: Vec<usize>,
    pub tau: Vec<u32>,
    pub phi: Vec<f64>,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
}

impl GridSpace {
    /// k in {4,6,8}, tau in {1,2,3}, phi in {-0.5,-0.2,0,0.2,0.5},
    /// alpha in {1.05,1.2,1.5}, beta in {0.005,0.05,0.25}.
    pub fn standard() -> Self {
        Self {
            k: vec![4, 6, 8],
            tau: vec![1, 2, 3],
            phi: vec![-0.5, -0.2, 0.0, 0.2, 0.5],
            alpha: vec![1.05, 1.2, 1.5],
            beta: vec![0.005, 0.05, 0.25],
        }
    }

    pub fn single(p: AstroParams) -> Self {
        Self {
            k: vec![p.k],
            tau: vec![p.tau],
            phi: vec![p.phi],
            alpha: vec![p.alpha],
            beta: vec![p.beta],
        }
    }

    pub fn len(&self) -> usize {
        self.k.len() * self.tau.len() * self.phi.len() * self.alpha.len() * self.beta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Every combination, varying `beta` fastest and `k` slowest.
    pub fn combinations(&self) -> Result<Vec<AstroParams>> {
        for (name, n) in [
            ("k", self.k.len()),
            ("tau", self.tau.len()),
            ("phi", self.phi.len()),
            ("alpha", self.alpha.len()),
            ("beta", self.beta.len()),
        ] {
            if n == 0 {
                return Err(Error::InvalidParam(format!("grid list {name} is empty")));
            }
        }
        let mut out = Vec::with_capacity(self.len());
        for &k in &self.k {
            for &tau in &self.tau {
                for &phi in &self.phi {
                    for &alpha in &self.alpha {
                        for &beta in &self.beta {
                            out.push(AstroParams::new(k, tau, phi, alpha, beta)?);
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub rank: usize,
    pub k: usize,
    pub tau: u32,
    pub phi: f64,
    pub alpha: f64,
    pub beta: f64,
    /// Mean metric over the images that evaluated; empty if none did.
    pub mean: Option<f64>,
    pub evaluated: usize,
    pub failed: usize,
    /// First per-image error for this combination.
    pub error: Option<String>,
}

impl GridRow {
    pub fn params(&self) -> AstroParams {
        AstroParams {
            k: self.k,
            tau: self.tau,
            phi: self.phi,
            alpha: self.alpha,
            beta: self.beta,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridReport {
    pub rows: Vec<GridRow>,
    /// Images that could not be loaded or explained at baseline.
    pub skipped: Vec<Failure>,
}

/// Mean descending (missing means last), then fewer iterations, then the
/// remaining parameters in ascending order.
pub fn rank_order(a: &GridRow, b: &GridRow) -> Ordering {
    let by_mean = match (a.mean, b.mean) {
        (Some(x), Some(y)) => y.total_cmp(&x),
        (Some(_), None) => Ordering::Less,
        (None, Some(_)) => Ordering::Greater,
        (None, None) => Ordering::Equal,
    };
    by_mean
        .then(a.k.cmp(&b.k))
        .then(a.tau.cmp(&b.tau))
        .then(a.phi.total_cmp(&b.phi))
        .then(a.alpha.total_cmp(&b.alpha))
        .then(a.beta.total_cmp(&b.beta))
}

/// Evaluates the astro metric for every combination over the manifest and
/// ranks combinations by their mean. A failing image counts against its
/// combination only.
pub fn grid_search(
    model: &Vit,
    manifest: &[ManifestEntry],
    space: &GridSpace,
    method: CamMethod,
    metric: Metric,
    cfg: &EvalConfig,
) -> Result<GridReport> {
    cfg.validate(model)?;
    let combos = space.combinations()?;
    if manifest.is_empty() {
        return Err(Error::InsufficientData("grid search needs a nonempty manifest".into()));
    }
    let pool = cfg.pool()?;

    let prepared: Vec<Result<Prepared>> = pool.install(|| {
        manifest
            .par_iter()
            .map(|e| prepare(model, e, cfg).map(|(p, _)| p))
            .collect()
    });
    let mut images = Vec::new();
    let mut skipped = Vec::new();
    for (entry, p) in manifest.iter().zip(prepared) {
        match p {
            Ok(p) => images.push(p),
            Err(e) => {
                log::warn!("skipping {}: {e}", entry.id);
                skipped.push(Failure {
                    image: entry.id.clone(),
                    reason: e.to_string(),
                });
            }
        }
    }

    let n = images.len();
    let jobs: Vec<(usize, usize)> = (0..combos.len())
        .flat_map(|c| (0..n).map(move |i| (c, i)))
        .collect();
    let values: Vec<Result<f64>> = pool.install(|| {
        jobs.par_iter()
            .map(|&(c, i)| {
                let img = &images[i];
                let sa = spatial_activation(model, &img.image, Some(&combos[c]), img.target)?;
                score(method, metric, &sa, &img.truth, &cfg.metrics)
            })
            .collect()
    });

    let mut rows: Vec<GridRow> = combos
        .iter()
        .enumerate()
        .map(|(c, p)| {
            let per_image = &values[c * n..(c + 1) * n];
            let ok: Vec<f64> = per_image.iter().filter_map(|v| v.as_ref().ok().copied()).collect();
            let error = per_image
                .iter()
                .zip(&images)
                .find_map(|(v, img)| v.as_ref().err().map(|e| format!("{}: {e}", img.id)));
            GridRow {
                rank: 0,
                k: p.k,
                tau: p.tau,
                phi: p.phi,
                alpha: p.alpha,
                beta: p.beta,
                mean: (!ok.is_empty()).then(|| ok.iter().sum::<f64>() / ok.len() as f64),
                evaluated: ok.len(),
                failed: n - ok.len(),
                error,
            }
        })
        .collect();
    rows.sort_by(rank_order);
    for (i, r) in rows.iter_mut().enumerate() {
        r.rank = i + 1;
    }
    Ok(GridReport { rows, skipped })
}

pub fn write_grid(path: &Path, rows: &[GridRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_grid(path: &Path) -> Result<Vec<GridRow>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let rows = rdr.deserialize().collect::<std::result::Result<Vec<GridRow>, _>>()?;
    Ok(rows)
}
