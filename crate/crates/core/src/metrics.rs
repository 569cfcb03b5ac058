//! Heatmap alignment metrics (Spearman, Dice, SSIM), the one-tailed rank-sum
//! test, and the descriptive statistics used in reports.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::cam::Heatmap;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Spearman,
    Dsc,
    Ssim,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::Spearman, Metric::Dsc, Metric::Ssim];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Spearman => "spearman",
            Metric::Dsc => "dsc",
            Metric::Ssim => "ssim",
        }
    }

    /// Closed range the metric lives in.
    pub fn range(self) -> (f64, f64) {
        match self {
            Metric::Dsc => (0.0, 1.0),
            Metric::Spearman | Metric::Ssim => (-1.0, 1.0),
        }
    }

    pub fn compute(self, x: &Heatmap, y: &Heatmap, cfg: &MetricConfig) -> Result<f64> {
        match self {
            Metric::Spearman => {
                x.same_size(y)?;
                spearman(x.values(), y.values())
            }
            Metric::Dsc => dsc(x, y, cfg),
            Metric::Ssim => ssim(x, y, cfg),
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "spearman" => Ok(Metric::Spearman),
            "dsc" | "dice" => Ok(Metric::Dsc),
            "ssim" => Ok(Metric::Ssim),
            _ => Err(Error::InvalidParam(format!("unknown metric {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SsimMode {
    /// Mean of per-window SSIM under a Gaussian window.
    Windowed,
    /// One evaluation over the whole image.
    Global,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricConfig {
    pub dsc_threshold_percentile: f64,
    pub ssim_c1: f64,
    pub ssim_c2: f64,
    pub ssim_window: usize,
    pub ssim_sigma: f64,
    pub ssim_mode: SsimMode,
    /// Side length heatmaps are compared at; `None` compares at the CAM grid
    /// resolution.
    pub comparison_resolution: Option<usize>,
    /// Re-apply min-max normalization after bilinear upsampling.
    pub renormalize_after_upsample: bool,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            dsc_threshold_percentile: 50.0,
            ssim_c1: 0.01f64.powi(2),
            ssim_c2: 0.03f64.powi(2),
            ssim_window: 11,
            ssim_sigma: 1.5,
            ssim_mode: SsimMode::Windowed,
            comparison_resolution: Some(224),
            renormalize_after_upsample: true,
        }
    }
}

impl MetricConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParam(m));
        if !(self.dsc_threshold_percentile > 0.0 && self.dsc_threshold_percentile < 100.0) {
            return bad(format!(
                "dsc_threshold_percentile must lie in (0, 100), got {}",
                self.dsc_threshold_percentile
            ));
        }
        if !(self.ssim_c1 > 0.0 && self.ssim_c2 > 0.0) {
            return bad("SSIM constants must be positive".into());
        }
        if self.ssim_window.is_multiple_of(2) {
            return bad(format!("ssim_window must be odd, got {}", self.ssim_window));
        }
        if self.ssim_sigma <= 0.0 {
            return bad(format!("ssim_sigma must be positive, got {}", self.ssim_sigma));
        }
        if self.comparison_resolution == Some(0) {
            return bad("comparison_resolution must be positive".into());
        }
        Ok(())
    }
}

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap_or(Ordering::Equal));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && values[order[j]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j + 1) as f64 / 2.0;
        for &idx in &order[i..j] {
            ranks[idx] = avg;
        }
        i = j;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Pearson correlation of average ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::shape(format!(
            "spearman inputs differ in length: {} vs {}",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 2 {
        return Err(Error::InsufficientData("spearman needs at least 2 pairs".into()));
    }
    pearson(&average_ranks(x), &average_ranks(y))
        .ok_or_else(|| Error::Numeric("spearman is undefined for a constant input".into()))
}

/// Percentile with linear interpolation between order statistics.
pub fn percentile(values: &[f64], pct: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap_or(Ordering::Equal));
    let rank = pct / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (rank - lo as f64)
}

/// Pixels strictly above the map's own percentile threshold.
pub fn binarize(map: &Heatmap, pct: f64) -> Vec<bool> {
    let t = percentile(map.values(), pct);
    map.values().iter().map(|&v| v > t).collect()
}

/// Dice coefficient of the two binarized maps; two empty sets score 1.
pub fn dsc(x: &Heatmap, y: &Heatmap, cfg: &MetricConfig) -> Result<f64> {
    x.same_size(y)?;
    let a = binarize(x, cfg.dsc_threshold_percentile);
    let b = binarize(y, cfg.dsc_threshold_percentile);
    Ok(dice(&a, &b))
}

pub fn dice(a: &[bool], b: &[bool]) -> f64 {
    let inter = a.iter().zip(b).filter(|(p, q)| **p && **q).count();
    let total = a.iter().filter(|p| **p).count() + b.iter().filter(|q| **q).count();
    if total == 0 {
        1.0
    } else {
        2.0 * inter as f64 / total as f64
    }
}

fn ssim_formula(mx: f64, my: f64, vx: f64, vy: f64, cxy: f64, c1: f64, c2: f64) -> f64 {
    ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
}

/// Normalized 1-D Gaussian taps.
pub fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size / 2) as f64;
    let taps: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / s).collect()
}

/// Separable "valid" filtering of a `w x h` image.
fn filter_valid(img: &[f64], w: usize, h: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let ow = w - n + 1;
    let oh = h - n + 1;
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..n).map(|i| k[i] * img[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// SSIM with dynamic range 1.
pub fn ssim(x: &Heatmap, y: &Heatmap, cfg: &MetricConfig) -> Result<f64> {
    x.same_size(y)?;
    let (c1, c2) = (cfg.ssim_c1, cfg.ssim_c2);
    let (w, h) = (x.width(), x.height());
    match cfg.ssim_mode {
        SsimMode::Global => {
            let n = (w * h) as f64;
            let mx = x.values().iter().sum::<f64>() / n;
            let my = y.values().iter().sum::<f64>() / n;
            let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
            for (a, b) in x.values().iter().zip(y.values()) {
                vx += (a - mx) * (a - mx);
                vy += (b - my) * (b - my);
                cxy += (a - mx) * (b - my);
            }
            Ok(ssim_formula(mx, my, vx / n, vy / n, cxy / n, c1, c2))
        }
        SsimMode::Windowed => {
            let win = cfg.ssim_window;
            if win == 0 || win > w || win > h {
                return Err(Error::InvalidParam(format!(
                    "SSIM window {win} does not fit a {w}x{h} map"
                )));
            }
            let k = gaussian_kernel(win, cfg.ssim_sigma);
            let xs = x.values();
            let ys = y.values();
            let xx: Vec<f64> = xs.iter().map(|v| v * v).collect();
            let yy: Vec<f64> = ys.iter().map(|v| v * v).collect();
            let xy: Vec<f64> = xs.iter().zip(ys).map(|(a, b)| a * b).collect();
            let mu_x = filter_valid(xs, w, h, &k);
            let mu_y = filter_valid(ys, w, h, &k);
            let e_xx = filter_valid(&xx, w, h, &k);
            let e_yy = filter_valid(&yy, w, h, &k);
            let e_xy = filter_valid(&xy, w, h, &k);
            let total: f64 = (0..mu_x.len())
                .map(|i| {
                    let (mx, my) = (mu_x[i], mu_y[i]);
                    ssim_formula(
                        mx,
                        my,
                        e_xx[i] - mx * mx,
                        e_yy[i] - my * my,
                        e_xy[i] - mx * my,
                        c1,
                        c2,
                    )
                })
                .sum();
            Ok(total / mu_x.len() as f64)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RankSumMethod {
    Exact,
    Normal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankSumTest {
    /// Mann-Whitney U of the first sample.
    pub u: f64,
    /// P(U >= observed) under the null; small when `a` tends to exceed `b`.
    pub p_value: f64,
    pub method: RankSumMethod,
}

/// Samples at or below this size use the exact permutation distribution.
pub const EXACT_MAX_GROUP: usize = 8;

fn check_samples(a: &[f64], b: &[f64]) -> Result<()> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InsufficientData("rank-sum test needs two nonempty samples".into()));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::Numeric("rank-sum test input is not finite".into()));
    }
    Ok(())
}

/// One-tailed Wilcoxon rank-sum test of "a is stochastically greater than b".
/// Uses the exact distribution when the smaller sample has at most
/// [`EXACT_MAX_GROUP`] values, the tie-corrected normal approximation
/// otherwise.
pub fn wilcoxon_rank_sum_one_tailed(a: &[f64], b: &[f64]) -> Result<RankSumTest> {
    if a.len().min(b.len()) <= EXACT_MAX_GROUP {
        rank_sum_exact(a, b)
    } else {
        rank_sum_normal(a, b)
    }
}

fn pooled_ranks(a: &[f64], b: &[f64]) -> (Vec<f64>, f64) {
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let ranks = average_ranks(&pooled);
    let rank_sum_a: f64 = ranks[..a.len()].iter().sum();
    (ranks, rank_sum_a)
}

/// Exact one-tailed p from the permutation distribution of the rank sum,
/// ties included. Cost grows with `n * min(n1, n2)^2 * n`, so only small
/// groups should come here.
pub fn rank_sum_exact(a: &[f64], b: &[f64]) -> Result<RankSumTest> {
    check_samples(a, b)?;
    let (ranks, rank_sum_a) = pooled_ranks(a, b);
    let n1 = a.len() as f64;
    let u = rank_sum_a - n1 * (n1 + 1.0) / 2.0;

    // Doubled average ranks are integers.
    let doubled: Vec<usize> = ranks.iter().map(|r| (r * 2.0).round() as usize).collect();
    let a_is_smaller = a.len() <= b.len();
    let m = a.len().min(b.len());
    let observed: usize = if a_is_smaller {
        doubled[..a.len()].iter().sum()
    } else {
        doubled[a.len()..].iter().sum()
    };
    let max_sum: usize = {
        let mut d = doubled.clone();
        d.sort_unstable_by(|x, y| y.cmp(x));
        d[..m].iter().sum()
    };

    // ways[j][s]: number of size-j subsets with doubled rank sum s.
    let mut ways = vec![vec![0.0f64; max_sum + 1]; m + 1];
    ways[0][0] = 1.0;
    for &r in &doubled {
        for j in (1..=m).rev() {
            let (lower, upper) = ways.split_at_mut(j);
            let prev = &lower[j - 1];
            let cur = &mut upper[0];
            for s in (r..=max_sum).rev() {
                if prev[s - r] != 0.0 {
                    cur[s] += prev[s - r];
                }
            }
        }
    }
    let total: f64 = ways[m].iter().sum();
    let tail: f64 = if a_is_smaller {
        ways[m][observed..].iter().sum()
    } else {
        // a large <=> b's rank sum small
        ways[m][..=observed].iter().sum()
    };
    Ok(RankSumTest {
        u,
        p_value: (tail / total).clamp(0.0, 1.0),
        method: RankSumMethod::Exact,
    })
}

/// Normal approximation with tie correction and continuity correction.
pub fn rank_sum_normal(a: &[f64], b: &[f64]) -> Result<RankSumTest> {
    check_samples(a, b)?;
    let (_, rank_sum_a) = pooled_ranks(a, b);
    let n1 = a.len() as f64;
    let n2 = b.len() as f64;
    let n = n1 + n2;
    let u = rank_sum_a - n1 * (n1 + 1.0) / 2.0;

    let mut pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    pooled.sort_by(|x, y| x.partial_cmp(y).unwrap_or(Ordering::Equal));
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < pooled.len() {
        let mut j = i + 1;
        while j < pooled.len() && pooled[j] == pooled[i] {
            j += 1;
        }
        let t = (j - i) as f64;
        tie_term += t * t * t - t;
        i = j;
    }
    let var = n1 * n2 / 12.0 * ((n + 1.0) - tie_term / (n * (n - 1.0)));
    if var <= 0.0 {
        return Ok(RankSumTest {
            u,
            p_value: 1.0,
            method: RankSumMethod::Normal,
        });
    }
    let z = (u - n1 * n2 / 2.0 - 0.5) / var.sqrt();
    Ok(RankSumTest {
        u,
        p_value: 0.5 * libm::erfc(z / std::f64::consts::SQRT_2),
        method: RankSumMethod::Normal,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Describe {
    pub mean: f64,
    pub median: f64,
    /// Sample standard deviation (n - 1 denominator).
    pub sd: f64,
    pub n: usize,
}

pub fn describe(values: &[f64]) -> Result<Describe> {
    if values.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "need at least 2 values, got {}",
            values.len()
        )));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    Ok(Describe {
        mean,
        median: percentile(values, 50.0),
        sd: var.sqrt(),
        n: values.len(),
    })
}
