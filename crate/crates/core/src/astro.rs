//! The astrocytic linear layer.
//!
//! Each output neuron of a linear layer gets one astrocyte. The layer input is
//! presented `k + 1` times: an unmodulated pass at `t = 0` followed by `k`
//! modulated passes. Between passes every astrocyte looks at its neuron's
//! CLS-token output from the previous pass, moves an integer activity tracker
//! one step up (output at or above `phi`) or down (below `phi`), clamps it to
//! `[-tau, tau]`, and multiplies the neuron's accumulated weight scale by
//! `alpha` when the tracker sits at `+tau`, by `beta` at `-tau`, and by 1
//! otherwise. Only weights are scaled; the bias is left alone. The output of
//! the last pass is rescaled so that its mean per-token L2 norm matches the
//! unmodulated pass.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Row of the token matrix whose outputs drive the astrocytes.
pub const CLS_ROW: usize = 0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AstroParams {
    /// Number of modulated presentations.
    pub k: usize,
    /// Response speed: how many net active (inactive) steps before the
    /// astrocyte excites (inhibits).
    pub tau: u32,
    /// Activation threshold on the raw CLS output.
    pub phi: f64,
    /// Excitatory factor, `>= 1`.
    pub alpha: f64,
    /// Inhibitory factor, `0 < beta <= 1`. `beta = 1` is accepted so that the
    /// no-modulation configuration `alpha = beta = 1` is expressible.
    pub beta: f64,
}

impl AstroParams {
    pub fn new(k: usize, tau: u32, phi: f64, alpha: f64, beta: f64) -> Result<Self> {
        let p = Self {
            k,
            tau,
            phi,
            alpha,
            beta,
        };
        p.validate()?;
        Ok(p)
    }

    /// Parameters that leave the layer unchanged for any `k`.
    pub fn identity(k: usize) -> Self {
        Self {
            k,
            tau: 1,
            phi: 0.0,
            alpha: 1.0,
            beta: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.tau < 1 {
            return Err(Error::InvalidParam(format!("tau must be >= 1, got {}", self.tau)));
        }
        if !(self.alpha >= 1.0 && self.alpha.is_finite()) {
            return Err(Error::InvalidParam(format!(
                "alpha must be a finite value >= 1, got {}",
                self.alpha
            )));
        }
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return Err(Error::InvalidParam(format!(
                "beta must lie in (0, 1], got {}",
                self.beta
            )));
        }
        if self.phi.is_nan() {
            return Err(Error::InvalidParam("phi must not be NaN".into()));
        }
        Ok(())
    }
}

impl fmt::Display for AstroParams {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{},{},{},{},{}",
            self.k, self.tau, self.phi, self.alpha, self.beta
        )
    }
}

/// Parses `k,tau,phi,alpha,beta`.
impl FromStr for AstroParams {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        if parts.len() != 5 {
            return Err(Error::InvalidParam(format!(
                "expected k,tau,phi,alpha,beta but got {s:?}"
            )));
        }
        let bad = |name: &str, v: &str| Error::InvalidParam(format!("cannot parse {name} from {v:?}"));
        let k = parts[0].parse().map_err(|_| bad("k", parts[0]))?;
        let tau = parts[1].parse().map_err(|_| bad("tau", parts[1]))?;
        let phi = parts[2].parse().map_err(|_| bad("phi", parts[2]))?;
        let alpha = parts[3].parse().map_err(|_| bad("alpha", parts[3]))?;
        let beta = parts[4].parse().map_err(|_| bad("beta", parts[4]))?;
        Self::new(k, tau, phi, alpha, beta)
    }
}

/// Per-neuron iteration state.
#[derive(Debug, Clone, PartialEq)]
pub struct AstroState {
    pub activity: Vec<i32>,
    pub modulation: Vec<f64>,
    pub t: usize,
}

impl AstroState {
    pub fn new(neurons: usize) -> Self {
        Self {
            activity: vec![0; neurons],
            modulation: vec![1.0; neurons],
            t: 0,
        }
    }

    /// Advances one iteration from the previous pass's CLS outputs and
    /// returns the per-neuron factors applied at this step.
    pub fn step(&mut self, y_cls_prev: &[f64], params: &AstroParams) -> Vec<f64> {
        let mut factors = Vec::with_capacity(self.activity.len());
        for ((a, m), &y) in self
            .activity
            .iter_mut()
            .zip(self.modulation.iter_mut())
            .zip(y_cls_prev)
        {
            *a = update_activity(*a, y, params.phi, params.tau);
            let f = modulation_factor(*a, params.tau, params.alpha, params.beta);
            *m *= f;
            factors.push(f);
        }
        self.t += 1;
        factors
    }
}

/// One step of the activity tracker, clamped to `[-tau, tau]`. An output
/// exactly at the threshold counts as active.
pub fn update_activity(prev: i32, y_cls_prev: f64, phi: f64, tau: u32) -> i32 {
    let tau = tau as i32;
    let next = if y_cls_prev >= phi { prev + 1 } else { prev - 1 };
    next.clamp(-tau, tau)
}

pub fn modulation_factor(activity: i32, tau: u32, alpha: f64, beta: f64) -> f64 {
    let tau = tau as i32;
    if activity >= tau {
        alpha
    } else if activity <= -tau {
        beta
    } else {
        1.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub t: usize,
    pub y_cls: Vec<f64>,
    pub activity: Vec<i32>,
    pub factor: Vec<f64>,
    pub modulation: Vec<f64>,
    pub mean_token_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AstroTrace {
    pub records: Vec<TraceRecord>,
    pub mean_norm_initial: f64,
    pub mean_norm_final: f64,
}

impl AstroTrace {
    /// Rescaling ratio applied to the last pass.
    pub fn ratio(&self) -> f64 {
        if self.records.len() <= 1 {
            1.0
        } else {
            self.mean_norm_initial / self.mean_norm_final
        }
    }

    pub fn final_modulation(&self) -> Option<&[f64]> {
        self.records.last().map(|r| r.modulation.as_slice())
    }

    /// Writes one JSON object per iteration.
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        for r in &self.records {
            serde_json::to_writer(&mut out, r)?;
            out.push(b'\n');
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&out).map_err(|e| Error::io(path, e))
    }
}

/// Mean over rows of each row's L2 norm.
pub fn mean_token_norm(y: &Tensor) -> Result<f64> {
    let (rows, cols) = y.dims2()?;
    if rows == 0 {
        return Ok(0.0);
    }
    let total: f64 = y
        .data()
        .chunks_exact(cols.max(1))
        .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
        .sum();
    Ok(total / rows as f64)
}

/// Rescales `yk` so its mean per-token norm equals that of `y0`.
pub fn normalize_output(y0: &Tensor, yk: &Tensor) -> Result<Tensor> {
    if y0.shape() != yk.shape() {
        return Err(Error::shape(format!(
            "normalize_output shapes differ: {:?} vs {:?}",
            y0.shape(),
            yk.shape()
        )));
    }
    let target = mean_token_norm(y0)?;
    let current = mean_token_norm(yk)?;
    if current == 0.0 || !current.is_finite() {
        return Err(Error::Numeric(format!(
            "cannot rescale output with mean token norm {current}"
        )));
    }
    Ok(yk.scale(target / current))
}

/// `z * diag(m)` column-wise followed by the bias.
fn modulated_output(z: &Tensor, modulation: &[f64], bias: Option<&Tensor>) -> Result<Tensor> {
    let cols = modulation.len();
    let mut data = z.data().to_vec();
    for row in data.chunks_exact_mut(cols) {
        for (v, &m) in row.iter_mut().zip(modulation) {
            *v *= m;
        }
    }
    let y = Tensor::new(z.shape().to_vec(), data)?;
    match bias {
        Some(b) => y.add_row(b),
        None => Ok(y),
    }
}

/// Runs the astrocytic layer on `x` (`[tokens, d_in]`) with weights `[d_out,
/// d_in]` and optional bias `[d_out]`. Row 0 of `x` is the CLS token.
pub fn astro_linear_forward(
    x: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    params: &AstroParams,
) -> Result<(Tensor, AstroTrace)> {
    params.validate()?;
    let (tokens, _) = x.dims2()?;
    let (d_out, _) = weight.dims2()?;
    if tokens == 0 {
        return Err(Error::shape("astrocytic layer needs at least the CLS token"));
    }
    if let Some(b) = bias {
        if b.len() != d_out {
            return Err(Error::shape(format!(
                "bias length {} does not match {d_out} outputs",
                b.len()
            )));
        }
    }

    // (M W) x^T only scales columns of x W^T, so the product is formed once.
    let z = x.matmul_nt(weight)?;
    let y0 = match bias {
        Some(b) => z.add_row(b)?,
        None => z.clone(),
    };
    check_finite(&y0, 0)?;

    let mut state = AstroState::new(d_out);
    let norm0 = mean_token_norm(&y0)?;
    let mut trace = AstroTrace {
        records: vec![TraceRecord {
            t: 0,
            y_cls: y0.data()[CLS_ROW * d_out..(CLS_ROW + 1) * d_out].to_vec(),
            activity: state.activity.clone(),
            factor: vec![1.0; d_out],
            modulation: state.modulation.clone(),
            mean_token_norm: norm0,
        }],
        mean_norm_initial: norm0,
        mean_norm_final: norm0,
    };
    if params.k == 0 {
        return Ok((y0, trace));
    }

    let mut y = y0.clone();
    for t in 1..=params.k {
        let y_cls_prev = &y.data()[CLS_ROW * d_out..(CLS_ROW + 1) * d_out];
        let factor = state.step(y_cls_prev, params);
        y = modulated_output(&z, &state.modulation, bias)?;
        check_finite(&y, t)?;
        trace.records.push(TraceRecord {
            t,
            y_cls: y.data()[CLS_ROW * d_out..(CLS_ROW + 1) * d_out].to_vec(),
            activity: state.activity.clone(),
            factor,
            modulation: state.modulation.clone(),
            mean_token_norm: mean_token_norm(&y)?,
        });
    }
    trace.mean_norm_final = mean_token_norm(&y)?;
    let y_hat = normalize_output(&y0, &y).map_err(|e| match e {
        Error::Numeric(msg) => Error::Numeric(format!("iteration {}: {msg}", params.k)),
        other => other,
    })?;
    check_finite(&y_hat, params.k)?;
    Ok((y_hat, trace))
}

fn check_finite(y: &Tensor, t: usize) -> Result<()> {
    if y.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!(
            "non-finite astrocytic layer output at iteration {t}"
        )))
    }
}
