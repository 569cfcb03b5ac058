//! Grad-CAM and Grad-CAM++ on ViT token grids, plus heatmap resampling and
//! serialization.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::vit::{CaptureBundle, VitConfig};

/// Single-channel relevance map, row-major, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    width: usize,
    height: usize,
    values: Vec<f64>,
}

impl Heatmap {
    /// Min-max normalizes `values`. A constant (or non-finite) map becomes all
    /// zeros.
    pub fn normalized(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::shape(format!(
                "heatmap {width}x{height} needs {} values, got {}",
                width * height,
                values.len()
            )));
        }
        Ok(Self {
            width,
            height,
            values: min_max(values),
        })
    }

    /// Wraps values already in `[0, 1]`.
    pub fn from_unit_values(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::shape(format!(
                "heatmap {width}x{height} needs {} values, got {}",
                width * height,
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidParam(format!("heatmap value {v} outside [0, 1]")));
        }
        Ok(Self {
            width,
            height,
            values,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn same_size(&self, other: &Heatmap) -> Result<()> {
        if self.width != other.width || self.height != other.height {
            return Err(Error::shape(format!(
                "heatmap sizes differ: {}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )));
        }
        Ok(())
    }

    /// 8-bit binary PGM (`P5`).
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(
            self.values
                .iter()
                .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8),
        );
        out
    }

    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_pgm()).map_err(|e| Error::io(path, e))
    }

    /// `w x h` window with its top-left corner at `(x, y)`.
    pub fn crop(&self, x: usize, y: usize, w: usize, h: usize) -> Result<Heatmap> {
        if x + w > self.width || y + h > self.height {
            return Err(Error::shape(format!(
                "crop {w}x{h}+{x}+{y} exceeds {}x{}",
                self.width, self.height
            )));
        }
        let values = (y..y + h)
            .flat_map(|row| self.values[row * self.width + x..row * self.width + x + w].iter().copied())
            .collect();
        Ok(Heatmap {
            width: w,
            height: h,
            values,
        })
    }

    /// Little-endian f32 values, row-major.
    pub fn to_raw_bytes(&self) -> Vec<u8> {
        self.values
            .iter()
            .flat_map(|&v| (v as f32).to_le_bytes())
            .collect()
    }

    /// Raw little-endian f32 values plus a `{width, height}` JSON sidecar next
    /// to them (see [`sidecar_path`]).
    pub fn write_raw(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_raw_bytes()).map_err(|e| Error::io(path, e))?;
        let side = sidecar_path(path);
        let meta = RawSidecar {
            width: self.width,
            height: self.height,
        };
        fs::write(&side, serde_json::to_vec(&meta)?).map_err(|e| Error::io(&side, e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawSidecar {
    pub width: usize,
    pub height: usize,
}

/// `map.f32` -> `map.json`.
pub fn sidecar_path(raw: &Path) -> PathBuf {
    raw.with_extension("json")
}

/// Reads raw f32 values and their sidecar dims. Values are returned as
/// stored, without normalization.
pub fn read_raw(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let side = sidecar_path(path);
    let meta: RawSidecar = serde_json::from_slice(&fs::read(&side).map_err(|e| Error::io(&side, e))?)?;
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != meta.width * meta.height * 4 {
        return Err(Error::shape(format!(
            "{} holds {} bytes, sidecar says {}x{} f32 values",
            path.display(),
            bytes.len(),
            meta.width,
            meta.height
        )));
    }
    let values = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Ok((meta.width, meta.height, values))
}

fn min_max(mut values: Vec<f64>) -> Vec<f64> {
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let range = hi - lo;
    if !(range > 0.0 && range.is_finite()) {
        values.iter_mut().for_each(|v| *v = 0.0);
        return values;
    }
    for v in values.iter_mut() {
        *v = (*v - lo) / range;
    }
    values
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CamMethod {
    #[serde(rename = "gradcam")]
    GradCam,
    #[serde(rename = "gradcampp")]
    GradCamPlusPlus,
}

impl CamMethod {
    pub const ALL: [CamMethod; 2] = [CamMethod::GradCam, CamMethod::GradCamPlusPlus];

    pub fn name(self) -> &'static str {
        match self {
            CamMethod::GradCam => "gradcam",
            CamMethod::GradCamPlusPlus => "gradcampp",
        }
    }

    pub fn apply(self, sa: &SpatialActivation) -> Result<Heatmap> {
        match self {
            CamMethod::GradCam => grad_cam(sa),
            CamMethod::GradCamPlusPlus => grad_cam_pp(sa),
        }
    }
}

impl fmt::Display for CamMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CamMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gradcam" | "grad-cam" => Ok(CamMethod::GradCam),
            "gradcampp" | "gradcam++" | "grad-cam++" => Ok(CamMethod::GradCamPlusPlus),
            _ => Err(Error::InvalidParam(format!("unknown CAM method {s:?}"))),
        }
    }
}

/// Patch tokens arranged on the `g x g` grid, CLS removed. Both tensors are
/// `[g, g, channels]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialActivation {
    pub grid: Tensor,
    pub gradient: Tensor,
}

impl SpatialActivation {
    pub fn new(grid: Tensor, gradient: Tensor) -> Result<Self> {
        match grid.shape() {
            &[g1, g2, _] if g1 == g2 => {}
            s => return Err(Error::shape(format!("expected a [g, g, C] grid, got {s:?}"))),
        }
        if grid.shape() != gradient.shape() {
            return Err(Error::shape(format!(
                "activation {:?} and gradient {:?} differ",
                grid.shape(),
                gradient.shape()
            )));
        }
        Ok(Self { grid, gradient })
    }

    pub fn side(&self) -> usize {
        self.grid.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.grid.shape()[2]
    }

    /// `ReLU(sum_c w_c * A[.., c])`, min-max normalized.
    fn weighted_map(&self, weights: &[f64]) -> Result<Heatmap> {
        let g = self.side();
        let c = self.channels();
        let map = self
            .grid
            .data()
            .chunks_exact(c)
            .map(|a| a.iter().zip(weights).map(|(a, w)| a * w).sum::<f64>().max(0.0))
            .collect();
        Heatmap::normalized(g, g, map)
    }
}

/// Drops the CLS row and lays tokens `1..=g*g` out row-major on the grid.
pub fn tokens_to_grid(capture: &CaptureBundle, config: &VitConfig) -> Result<SpatialActivation> {
    let gradient = capture
        .gradient
        .as_ref()
        .ok_or_else(|| Error::Usage("capture bundle has no gradient; run backward first".into()))?;
    let g = config.grid_size();
    let (tokens, channels) = capture.activation.dims2()?;
    if tokens != 1 + g * g {
        return Err(Error::shape(format!(
            "{tokens} tokens do not form CLS + a {g}x{g} grid"
        )));
    }
    let to_grid = |t: &Tensor| -> Result<Tensor> {
        Tensor::new(vec![g, g, channels], t.data()[channels..].to_vec())
    };
    SpatialActivation::new(to_grid(&capture.activation)?, to_grid(gradient)?)
}

/// Channel weights are the spatial mean of the gradient.
pub fn grad_cam(sa: &SpatialActivation) -> Result<Heatmap> {
    let c = sa.channels();
    let positions = (sa.side() * sa.side()) as f64;
    let mut weights = vec![0.0; c];
    for g in sa.gradient.data().chunks_exact(c) {
        for (w, v) in weights.iter_mut().zip(g) {
            *w += v;
        }
    }
    weights.iter_mut().for_each(|w| *w /= positions);
    sa.weighted_map(&weights)
}

/// Channel weights from the exponential-score closed form:
/// `a = g^2 / (2 g^2 + sum(A) g^3)` per position (0 where the denominator
/// vanishes) and `w_c = sum a * ReLU(g)`.
pub fn grad_cam_pp(sa: &SpatialActivation) -> Result<Heatmap> {
    let c = sa.channels();
    let mut activation_sums = vec![0.0; c];
    for a in sa.grid.data().chunks_exact(c) {
        for (s, v) in activation_sums.iter_mut().zip(a) {
            *s += v;
        }
    }
    let mut weights = vec![0.0; c];
    for g in sa.gradient.data().chunks_exact(c) {
        for ch in 0..c {
            let g1 = g[ch];
            let g2 = g1 * g1;
            let g3 = g2 * g1;
            let denom = 2.0 * g2 + activation_sums[ch] * g3;
            let alpha = if denom != 0.0 { g2 / denom } else { 0.0 };
            weights[ch] += alpha * g1.max(0.0);
        }
    }
    sa.weighted_map(&weights)
}

/// Bilinear resize with half-pixel centres (align-corners = false), edges
/// clamped. Optionally re-applies min-max normalization.
pub fn upsample_bilinear(h: &Heatmap, width: usize, height: usize, renormalize: bool) -> Heatmap {
    let taps = |out: usize, inp: usize| -> Vec<(usize, usize, f64)> {
        let scale = inp as f64 / out as f64;
        (0..out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
                let i0 = (src.floor() as usize).min(inp - 1);
                let i1 = (i0 + 1).min(inp - 1);
                (i0, i1, src - i0 as f64)
            })
            .collect()
    };
    let xs = taps(width, h.width);
    let ys = taps(height, h.height);
    let mut values = Vec::with_capacity(width * height);
    for &(y0, y1, ly) in &ys {
        for &(x0, x1, lx) in &xs {
            let top = h.at(x0, y0) * (1.0 - lx) + h.at(x1, y0) * lx;
            let bottom = h.at(x0, y1) * (1.0 - lx) + h.at(x1, y1) * lx;
            values.push(top * (1.0 - ly) + bottom * ly);
        }
    }
    if renormalize {
        Heatmap {
            width,
            height,
            values: min_max(values),
        }
    } else {
        // convex combinations of [0, 1] values; clamp rounding spill
        values.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        Heatmap {
            width,
            height,
            values,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sa(g: usize, c: usize, act: Vec<f64>, grad: Vec<f64>) -> SpatialActivation {
        SpatialActivation::new(
            Tensor::new(vec![g, g, c], act).unwrap(),
            Tensor::new(vec![g, g, c], grad).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn grid_geometry() {
        for (cfg, g) in [(VitConfig::vit_b16(), 14), (VitConfig::toy(), 3)] {
            let tokens = cfg.num_tokens();
            let act = Tensor::new(
                vec![tokens, 2],
                (0..tokens).flat_map(|t| [t as f64, -(t as f64)]).collect(),
            )
            .unwrap();
            let bundle = CaptureBundle {
                logits: Tensor::zeros(&[1]),
                activation: act.clone(),
                gradient: Some(act),
            };
            let s = tokens_to_grid(&bundle, &cfg).unwrap();
            assert_eq!(s.grid.shape(), &[g, g, 2]);
            assert_eq!(s.grid.data()[0], 1.0);
            assert_eq!(s.gradient.data()[1], -1.0);
            assert_eq!(s.grid.data()[2 * (g * g - 1)], (g * g) as f64);
        }
    }

    #[test]
    fn grid_rejects_bad_counts_and_missing_gradient() {
        let cfg = VitConfig::toy();
        let mut bundle = CaptureBundle {
            logits: Tensor::zeros(&[1]),
            activation: Tensor::zeros(&[10, 4]),
            gradient: None,
        };
        assert!(matches!(tokens_to_grid(&bundle, &cfg), Err(Error::Usage(_))));
        bundle.activation = Tensor::zeros(&[11, 4]);
        bundle.gradient = Some(Tensor::zeros(&[11, 4]));
        assert!(matches!(tokens_to_grid(&bundle, &cfg), Err(Error::Shape(_))));
    }

    #[test]
    fn zero_gradient_gives_zero_maps() {
        let s = sa(2, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0], vec![0.0; 8]);
        assert_eq!(grad_cam(&s).unwrap().values(), &[0.0; 4]);
        assert_eq!(grad_cam_pp(&s).unwrap().values(), &[0.0; 4]);
    }

    #[test]
    fn unit_gradient_reproduces_activation_pattern() {
        let act = vec![0.0, 1.0, 2.0, 1.0, 3.0, 1.0, 2.0, 1.0, 0.0];
        let s = sa(3, 1, act.clone(), vec![1.0; 9]);
        let h = grad_cam(&s).unwrap();
        let expected: Vec<f64> = act.iter().map(|v| v / 3.0).collect();
        assert_eq!(h.values(), expected.as_slice());
    }

    /// Weighted-sum oracle written against explicit (y, x, c) indexing.
    fn scalar_cam(act: &[f64], g: usize, c: usize, weights: &[f64]) -> Vec<f64> {
        let mut raw = vec![0.0; g * g];
        for y in 0..g {
            for x in 0..g {
                let mut s = 0.0;
                for ch in 0..c {
                    s += weights[ch] * act[(y * g + x) * c + ch];
                }
                raw[y * g + x] = if s > 0.0 { s } else { 0.0 };
            }
        }
        let lo = raw.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        raw.iter().map(|v| if hi > lo { (v - lo) / (hi - lo) } else { 0.0 }).collect()
    }

    #[test]
    fn grad_cam_two_by_two_hand_case() {
        let act = vec![1.0, 0.5, -1.0, 2.0, 0.0, 1.0, 3.0, -2.0];
        let grad = vec![0.2, -0.4, 0.6, 0.0, -0.2, 0.4, 0.2, 0.8];
        // per-channel mean gradient: c0 = 0.8/4, c1 = 0.8/4
        let w = [0.2, 0.2];
        let expected = scalar_cam(&act, 2, 2, &w);
        let h = grad_cam(&sa(2, 2, act, grad)).unwrap();
        for (a, b) in h.values().iter().zip(&expected) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn grad_cam_pp_two_by_two_hand_case() {
        let act = vec![1.0, 2.0, 0.5, 3.0];
        let grad = vec![0.5, -1.0, 2.0, 0.25];
        let sum_a: f64 = act.iter().sum();
        let w: f64 = grad
            .iter()
            .map(|&g: &f64| {
                let denom = 2.0 * g.powi(2) + sum_a * g.powi(3);
                let a = if denom != 0.0 { g.powi(2) / denom } else { 0.0 };
                a * g.max(0.0)
            })
            .sum();
        let expected = scalar_cam(&act, 2, 1, &[w]);
        let h = grad_cam_pp(&sa(2, 1, act, grad)).unwrap();
        for (a, b) in h.values().iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(h.values().contains(&1.0) && h.values().contains(&0.0));
    }

    #[test]
    fn grad_cam_pp_uniform_inputs_are_degenerate() {
        let s = sa(3, 2, vec![0.7; 18], vec![0.3; 18]);
        assert_eq!(grad_cam_pp(&s).unwrap().values(), &[0.0; 9]);
    }

    #[test]
    fn single_position_grids_agree() {
        let s = sa(1, 3, vec![1.0, -2.0, 0.5], vec![0.3, 0.1, -0.7]);
        assert_eq!(grad_cam(&s).unwrap(), grad_cam_pp(&s).unwrap());
    }

    #[test]
    fn upsample_constant_and_single_pixel() {
        let c = Heatmap::from_unit_values(2, 2, vec![0.4; 4]).unwrap();
        let up = upsample_bilinear(&c, 5, 5, false);
        assert!(up.values().iter().all(|&v| (v - 0.4).abs() < 1e-15));
        let one = Heatmap::from_unit_values(1, 1, vec![1.0]).unwrap();
        let up = upsample_bilinear(&one, 4, 3, false);
        assert_eq!(up.values(), &[1.0; 12]);
    }

    #[test]
    fn upsample_checkerboard_matches_hand_weights() {
        // Output samples along each axis sit at source coords
        // -0.25 (clamped to 0), 0.25, 0.75, 1.25 (clamped to 1).
        let h = Heatmap::from_unit_values(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let up = upsample_bilinear(&h, 4, 4, true);
        let expected = [
            1.0, 0.75, 0.25, 0.0, //
            0.75, 0.625, 0.375, 0.25, //
            0.25, 0.375, 0.625, 0.75, //
            0.0, 0.25, 0.75, 1.0,
        ];
        assert_eq!(up.values(), &expected);
    }

    #[test]
    fn pgm_format() {
        let h = Heatmap::from_unit_values(3, 1, vec![0.0, 0.5, 1.0]).unwrap();
        let bytes = h.to_pgm();
        assert!(bytes.starts_with(b"P5\n3 1\n255\n"));
        assert_eq!(&bytes[bytes.len() - 3..], &[0, 128, 255]);
    }

    #[test]
    fn raw_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("map.f32");
        let h = Heatmap::from_unit_values(2, 3, vec![0.0, 0.25, 0.5, 0.75, 1.0, 0.125]).unwrap();
        h.write_raw(&path).unwrap();
        assert!(dir.path().join("map.json").exists());
        let (w, ht, v) = read_raw(&path).unwrap();
        assert_eq!((w, ht), (2, 3));
        assert_eq!(v, h.values());
    }

    #[test]
    fn method_names_parse() {
        for m in CamMethod::ALL {
            assert_eq!(m.name().parse::<CamMethod>().unwrap(), m);
        }
        assert!("scorecam".parse::<CamMethod>().is_err());
    }

    fn spatial(g: usize, c: usize) -> impl Strategy<Value = SpatialActivation> {
        (
            prop::collection::vec(-2.0f64..2.0, g * g * c),
            prop::collection::vec(-1.0f64..1.0, g * g * c),
        )
            .prop_map(move |(a, d)| sa(g, c, a, d))
    }

    proptest! {
        #[test]
        fn maps_are_unit_range(s in spatial(3, 4)) {
            for m in CamMethod::ALL {
                let h = m.apply(&s).unwrap();
                prop_assert!(h.values().iter().all(|v| (0.0..=1.0).contains(v)));
                let constant = h.values().iter().all(|&v| v == 0.0);
                prop_assert!(constant || (h.values().contains(&0.0) && h.values().contains(&1.0)));
            }
        }

        #[test]
        fn grad_cam_ignores_positive_gradient_scale(s in spatial(3, 4), k in 0.01f64..100.0) {
            let scaled = SpatialActivation::new(s.grid.clone(), s.gradient.scale(k)).unwrap();
            let a = grad_cam(&s).unwrap();
            let b = grad_cam(&scaled).unwrap();
            for (x, y) in a.values().iter().zip(b.values()) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }

        #[test]
        fn upsampled_maps_stay_in_range(s in spatial(3, 2), w in 3usize..40, h in 3usize..40) {
            let map = grad_cam(&s).unwrap();
            for renorm in [false, true] {
                let up = upsample_bilinear(&map, w, h, renorm);
                prop_assert_eq!(up.values().len(), w * h);
                prop_assert!(up.values().iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }
}
