//! Vision Transformer forward pass with a gradient-capture point and an
//! optional astrocytic attention projection in block 0.
//!
//! Blocks before the capture block run eagerly. The capture block's input
//! (the residual stream entering its first layer norm) becomes a tape leaf,
//! and the remaining blocks, the final norm and the head are recorded so the
//! class score can be differentiated with respect to that activation.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::astro::{astro_linear_forward, AstroParams, AstroTrace};
use crate::container::{self, Entry};
use crate::error::{Error, Result};
use crate::tape::{Eager, Ops, Tape, Var};
use crate::tensor::Tensor;

pub const IN_CHANNELS: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VitConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub num_blocks: usize,
    pub mlp_ratio: f64,
    pub num_classes: usize,
    pub ln_eps: f64,
    /// Block whose input is captured for CAM. Defaults to the last block.
    #[serde(default)]
    pub capture_block: Option<usize>,
}

impl VitConfig {
    /// ViT-B/16 at 224 px with the 1000 ImageNet classes.
    pub fn vit_b16() -> Self {
        Self {
            image_size: 224,
            patch_size: 16,
            embed_dim: 768,
            num_heads: 12,
            num_blocks: 12,
            mlp_ratio: 4.0,
            num_classes: 1000,
            ln_eps: 1e-6,
            capture_block: None,
        }
    }

    /// Two blocks over a 3x3 patch grid; small enough for finite differences.
    pub fn toy() -> Self {
        Self {
            image_size: 9,
            patch_size: 3,
            embed_dim: 8,
            num_heads: 2,
            num_blocks: 2,
            mlp_ratio: 2.0,
            num_classes: 5,
            ln_eps: 1e-6,
            capture_block: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParam(m));
        if self.patch_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return bad(format!(
                "image_size {} is not a multiple of patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.num_heads == 0 || !self.embed_dim.is_multiple_of(self.num_heads) {
            return bad(format!(
                "embed_dim {} is not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            ));
        }
        if self.num_blocks < 2 {
            return bad(format!("num_blocks must be >= 2, got {}", self.num_blocks));
        }
        let hidden = self.embed_dim as f64 * self.mlp_ratio;
        if hidden < 1.0 || hidden.fract() != 0.0 {
            return bad(format!(
                "embed_dim * mlp_ratio must be a positive integer, got {hidden}"
            ));
        }
        if self.num_classes == 0 {
            return bad("num_classes must be positive".into());
        }
        if self.ln_eps <= 0.0 {
            return bad(format!("ln_eps must be > 0, got {}", self.ln_eps));
        }
        let c = self.capture_block();
        if c == 0 || c >= self.num_blocks {
            return bad(format!(
                "capture_block must lie in 1..{}, got {c}",
                self.num_blocks
            ));
        }
        Ok(())
    }

    pub fn grid_size(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid_size() * self.grid_size()
    }

    pub fn num_tokens(&self) -> usize {
        1 + self.num_patches()
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.embed_dim as f64 * self.mlp_ratio) as usize
    }

    pub fn capture_block(&self) -> usize {
        self.capture_block.unwrap_or(self.num_blocks.saturating_sub(1))
    }

    /// Every container entry name with its expected dims, in canonical order.
    pub fn expected_tensors(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.embed_dim;
        let p = self.patch_size;
        let h = self.mlp_hidden();
        let mut out = vec![
            ("cls_token".to_string(), vec![1, 1, d]),
            ("pos_embed".to_string(), vec![1, self.num_tokens(), d]),
            ("patch_embed.proj.weight".to_string(), vec![d, IN_CHANNELS, p, p]),
            ("patch_embed.proj.bias".to_string(), vec![d]),
        ];
        for i in 0..self.num_blocks {
            let b = |s: &str| format!("blocks.{i}.{s}");
            out.extend([
                (b("norm1.weight"), vec![d]),
                (b("norm1.bias"), vec![d]),
                (b("attn.qkv.weight"), vec![3 * d, d]),
                (b("attn.qkv.bias"), vec![3 * d]),
                (b("attn.proj.weight"), vec![d, d]),
                (b("attn.proj.bias"), vec![d]),
                (b("norm2.weight"), vec![d]),
                (b("norm2.bias"), vec![d]),
                (b("mlp.fc1.weight"), vec![h, d]),
                (b("mlp.fc1.bias"), vec![h]),
                (b("mlp.fc2.weight"), vec![d, h]),
                (b("mlp.fc2.bias"), vec![d]),
            ]);
        }
        out.extend([
            ("norm.weight".to_string(), vec![d]),
            ("norm.bias".to_string(), vec![d]),
            ("head.weight".to_string(), vec![self.num_classes, d]),
            ("head.bias".to_string(), vec![self.num_classes]),
        ]);
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights {
    pub norm1_weight: Tensor,
    pub norm1_bias: Tensor,
    pub qkv_weight: Tensor,
    pub qkv_bias: Tensor,
    pub proj_weight: Tensor,
    pub proj_bias: Tensor,
    pub norm2_weight: Tensor,
    pub norm2_bias: Tensor,
    pub fc1_weight: Tensor,
    pub fc1_bias: Tensor,
    pub fc2_weight: Tensor,
    pub fc2_bias: Tensor,
}

/// All learned parameters. Matrices are stored `[out, in]`; the patch kernel
/// is flattened to `[embed_dim, 3 * patch * patch]` in `(channel, row, col)`
/// order and the positional table to `[tokens, embed_dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct VitWeights {
    pub patch_weight: Tensor,
    pub patch_bias: Tensor,
    pub cls_token: Tensor,
    pub pos_embed: Tensor,
    pub blocks: Vec<BlockWeights>,
    pub norm_weight: Tensor,
    pub norm_bias: Tensor,
    pub head_weight: Tensor,
    pub head_bias: Tensor,
}

impl VitWeights {
    /// Builds weights from named tensors, checking names and exact dims.
    pub fn from_entries(entries: Vec<Entry>, config: &VitConfig) -> Result<Self> {
        config.validate()?;
        let mut by_name: std::collections::HashMap<String, Entry> =
            entries.into_iter().map(|e| (e.name.clone(), e)).collect();
        let mut take = |name: &str, dims: &[usize], as_shape: &[usize]| -> Result<Tensor> {
            let e = by_name.remove(name).ok_or_else(|| Error::Load {
                entry: name.to_string(),
                reason: "missing tensor".into(),
            })?;
            if e.dims != dims {
                return Err(Error::Load {
                    entry: name.to_string(),
                    reason: format!("expected dims {dims:?}, found {:?}", e.dims),
                });
            }
            Tensor::new(
                as_shape.to_vec(),
                e.values.into_iter().map(f64::from).collect(),
            )
        };

        let d = config.embed_dim;
        let p = config.patch_size;
        let h = config.mlp_hidden();
        let t = config.num_tokens();
        let cls_token = take("cls_token", &[1, 1, d], &[d])?;
        let pos_embed = take("pos_embed", &[1, t, d], &[t, d])?;
        let patch_weight = take(
            "patch_embed.proj.weight",
            &[d, IN_CHANNELS, p, p],
            &[d, IN_CHANNELS * p * p],
        )?;
        let patch_bias = take("patch_embed.proj.bias", &[d], &[d])?;
        let mut blocks = Vec::with_capacity(config.num_blocks);
        for i in 0..config.num_blocks {
            let mut get = |s: &str, dims: &[usize]| take(&format!("blocks.{i}.{s}"), dims, dims);
            blocks.push(BlockWeights {
                norm1_weight: get("norm1.weight", &[d])?,
                norm1_bias: get("norm1.bias", &[d])?,
                qkv_weight: get("attn.qkv.weight", &[3 * d, d])?,
                qkv_bias: get("attn.qkv.bias", &[3 * d])?,
                proj_weight: get("attn.proj.weight", &[d, d])?,
                proj_bias: get("attn.proj.bias", &[d])?,
                norm2_weight: get("norm2.weight", &[d])?,
                norm2_bias: get("norm2.bias", &[d])?,
                fc1_weight: get("mlp.fc1.weight", &[h, d])?,
                fc1_bias: get("mlp.fc1.bias", &[h])?,
                fc2_weight: get("mlp.fc2.weight", &[d, h])?,
                fc2_bias: get("mlp.fc2.bias", &[d])?,
            });
        }
        let norm_weight = take("norm.weight", &[d], &[d])?;
        let norm_bias = take("norm.bias", &[d], &[d])?;
        let head_weight = take("head.weight", &[config.num_classes, d], &[config.num_classes, d])?;
        let head_bias = take("head.bias", &[config.num_classes], &[config.num_classes])?;
        if !by_name.is_empty() {
            let mut extra: Vec<_> = by_name.keys().cloned().collect();
            extra.sort();
            log::debug!("ignoring {} unused container entries: {extra:?}", extra.len());
        }
        let w = Self {
            patch_weight,
            patch_bias,
            cls_token,
            pos_embed,
            blocks,
            norm_weight,
            norm_bias,
            head_weight,
            head_bias,
        };
        if let Some(name) = w.first_non_finite(config) {
            return Err(Error::Load {
                entry: name,
                reason: "contains non-finite values".into(),
            });
        }
        Ok(w)
    }

    pub fn load(path: &Path, config: &VitConfig) -> Result<Self> {
        Self::from_entries(container::read(path)?, config)
    }

    /// Named tensors in canonical order and container dims, narrowed to f32.
    pub fn to_entries(&self, config: &VitConfig) -> Vec<Entry> {
        config
            .expected_tensors()
            .into_iter()
            .zip(self.tensors())
            .map(|((name, dims), t)| {
                Entry::new(name, dims, t.data().iter().map(|&v| v as f32).collect())
            })
            .collect()
    }

    pub fn save(&self, path: &Path, config: &VitConfig) -> Result<()> {
        container::write(path, &self.to_entries(config))
    }

    /// Tensors in the same order as [`VitConfig::expected_tensors`].
    fn tensors(&self) -> Vec<&Tensor> {
        let mut out = vec![
            &self.cls_token,
            &self.pos_embed,
            &self.patch_weight,
            &self.patch_bias,
        ];
        for b in &self.blocks {
            out.extend([
                &b.norm1_weight,
                &b.norm1_bias,
                &b.qkv_weight,
                &b.qkv_bias,
                &b.proj_weight,
                &b.proj_bias,
                &b.norm2_weight,
                &b.norm2_bias,
                &b.fc1_weight,
                &b.fc1_bias,
                &b.fc2_weight,
                &b.fc2_bias,
            ]);
        }
        out.extend([
            &self.norm_weight,
            &self.norm_bias,
            &self.head_weight,
            &self.head_bias,
        ]);
        out
    }

    fn first_non_finite(&self, config: &VitConfig) -> Option<String> {
        config
            .expected_tensors()
            .into_iter()
            .zip(self.tensors())
            .find(|(_, t)| !t.is_finite())
            .map(|((name, _), _)| name)
    }

    /// Seeded random weights, f32-representable so they survive a container
    /// round trip unchanged. Norm scales are centred on 1.
    pub fn random(config: &VitConfig, seed: u64, scale: f64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let entries = config
            .expected_tensors()
            .into_iter()
            .map(|(name, dims)| {
                let n: usize = dims.iter().product();
                let is_norm_scale = name.ends_with("norm1.weight")
                    || name.ends_with("norm2.weight")
                    || name == "norm.weight";
                let values = (0..n)
                    .map(|_| {
                        let v = rng.gen_range(-1.0..1.0) * scale;
                        (if is_norm_scale { 1.0 + v } else { v }) as f32
                    })
                    .collect();
                Entry::new(name, dims, values)
            })
            .collect();
        Self::from_entries(entries, config)
    }

    pub fn zeros(config: &VitConfig) -> Result<Self> {
        let entries = config
            .expected_tensors()
            .into_iter()
            .map(|(name, dims)| {
                let n = dims.iter().product();
                Entry::new(name, dims, vec![0.0; n])
            })
            .collect();
        Self::from_entries(entries, config)
    }
}

/// Result of a forward pass with a recorded suffix.
pub struct ForwardPass<'w> {
    tape: Tape<'w>,
    target: Var,
    logits_var: Var,
    logits: Tensor,
    astro_trace: Option<AstroTrace>,
}

impl ForwardPass<'_> {
    /// Class scores, shape `[num_classes]`.
    pub fn logits(&self) -> &Tensor {
        &self.logits
    }

    /// Residual stream entering the capture block, `[tokens, embed_dim]`.
    pub fn activation(&self) -> Result<&Tensor> {
        self.tape.value(self.target)
    }

    pub fn astro_trace(&self) -> Option<&AstroTrace> {
        self.astro_trace.as_ref()
    }

    /// d logits[class] / d activation.
    pub fn gradient(&self, class: usize) -> Result<Tensor> {
        self.tape.grad_of_element(self.logits_var, class, self.target)
    }

    /// Bundle without gradient.
    pub fn bundle(&self) -> Result<CaptureBundle> {
        Ok(CaptureBundle {
            logits: self.logits.clone(),
            activation: self.activation()?.clone(),
            gradient: None,
        })
    }

    /// Bundle with the gradient of `logits[class]`.
    pub fn capture(&self, class: usize) -> Result<CaptureBundle> {
        Ok(CaptureBundle {
            gradient: Some(self.gradient(class)?),
            ..self.bundle()?
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaptureBundle {
    pub logits: Tensor,
    pub activation: Tensor,
    pub gradient: Option<Tensor>,
}

/// A configured model with its weights.
#[derive(Debug, Clone)]
pub struct Vit {
    config: VitConfig,
    weights: VitWeights,
}

impl Vit {
    pub fn new(config: VitConfig, weights: VitWeights) -> Result<Self> {
        config.validate()?;
        if weights.blocks.len() != config.num_blocks {
            return Err(Error::shape(format!(
                "weights have {} blocks, config expects {}",
                weights.blocks.len(),
                config.num_blocks
            )));
        }
        Ok(Self { config, weights })
    }

    pub fn load(path: &Path, config: VitConfig) -> Result<Self> {
        let weights = VitWeights::load(path, &config)?;
        Self::new(config, weights)
    }

    pub fn config(&self) -> &VitConfig {
        &self.config
    }

    pub fn weights(&self) -> &VitWeights {
        &self.weights
    }

    /// Patch projection plus CLS token and positional embeddings.
    pub fn patchify_embed(&self, image: &Tensor) -> Result<Tensor> {
        let cfg = &self.config;
        let s = cfg.image_size;
        if image.shape() != [IN_CHANNELS, s, s] {
            return Err(Error::shape(format!(
                "expected image of shape [3, {s}, {s}], got {:?}",
                image.shape()
            )));
        }
        let p = cfg.patch_size;
        let g = cfg.grid_size();
        let patch_len = IN_CHANNELS * p * p;
        let px = image.data();
        let mut patches = Vec::with_capacity(g * g * patch_len);
        for gy in 0..g {
            for gx in 0..g {
                for c in 0..IN_CHANNELS {
                    for dy in 0..p {
                        let row = (c * s + gy * p + dy) * s + gx * p;
                        patches.extend_from_slice(&px[row..row + p]);
                    }
                }
            }
        }
        let patches = Tensor::new(vec![g * g, patch_len], patches)?;
        let proj = patches.linear(&self.weights.patch_weight, Some(&self.weights.patch_bias))?;
        let mut tokens = self.weights.cls_token.data().to_vec();
        tokens.extend_from_slice(proj.data());
        Tensor::new(vec![cfg.num_tokens(), cfg.embed_dim], tokens)?.add(&self.weights.pos_embed)
    }

    /// Runs the network, recording everything from the capture block on.
    pub fn forward(&self, image: &Tensor, astro: Option<&AstroParams>) -> Result<ForwardPass<'_>> {
        let mut x = self.patchify_embed(image)?;
        let capture = self.config.capture_block();
        let mut astro_trace = None;
        for (i, bw) in self.weights.blocks[..capture].iter().enumerate() {
            x = match (i, astro) {
                (0, Some(params)) => {
                    let (y, trace) = astro_block(&x, bw, &self.config, params)?;
                    astro_trace = Some(trace);
                    y
                }
                _ => block(&mut Eager, &x, bw, &self.config)?,
            };
        }

        let mut tape = Tape::new();
        let target = tape.leaf(x);
        let logits_var = self.suffix(&mut tape, &target)?;
        let logits = tape.value(logits_var)?.reshape(&[self.config.num_classes])?;
        Ok(ForwardPass {
            tape,
            target,
            logits_var,
            logits,
            astro_trace,
        })
    }

    /// Unmodulated logits, no recording.
    pub fn logits(&self, image: &Tensor) -> Result<Tensor> {
        let mut x = self.patchify_embed(image)?;
        for bw in &self.weights.blocks[..self.config.capture_block()] {
            x = block(&mut Eager, &x, bw, &self.config)?;
        }
        self.logits_from_capture(&x)
    }

    /// Logits computed from an activation at the capture point.
    pub fn logits_from_capture(&self, activation: &Tensor) -> Result<Tensor> {
        let y = self.suffix(&mut Eager, activation)?;
        y.reshape(&[self.config.num_classes])
    }

    /// Argmax of the unmodulated logits, lowest index on ties.
    pub fn predict(&self, image: &Tensor) -> Result<usize> {
        let logits = self.logits(image)?;
        logits
            .argmax()
            .ok_or_else(|| Error::shape("model produced no logits"))
    }

    fn suffix<'w, O: Ops<'w>>(&'w self, ops: &mut O, x: &O::Value) -> Result<O::Value> {
        let mut x = x.clone();
        for bw in &self.weights.blocks[self.config.capture_block()..] {
            x = block(ops, &x, bw, &self.config)?;
        }
        let w = &self.weights;
        let x = ops.layer_norm(&x, &w.norm_weight, &w.norm_bias, self.config.ln_eps)?;
        let cls = ops.row(&x, 0)?;
        ops.linear(&cls, &w.head_weight, Some(&w.head_bias))
    }
}

/// Multi-head self-attention up to (not including) the output projection.
fn attention_mix<'w, O: Ops<'w>>(
    ops: &mut O,
    h: &O::Value,
    bw: &'w BlockWeights,
    cfg: &VitConfig,
) -> Result<O::Value> {
    let d = cfg.embed_dim;
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let qkv = ops.linear(h, &bw.qkv_weight, Some(&bw.qkv_bias))?;
    let mut heads = Vec::with_capacity(cfg.num_heads);
    for head in 0..cfg.num_heads {
        let off = head * dh;
        let q = ops.slice_cols(&qkv, off, off + dh)?;
        let k = ops.slice_cols(&qkv, d + off, d + off + dh)?;
        let v = ops.slice_cols(&qkv, 2 * d + off, 2 * d + off + dh)?;
        let scores = ops.matmul_nt(&q, &k)?;
        let scores = ops.scale(&scores, scale)?;
        let att = ops.softmax_rows(&scores)?;
        heads.push(ops.matmul(&att, &v)?);
    }
    ops.concat_cols(&heads)
}

fn mlp_residual<'w, O: Ops<'w>>(
    ops: &mut O,
    x: &O::Value,
    bw: &'w BlockWeights,
    cfg: &VitConfig,
) -> Result<O::Value> {
    let h = ops.layer_norm(x, &bw.norm2_weight, &bw.norm2_bias, cfg.ln_eps)?;
    let h = ops.linear(&h, &bw.fc1_weight, Some(&bw.fc1_bias))?;
    let h = ops.gelu(&h)?;
    let h = ops.linear(&h, &bw.fc2_weight, Some(&bw.fc2_bias))?;
    ops.add(x, &h)
}

fn block<'w, O: Ops<'w>>(
    ops: &mut O,
    x: &O::Value,
    bw: &'w BlockWeights,
    cfg: &VitConfig,
) -> Result<O::Value> {
    let h = ops.layer_norm(x, &bw.norm1_weight, &bw.norm1_bias, cfg.ln_eps)?;
    let a = attention_mix(ops, &h, bw, cfg)?;
    let p = ops.linear(&a, &bw.proj_weight, Some(&bw.proj_bias))?;
    let x = ops.add(x, &p)?;
    mlp_residual(ops, &x, bw, cfg)
}

/// Block with the attention output projection replaced by the astrocytic
/// layer.
fn astro_block(
    x: &Tensor,
    bw: &BlockWeights,
    cfg: &VitConfig,
    params: &AstroParams,
) -> Result<(Tensor, AstroTrace)> {
    let mut ops = Eager;
    let h = x.layer_norm(&bw.norm1_weight, &bw.norm1_bias, cfg.ln_eps)?;
    let a = attention_mix(&mut ops, &h, bw, cfg)?;
    let (p, trace) = astro_linear_forward(&a, &bw.proj_weight, Some(&bw.proj_bias), params)?;
    let x = x.add(&p)?;
    Ok((mlp_residual(&mut ops, &x, bw, cfg)?, trace))
}
