//! Image and ground-truth ingestion: resize the shorter side, center-crop,
//! scale to `[0, 1]` and normalize per channel.

use std::path::Path;

use image::imageops::FilterType;
use image::{DynamicImage, ImageReader, RgbImage};
use serde::{Deserialize, Serialize};

use crate::cam::{self, upsample_bilinear, Heatmap};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::vit::IN_CHANNELS;

pub const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    /// Target length of the shorter side before cropping. `None` scales with
    /// the crop size as 256/224 does.
    pub resize_shorter: Option<usize>,
    pub mean: [f64; 3],
    pub std: [f64; 3],
    /// Apply the resize-and-crop geometry to ground-truth maps so they stay
    /// aligned with the cropped image.
    pub crop_ground_truth: bool,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            resize_shorter: None,
            mean: IMAGENET_MEAN,
            std: IMAGENET_STD,
            crop_ground_truth: true,
        }
    }
}

impl PreprocessConfig {
    pub fn shorter_side(&self, crop: usize) -> usize {
        self.resize_shorter
            .unwrap_or_else(|| (crop as f64 * 256.0 / 224.0).round() as usize)
    }

    pub fn validate(&self, crop: usize) -> Result<()> {
        if self.shorter_side(crop) < crop {
            return Err(Error::InvalidParam(format!(
                "resize_shorter {} is smaller than the {crop} px crop",
                self.shorter_side(crop)
            )));
        }
        if self.std.iter().any(|s| s.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater)) {
            return Err(Error::InvalidParam(format!("std must be positive, got {:?}", self.std)));
        }
        Ok(())
    }
}

/// Size after scaling the shorter side to `shorter`, truncating the longer.
pub fn resized_dims(width: usize, height: usize, shorter: usize) -> (usize, usize) {
    if width <= height {
        (shorter, shorter * height / width)
    } else {
        (shorter * width / height, shorter)
    }
}

/// Top-left corner of a centered `crop x crop` window.
pub fn center_offset(width: usize, height: usize, crop: usize) -> (usize, usize) {
    let off = |n: usize| ((n - crop) as f64 / 2.0).round_ties_even() as usize;
    (off(width), off(height))
}

pub fn decode_image(path: &Path) -> Result<DynamicImage> {
    let err = |reason: String| Error::Image {
        path: path.to_path_buf(),
        reason,
    };
    ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| err(e.to_string()))
}

/// `[3, crop, crop]` normalized tensor for the image at `path`.
pub fn preprocess_image(path: &Path, crop: usize, cfg: &PreprocessConfig) -> Result<Tensor> {
    preprocess_rgb(&decode_image(path)?.to_rgb8(), crop, cfg)
}

pub fn preprocess_rgb(img: &RgbImage, crop: usize, cfg: &PreprocessConfig) -> Result<Tensor> {
    cfg.validate(crop)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    if w == 0 || h == 0 {
        return Err(Error::shape("empty image"));
    }
    let shorter = cfg.shorter_side(crop);
    let (nw, nh) = resized_dims(w, h, shorter);
    let resized;
    let img = if (nw, nh) == (w, h) {
        img
    } else {
        resized = image::imageops::resize(img, nw as u32, nh as u32, FilterType::CatmullRom);
        &resized
    };
    let (ox, oy) = center_offset(nw, nh, crop);
    let mut data = vec![0.0; IN_CHANNELS * crop * crop];
    for y in 0..crop {
        for x in 0..crop {
            let px = img.get_pixel((ox + x) as u32, (oy + y) as u32);
            for c in 0..IN_CHANNELS {
                data[(c * crop + y) * crop + x] =
                    (px[c] as f64 / 255.0 - cfg.mean[c]) / cfg.std[c];
            }
        }
    }
    Tensor::new(vec![IN_CHANNELS, crop, crop], data)
}

fn is_raw(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()),
        Some("f32" | "raw" | "bin")
    )
}

/// Reads a ground-truth map (raw f32 with JSON sidecar, or any grayscale
/// image), min-max normalizes it, optionally applies the crop geometry, and
/// resizes it to `out x out`.
pub fn load_ground_truth(
    path: &Path,
    crop: usize,
    cfg: &PreprocessConfig,
    out: usize,
) -> Result<Heatmap> {
    let map = if is_raw(path) {
        let (w, h, values) = cam::read_raw(path)?;
        Heatmap::normalized(w, h, values)?
    } else {
        let luma = decode_image(path)?.to_luma32f();
        let (w, h) = (luma.width() as usize, luma.height() as usize);
        Heatmap::normalized(w, h, luma.into_raw().into_iter().map(f64::from).collect())?
    };
    align_ground_truth(&map, crop, cfg, out)
}

pub fn align_ground_truth(
    map: &Heatmap,
    crop: usize,
    cfg: &PreprocessConfig,
    out: usize,
) -> Result<Heatmap> {
    let (w, h) = (map.width(), map.height());
    if w == 0 || h == 0 {
        return Err(Error::shape("empty ground-truth map"));
    }
    let map = if cfg.crop_ground_truth {
        cfg.validate(crop)?;
        let (nw, nh) = resized_dims(w, h, cfg.shorter_side(crop));
        let scaled = upsample_bilinear(map, nw, nh, false);
        let (ox, oy) = center_offset(nw, nh, crop);
        scaled.crop(ox, oy, crop, crop)?
    } else {
        map.clone()
    };
    if map.width() == out && map.height() == out {
        return Ok(map);
    }
    Ok(upsample_bilinear(&map, out, out, false))
}
