#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;
use vita_core::cam::Heatmap;
use vita_core::vit::{Vit, VitConfig, VitWeights};

pub fn toy_model(seed: u64) -> Vit {
    let cfg = VitConfig::toy();
    let weights = VitWeights::random(&cfg, seed, 0.5).unwrap();
    Vit::new(cfg, weights).unwrap()
}

pub fn random_image(rng: &mut ChaCha8Rng, w: u32, h: u32) -> RgbImage {
    RgbImage::from_fn(w, h, |_, _| Rgb([rng.gen(), rng.gen(), rng.gen()]))
}

/// Gaussian blob at a random centre.
pub fn blob(rng: &mut ChaCha8Rng, side: usize) -> Heatmap {
    let cx = rng.gen_range(0.2..0.8) * side as f64;
    let cy = rng.gen_range(0.2..0.8) * side as f64;
    let s = side as f64 / 4.0;
    let values = (0..side * side)
        .map(|i| {
            let (x, y) = ((i % side) as f64, (i / side) as f64);
            (-((x - cx).powi(2) + (y - cy).powi(2)) / (2.0 * s * s)).exp()
        })
        .collect();
    Heatmap::normalized(side, side, values).unwrap()
}

pub struct Dataset {
    pub dir: TempDir,
    pub manifest: PathBuf,
}

impl Dataset {
    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }
}

/// `n` random 12x12 images with blob ground truths, labels `i % 5`.
pub fn write_dataset(n: usize, seed: u64) -> Dataset {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut csv = String::from("image,heatmap,label\n");
    for i in 0..n {
        let img = format!("img_{i}.png");
        let gt = format!("gt_{i}.f32");
        random_image(&mut rng, 12, 12).save(dir.path().join(&img)).unwrap();
        blob(&mut rng, 16).write_raw(&dir.path().join(&gt)).unwrap();
        csv.push_str(&format!("{img},{gt},{}\n", i % 5));
    }
    let manifest = dir.path().join("manifest.csv");
    fs::write(&manifest, csv).unwrap();
    Dataset { dir, manifest }
}

pub fn write_manifest(dir: &Path, rows: &[(String, String, usize, Option<usize>)]) -> PathBuf {
    let mut csv = String::from("image,heatmap,label,expected_class\n");
    for (img, gt, label, expected) in rows {
        let e = expected.map_or(String::new(), |c| c.to_string());
        csv.push_str(&format!("{img},{gt},{label},{e}\n"));
    }
    let p = dir.join("manifest.csv");
    fs::write(&p, csv).unwrap();
    p
}
