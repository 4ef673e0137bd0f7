//! Synthetic planted-pattern datasets: each class paints a colored disc in
//! its own image quadrant over a noisy gray background.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::image::FloatImage;
use super::{scan_dataset, DatasetIndex};
use crate::error::{Error, Result};

pub const PALETTE: [[f32; 3]; 6] = [
    [0.90, 0.15, 0.10],
    [0.10, 0.80, 0.20],
    [0.15, 0.25, 0.90],
    [0.95, 0.90, 0.10],
    [0.80, 0.10, 0.85],
    [0.10, 0.85, 0.85],
];

const BACKGROUND: f32 = 0.5;

#[derive(Clone, Copy, Debug)]
pub struct SynthConfig {
    pub classes: usize,
    pub per_class: usize,
    pub size: usize,
    /// Standard deviation of the additive Gaussian pixel noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            classes: 3,
            per_class: 20,
            size: 224,
            noise: 0.1,
            seed: 42,
        }
    }
}

/// Quadrant holding the pattern of `class`: 0 top-left, 1 top-right,
/// 2 bottom-left, 3 bottom-right.
pub fn planted_quadrant(class: usize) -> usize {
    class % 4
}

/// Quadrant of pixel `(x, y)` in a `size x size` image.
pub fn quadrant_of(x: usize, y: usize, size: usize) -> usize {
    usize::from(x >= size / 2) + 2 * usize::from(y >= size / 2)
}

pub fn class_dir_name(class: usize, classes: usize) -> String {
    let width = (classes.saturating_sub(1)).to_string().len();
    format!("class_{class:0width$}")
}

/// Renders sample `index` of `class`.
pub fn render(cfg: &SynthConfig, class: usize, index: usize) -> Result<FloatImage> {
    let s = cfg.size;
    if s < 8 {
        return Err(Error::InvalidArgument(format!(
            "synthetic images need size >= 8, got {s}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(((class as u64) << 32) | index as u64);
    let q = planted_quadrant(class);
    let half = s as f64 / 2.0;
    let jitter = s as f64 / 16.0;
    let cx = half * (q % 2) as f64 + half / 2.0 + rng.random_range(-jitter..=jitter);
    let cy = half * (q / 2) as f64 + half / 2.0 + rng.random_range(-jitter..=jitter);
    let radius = s as f64 / 8.0;
    let color = PALETTE[class % PALETTE.len()];
    let noise =
        Normal::new(0.0, cfg.noise.max(0.0)).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let plane = s * s;
    let mut data = vec![0.0f32; 3 * plane];
    for y in 0..s {
        for x in 0..s {
            let d2 = (x as f64 + 0.5 - cx).powi(2) + (y as f64 + 0.5 - cy).powi(2);
            let inside = d2 <= radius * radius;
            for (c, &tint) in color.iter().enumerate() {
                let base = if inside { tint } else { BACKGROUND };
                let v = if cfg.noise > 0.0 {
                    base + noise.sample(&mut rng) as f32
                } else {
                    base
                };
                data[c * plane + y * s + x] = v.clamp(0.0, 1.0);
            }
        }
    }
    FloatImage::new(s, s, data)
}

/// Writes `class_<c>/img_<i>.png` files under `out_dir` and scans them back.
pub fn synth_dataset(out_dir: &Path, cfg: &SynthConfig) -> Result<DatasetIndex> {
    if cfg.per_class < super::MIN_CLASS_SIZE {
        return Err(Error::InvalidArgument(format!(
            "per-class count {} is below the split minimum of {}",
            cfg.per_class,
            super::MIN_CLASS_SIZE
        )));
    }
    if cfg.classes < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 classes, got {}",
            cfg.classes
        )));
    }
    for c in 0..cfg.classes {
        let dir = out_dir.join(class_dir_name(c, cfg.classes));
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for i in 0..cfg.per_class {
            let path = dir.join(format!("img_{i:04}.png"));
            render(cfg, c, i)?
                .to_rgb8()
                .save_with_format(&path, image::ImageFormat::Png)
                .map_err(|source| Error::Image { path, source })?;
        }
    }
    scan_dataset(out_dir)
}
