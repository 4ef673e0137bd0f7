//! Grad-CAM saliency maps and their color overlays.

use std::path::{Path, PathBuf};

use image::{GrayImage, Luma, Rgb, RgbImage};

use crate::data::quantize;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::{no_grad, Shape, Tensor};

pub const DEFAULT_ALPHA: f64 = 0.4;
pub const DEFAULT_LAYER: &str = "block4";

/// Colormap anchors at 0, 1/3, 2/3 and 1: blue, green, yellow, red.
pub const COLORMAP_ANCHORS: [[u8; 3]; 4] = [[0, 0, 255], [0, 255, 0], [255, 255, 0], [255, 0, 0]];

/// Row-major `height x width` saliency in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub values: Vec<f32>,
    pub width: usize,
    pub height: usize,
    pub source_layer: String,
    pub target_class: usize,
    /// Set when the raw map had no positive value; `values` are then all zero.
    pub all_zero: bool,
}

impl Heatmap {
    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.values[y * self.width + x]
    }

    /// `(x, y)` of the first maximum in row-major order.
    pub fn argmax(&self) -> (usize, usize) {
        let mut best = 0;
        for (i, &v) in self.values.iter().enumerate() {
            if v > self.values[best] {
                best = i;
            }
        }
        (best % self.width, best / self.width)
    }

    pub fn to_gray(&self) -> GrayImage {
        GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            Luma([quantize(self.get(y as usize, x as usize))])
        })
    }
}

/// Grad-CAM of `target_class` over the output of block `layer`.
pub fn compute_gradcam(
    model: &Model,
    image: &Tensor,
    target_class: usize,
    layer: &str,
) -> Result<Heatmap> {
    let block = model.block_index(layer)?;
    let Shape([n, _, h, w]) = image.shape();
    if n != 1 {
        return Err(Error::InvalidArgument(format!(
            "Grad-CAM takes one image, got a batch of {n}"
        )));
    }
    let features = no_grad(|| model.block_output(image, block))?;
    let out = gradcam_from_features(
        &features,
        |a| model.logits_from_block(a, block),
        target_class,
        (h, w),
    );
    // the backward pass also reaches the head parameters
    model.zero_grad();
    let mut map = out?;
    map.source_layer = layer.to_string();
    Ok(map)
}

/// Grad-CAM for an arbitrary head mapping `(1, C, h, w)` features to `(1, K)` logits,
/// upsampled to `size = (height, width)`.
pub fn gradcam_from_features<F>(
    features: &Tensor,
    head: F,
    target_class: usize,
    size: (usize, usize),
) -> Result<Heatmap>
where
    F: FnOnce(&Tensor) -> Result<Tensor>,
{
    let Shape([n, c, h, w]) = features.shape();
    if n != 1 {
        return Err(Error::InvalidArgument(format!(
            "expected one feature map, got {n}"
        )));
    }
    let a = features.detach().requires_grad_leaf();
    let logits = head(&a)?;
    let k = logits.numel();
    if target_class >= k {
        return Err(Error::InvalidArgument(format!(
            "target class {target_class} out of range for {k} classes"
        )));
    }
    let mut seed = vec![0.0f32; k];
    seed[target_class] = 1.0;
    logits.backward_from(&seed)?;
    let grad = a
        .grad()
        .map(|g| g.to_vec())
        .unwrap_or_else(|| vec![0.0; a.numel()]);
    let plane = h * w;
    let mut raw = vec![0.0f64; plane];
    for ch in 0..c {
        let g = &grad[ch * plane..(ch + 1) * plane];
        let alpha = g.iter().map(|&v| v as f64).sum::<f64>() / plane as f64;
        if alpha == 0.0 {
            continue;
        }
        for (r, &v) in raw
            .iter_mut()
            .zip(&features.data()[ch * plane..(ch + 1) * plane])
        {
            *r += alpha * v as f64;
        }
    }
    raw.iter_mut().for_each(|v| *v = v.max(0.0));
    let mut values = upsample_align_corners(&raw, h, w, size.0, size.1);
    let max = values.iter().copied().fold(0.0f64, f64::max);
    let all_zero = !(max > 0.0);
    if all_zero {
        values.iter_mut().for_each(|v| *v = 0.0);
    } else {
        values.iter_mut().for_each(|v| *v /= max);
    }
    Ok(Heatmap {
        values: values.into_iter().map(|v| v as f32).collect(),
        width: size.1,
        height: size.0,
        source_layer: String::new(),
        target_class,
        all_zero,
    })
}

/// Bilinear resize mapping corner pixels onto corner pixels.
pub fn upsample_align_corners(
    src: &[f64],
    h: usize,
    w: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<f64> {
    let coord = |o: usize, n_in: usize, n_out: usize| -> (usize, usize, f64) {
        if n_in == 1 || n_out == 1 {
            return (0, 0, 0.0);
        }
        let s = o as f64 * (n_in - 1) as f64 / (n_out - 1) as f64;
        let i0 = (s.floor() as usize).min(n_in - 1);
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, s - i0 as f64)
    };
    let mut out = Vec::with_capacity(out_h * out_w);
    for oy in 0..out_h {
        let (y0, y1, fy) = coord(oy, h, out_h);
        for ox in 0..out_w {
            let (x0, x1, fx) = coord(ox, w, out_w);
            let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
            let bottom = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

/// Piecewise-linear blue, green, yellow, red ramp; `v` is clamped to `[0, 1]`.
pub fn colormap(v: f32) -> [f64; 3] {
    let t = (v.clamp(0.0, 1.0) as f64) * 3.0;
    let seg = (t.floor() as usize).min(2);
    let f = t - seg as f64;
    let (a, b) = (COLORMAP_ANCHORS[seg], COLORMAP_ANCHORS[seg + 1]);
    [0, 1, 2].map(|i| a[i] as f64 * (1.0 - f) + b[i] as f64 * f)
}

/// `round(alpha * color + (1 - alpha) * original)` per channel.
pub fn overlay(heatmap: &Heatmap, original: &RgbImage, alpha: f64) -> Result<RgbImage> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!(
            "alpha must lie in [0, 1], got {alpha}"
        )));
    }
    if (original.width() as usize, original.height() as usize) != (heatmap.width, heatmap.height) {
        return Err(Error::InvalidArgument(format!(
            "heatmap is {}x{} but the image is {}x{}",
            heatmap.width,
            heatmap.height,
            original.width(),
            original.height()
        )));
    }
    Ok(RgbImage::from_fn(
        original.width(),
        original.height(),
        |x, y| {
            let color = colormap(heatmap.get(y as usize, x as usize));
            let px = original.get_pixel(x, y).0;
            Rgb([0, 1, 2].map(|i| {
                (alpha * color[i] + (1.0 - alpha) * px[i] as f64)
                    .round()
                    .clamp(0.0, 255.0) as u8
            }))
        },
    ))
}

/// Writes `<stem>_heatmap.png` and `<stem>_overlay.png` into `dir`.
pub fn write_explanation(
    dir: &Path,
    stem: &str,
    heatmap: &Heatmap,
    overlay: &RgbImage,
) -> Result<(PathBuf, PathBuf)> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let heat_path = dir.join(format!("{stem}_heatmap.png"));
    let overlay_path = dir.join(format!("{stem}_overlay.png"));
    heatmap
        .to_gray()
        .save_with_format(&heat_path, image::ImageFormat::Png)
        .map_err(|source| Error::Image {
            path: heat_path.clone(),
            source,
        })?;
    overlay
        .save_with_format(&overlay_path, image::ImageFormat::Png)
        .map_err(|source| Error::Image {
            path: overlay_path.clone(),
            source,
        })?;
    Ok((heat_path, overlay_path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::global_avg_pool;

    fn features() -> Tensor {
        let data: Vec<f32> = (0..2 * 4 * 4)
            .map(|i| ((i * 7) % 11) as f32 - 5.0)
            .collect();
        Tensor::new([1, 2, 4, 4], data).unwrap()
    }

    #[test]
    fn mean_of_channel_zero_gives_relu_of_that_channel() {
        let f = features();
        // logits: (mean of channel 0, mean of channel 1)
        let map =
            gradcam_from_features(&f, |a| global_avg_pool(a)?.reshape([1, 2, 1, 1]), 0, (4, 4))
                .unwrap();
        let a0: Vec<f32> = f.data()[..16].iter().map(|v| v.max(0.0)).collect();
        let max = a0.iter().copied().fold(0.0, f32::max);
        for (got, want) in map.values.iter().zip(&a0) {
            assert!((got - want / max).abs() < 1e-6);
        }
        assert!(!map.all_zero);
    }

    #[test]
    fn constant_head_gives_flagged_zero_map() {
        let map = gradcam_from_features(
            &features(),
            |_| Tensor::new([1, 3, 1, 1], vec![1.0, 2.0, 3.0]),
            1,
            (8, 8),
        )
        .unwrap();
        assert!(map.all_zero);
        assert!(map.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn class_out_of_range() {
        assert!(gradcam_from_features(&features(), global_avg_pool, 2, (4, 4)).is_err());
    }

    #[test]
    fn upsampling_hits_source_corners() {
        let src: Vec<f64> = (0..9).map(f64::from).collect();
        let up = upsample_align_corners(&src, 3, 3, 5, 5);
        assert_eq!(up[0], 0.0);
        assert_eq!(up[4], 2.0);
        assert_eq!(up[12], 4.0);
        assert_eq!(up[24], 8.0);
    }

    #[test]
    fn colormap_anchors() {
        assert_eq!(colormap(0.0), [0.0, 0.0, 255.0]);
        assert_eq!(colormap(1.0), [255.0, 0.0, 0.0]);
        let g = colormap(1.0 / 3.0);
        assert!((g[1] - 255.0).abs() < 1e-3 && g[0].abs() < 1e-3);
    }

    #[test]
    fn overlay_rejects_size_mismatch() {
        let h = Heatmap {
            values: vec![0.0; 4],
            width: 2,
            height: 2,
            source_layer: "block4".into(),
            target_class: 0,
            all_zero: true,
        };
        assert!(overlay(&h, &RgbImage::new(3, 2), 0.4).is_err());
        assert!(overlay(&h, &RgbImage::new(2, 2), 1.5).is_err());
    }
}
