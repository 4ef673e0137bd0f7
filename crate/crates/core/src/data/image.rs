use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Planar RGB image with values in `[0, 1]`, stored channel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FloatImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl FloatImage {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != 3 * width * height {
            return Err(Error::InvalidArgument(format!(
                "{}x{} RGB image needs {} values, got {}",
                width,
                height,
                3 * width * height,
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        let plane = width * height;
        let data = rgb
            .iter()
            .flat_map(|&v| std::iter::repeat_n(v, plane))
            .collect();
        Self {
            width,
            height,
            data,
        }
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.width * self.height;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut data = vec![0.0; 3 * w * h];
        for (i, p) in img.pixels().enumerate() {
            for c in 0..3 {
                data[c * w * h + i] = p.0[c] as f32 / 255.0;
            }
        }
        Self {
            width: w,
            height: h,
            data,
        }
    }

    /// Quantizes to 8 bits with rounding.
    pub fn to_rgb8(&self) -> image::RgbImage {
        let plane = self.width * self.height;
        image::RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let i = y as usize * self.width + x as usize;
            image::Rgb(std::array::from_fn(|c| quantize(self.data[c * plane + i])))
        })
    }

    /// `(1, 3, H, W)` tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new([1, 3, self.height, self.width], self.data.clone()).expect("consistent extents")
    }
}

pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Stacks equally sized images into an `(N, 3, H, W)` tensor.
pub fn stack(images: &[FloatImage]) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::InvalidArgument("cannot stack zero images".into()))?;
    if images
        .iter()
        .any(|i| i.width != first.width || i.height != first.height)
    {
        return Err(Error::InvalidArgument(
            "images in a batch must share extents".into(),
        ));
    }
    let data = images.iter().flat_map(|i| i.data.iter().copied()).collect();
    Tensor::new(Shape::new(images.len(), 3, first.height, first.width), data)
}

/// Bilinear resize of 8-bit RGB with half-pixel centers and edge clamping.
/// Output values are scaled to `[0, 1]`.
pub fn resize_bilinear(img: &image::RgbImage, width: usize, height: usize) -> FloatImage {
    let (sw, sh) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    let taps = |dst: usize, src: usize| -> Vec<(usize, usize, f32)> {
        let scale = src as f64 / dst as f64;
        (0..dst)
            .map(|o| {
                let s = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(src - 1);
                (i0, i1, (s - i0 as f64) as f32)
            })
            .collect()
    };
    let xs = taps(width, sw);
    let ys = taps(height, sh);
    let plane = width * height;
    let mut data = vec![0.0f32; 3 * plane];
    for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
        for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
            for c in 0..3 {
                let px = |x: usize, y: usize| raw[(y * sw + x) * 3 + c] as f32;
                let top = px(x0, y0) * (1.0 - fx) + px(x1, y0) * fx;
                let bottom = px(x0, y1) * (1.0 - fx) + px(x1, y1) * fx;
                data[c * plane + oy * width + ox] = (top * (1.0 - fy) + bottom * fy) / 255.0;
            }
        }
    }
    FloatImage {
        width,
        height,
        data,
    }
}

/// Decodes an image file, promotes it to RGB and resizes it to `size x size`.
pub fn load_image(path: &Path, size: usize) -> Result<FloatImage> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(resize_bilinear(&img.to_rgb8(), size, size))
}

/// Decodes images on a bounded worker pool. Output order follows `paths`.
pub struct ImageLoader {
    pub size: usize,
    pool: Option<rayon::ThreadPool>,
}

impl ImageLoader {
    /// `threads: None` uses the global pool.
    pub fn new(size: usize, threads: Option<usize>) -> Result<Self> {
        let pool = threads
            .map(|n| {
                rayon::ThreadPoolBuilder::new()
                    .num_threads(n.max(1))
                    .build()
                    .map_err(|e| {
                        Error::InvalidArgument(format!("cannot start {n} loader threads: {e}"))
                    })
            })
            .transpose()?;
        Ok(Self { size, pool })
    }

    pub fn load(&self, paths: &[PathBuf]) -> Result<Vec<FloatImage>> {
        let run = || paths.par_iter().map(|p| load_image(p, self.size)).collect();
        match &self.pool {
            Some(pool) => pool.install(run),
            None => run(),
        }
    }
}
