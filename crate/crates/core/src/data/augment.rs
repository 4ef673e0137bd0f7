use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::image::FloatImage;

pub const FACTOR_RANGE: (f32, f32) = (0.7, 1.3);
pub const MAX_ROTATION_DEGREES: f64 = 25.0;

/// Tolerance for sample points that land on the border up to rounding.
const EDGE_SLACK: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AugmentKind {
    Flip,
    Brightness,
    Contrast,
    Rotation,
}

impl AugmentKind {
    pub const ALL: [AugmentKind; 4] = [
        AugmentKind::Flip,
        AugmentKind::Brightness,
        AugmentKind::Contrast,
        AugmentKind::Rotation,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AugmentKind::Flip => "flip",
            AugmentKind::Brightness => "brightness",
            AugmentKind::Contrast => "contrast",
            AugmentKind::Rotation => "rotation",
        }
    }
}

/// Random parameters for one source image.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentParams {
    pub brightness: f32,
    pub contrast: f32,
    pub degrees: f64,
}

impl AugmentParams {
    pub const NEUTRAL: AugmentParams = AugmentParams {
        brightness: 1.0,
        contrast: 1.0,
        degrees: 0.0,
    };

    pub fn draw(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            brightness: rng.random_range(FACTOR_RANGE.0..=FACTOR_RANGE.1),
            contrast: rng.random_range(FACTOR_RANGE.0..=FACTOR_RANGE.1),
            degrees: rng.random_range(-MAX_ROTATION_DEGREES..=MAX_ROTATION_DEGREES),
        }
    }
}

pub fn apply(img: &FloatImage, kind: AugmentKind, p: &AugmentParams) -> FloatImage {
    match kind {
        AugmentKind::Flip => flip_horizontal(img),
        AugmentKind::Brightness => adjust_brightness(img, p.brightness),
        AugmentKind::Contrast => adjust_contrast(img, p.contrast),
        AugmentKind::Rotation => rotate(img, p.degrees),
    }
}

/// The four variants (flip, brightness, contrast, rotation) of one image.
pub fn augment_image(img: &FloatImage, seed: u64) -> [FloatImage; 4] {
    let p = AugmentParams::draw(seed);
    AugmentKind::ALL.map(|k| apply(img, k, &p))
}

pub fn flip_horizontal(img: &FloatImage) -> FloatImage {
    let mut out = img.clone();
    for row in out.data.chunks_mut(img.width) {
        row.reverse();
    }
    out
}

pub fn adjust_brightness(img: &FloatImage, factor: f32) -> FloatImage {
    let mut out = img.clone();
    out.data
        .iter_mut()
        .for_each(|v| *v = (*v * factor).clamp(0.0, 1.0));
    out
}

/// Scales each channel's deviation from its mean by `factor`.
pub fn adjust_contrast(img: &FloatImage, factor: f32) -> FloatImage {
    let mut out = img.clone();
    let plane = img.width * img.height;
    for ch in out.data.chunks_mut(plane.max(1)) {
        let mean = (ch.iter().map(|&v| v as f64).sum::<f64>() / plane as f64) as f32;
        ch.iter_mut()
            .for_each(|v| *v = (*v * factor + mean * (1.0 - factor)).clamp(0.0, 1.0));
    }
    out
}

/// Rotates counter-clockwise about the image center with bilinear sampling;
/// samples falling outside the source are zero.
pub fn rotate(img: &FloatImage, degrees: f64) -> FloatImage {
    let (w, h) = (img.width, img.height);
    let (sin, cos) = degrees.to_radians().sin_cos();
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let plane = w * h;
    let mut data = vec![0.0f32; 3 * plane];
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            // inverse map: rotate the destination point back by the angle
            let sx = cos * dx - sin * dy + cx;
            let sy = sin * dx + cos * dy + cy;
            let (xmax, ymax) = ((w - 1) as f64, (h - 1) as f64);
            if sx < -EDGE_SLACK
                || sy < -EDGE_SLACK
                || sx > xmax + EDGE_SLACK
                || sy > ymax + EDGE_SLACK
            {
                continue;
            }
            let (sx, sy) = (sx.clamp(0.0, xmax), sy.clamp(0.0, ymax));
            let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
            let (fx, fy) = ((sx - x0 as f64) as f32, (sy - y0 as f64) as f32);
            for c in 0..3 {
                let top = img.get(c, y0, x0) * (1.0 - fx) + img.get(c, y0, x1) * fx;
                let bottom = img.get(c, y1, x0) * (1.0 - fx) + img.get(c, y1, x1) * fx;
                data[c * plane + y * w + x] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    FloatImage {
        width: w,
        height: h,
        data,
    }
}
