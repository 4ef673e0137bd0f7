use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, MatMut, MatRef};
use crate::tensor::{Backward, Element, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    /// Zero padding so a stride-1 convolution keeps the spatial extents.
    Same,
    /// No padding.
    Valid,
}

/// 2-D convolution layer (cross-correlation, square kernel).
#[derive(Clone, Debug)]
pub struct Conv2d<T: Element = f32> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
    pub stride: usize,
    pub padding: Padding,
}

impl<T: Element> Conv2d<T> {
    pub fn new(
        weight: Tensor<T>,
        bias: Option<Tensor<T>>,
        stride: usize,
        padding: Padding,
    ) -> Result<Self> {
        let s = weight.shape();
        if s.h() != s.w() {
            return Err(Error::InvalidArgument(format!(
                "conv kernel must be square, got {s}"
            )));
        }
        if padding == Padding::Same && s.h().is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!(
                "same padding needs an odd kernel, got {}",
                s.h()
            )));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument(
                "conv stride must be positive".into(),
            ));
        }
        if let Some(b) = &bias {
            if b.numel() != s.n() {
                return Err(Error::shape("conv2d bias", s, b.shape()));
            }
        }
        Ok(Self {
            weight,
            bias,
            stride,
            padding,
        })
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape().h()
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape().n()
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape().c()
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        conv2d(
            x,
            &self.weight,
            self.bias.as_ref(),
            self.stride,
            self.padding,
        )
    }
}

#[derive(Clone, Copy, Debug)]
struct Geometry {
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad_top: usize,
    pad_left: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn patch_len(&self) -> usize {
        self.k * self.k * self.cin
    }

    fn pixels(&self) -> usize {
        self.ho * self.wo
    }

    /// Output rows handled per GEMM call, bounding the patch buffer to ~16 MiB of f32.
    fn tile_rows(&self) -> usize {
        ((1usize << 22) / self.patch_len().max(1))
            .max(64)
            .min(self.pixels())
            .max(1)
    }

    /// Copies the receptive fields of output pixels `p0..p0 + rows` into
    /// `patches`, one row per pixel in `(ky, kx, ci)` order. `xh` is the
    /// input sample in `(H * W, C_in)` layout.
    fn fill_patches<T: Element>(&self, xh: &[T], p0: usize, rows: usize, patches: &mut [T]) {
        let plen = self.patch_len();
        let run = self.k * self.cin;
        for r in 0..rows {
            let p = p0 + r;
            let (oy, ox) = (p / self.wo, p % self.wo);
            let row = &mut patches[r * plen..(r + 1) * plen];
            for ky in 0..self.k {
                let seg = &mut row[ky * run..(ky + 1) * run];
                let iy = (oy * self.stride + ky) as isize - self.pad_top as isize;
                if iy < 0 || iy >= self.h as isize {
                    seg.fill(T::zero());
                    continue;
                }
                let (lo, hi, ix0) = self.kx_range(ox);
                seg[..lo * self.cin].fill(T::zero());
                seg[hi.max(lo) * self.cin..].fill(T::zero());
                if lo < hi {
                    let start = (iy as usize * self.w + (ix0 + lo as isize) as usize) * self.cin;
                    seg[lo * self.cin..hi * self.cin]
                        .copy_from_slice(&xh[start..start + (hi - lo) * self.cin]);
                }
            }
        }
    }

    /// Adjoint of [`fill_patches`]: scatter-adds patch rows back into `dxh`.
    fn scatter_patches<T: Element>(&self, dpatches: &[T], p0: usize, rows: usize, dxh: &mut [T]) {
        let plen = self.patch_len();
        let run = self.k * self.cin;
        for r in 0..rows {
            let p = p0 + r;
            let (oy, ox) = (p / self.wo, p % self.wo);
            let row = &dpatches[r * plen..(r + 1) * plen];
            for ky in 0..self.k {
                let iy = (oy * self.stride + ky) as isize - self.pad_top as isize;
                if iy < 0 || iy >= self.h as isize {
                    continue;
                }
                let (lo, hi, ix0) = self.kx_range(ox);
                if lo >= hi {
                    continue;
                }
                let start = (iy as usize * self.w + (ix0 + lo as isize) as usize) * self.cin;
                let src = &row[ky * run + lo * self.cin..ky * run + hi * self.cin];
                for (d, &s) in dxh[start..start + src.len()].iter_mut().zip(src) {
                    *d = *d + s;
                }
            }
        }
    }

    /// Valid kernel columns `lo..hi` for output column `ox`, plus the input column of `kx = 0`.
    fn kx_range(&self, ox: usize) -> (usize, usize, isize) {
        let ix0 = (ox * self.stride) as isize - self.pad_left as isize;
        let lo = (-ix0).max(0) as usize;
        let hi = (self.w as isize - ix0).clamp(0, self.k as isize) as usize;
        (lo.min(self.k), hi, ix0)
    }
}

fn geometry(x: Shape, w: Shape, stride: usize, padding: Padding) -> Result<Geometry> {
    let (cout, cin, k) = (w.n(), w.c(), w.h());
    if x.c() != cin {
        return Err(Error::shape("conv2d channels", x, w));
    }
    let (h, wd) = (x.h(), x.w());
    let (ho, wo, pad_top, pad_left) = match padding {
        Padding::Same => {
            let ho = h.div_ceil(stride);
            let wo = wd.div_ceil(stride);
            let pad_h = ((ho.saturating_sub(1)) * stride + k).saturating_sub(h);
            let pad_w = ((wo.saturating_sub(1)) * stride + k).saturating_sub(wd);
            (ho, wo, pad_h / 2, pad_w / 2)
        }
        Padding::Valid => {
            if h < k || wd < k {
                return Err(Error::shape("conv2d valid padding", x, w));
            }
            ((h - k) / stride + 1, (wd - k) / stride + 1, 0, 0)
        }
    };
    Ok(Geometry {
        cin,
        h,
        w: wd,
        cout,
        k,
        stride,
        pad_top,
        pad_left,
        ho,
        wo,
    })
}

/// `(C_out, C_in, k, k)` weights as a `(k * k * C_in, C_out)` matrix in `(ky, kx, ci)` row order.
fn weight_matrix<T: Element>(w: &[T], g: &Geometry) -> Vec<T> {
    let (k, cin, cout) = (g.k, g.cin, g.cout);
    let mut out = vec![T::zero(); w.len()];
    for co in 0..cout {
        for ci in 0..cin {
            for ky in 0..k {
                for kx in 0..k {
                    out[((ky * k + kx) * cin + ci) * cout + co] =
                        w[((co * cin + ci) * k + ky) * k + kx];
                }
            }
        }
    }
    out
}

fn weight_from_matrix<T: Element>(m: &[T], g: &Geometry) -> Vec<T> {
    let (k, cin, cout) = (g.k, g.cin, g.cout);
    let mut out = vec![T::zero(); m.len()];
    for co in 0..cout {
        for ci in 0..cin {
            for ky in 0..k {
                for kx in 0..k {
                    out[((co * cin + ci) * k + ky) * k + kx] =
                        m[((ky * k + kx) * cin + ci) * cout + co];
                }
            }
        }
    }
    out
}

fn forward_sample<T: Element>(x: &[T], wm: &[T], g: &Geometry) -> Vec<T> {
    let xh = linalg::transpose(x, g.cin, g.h * g.w);
    let (plen, npix) = (g.patch_len(), g.pixels());
    let tile = g.tile_rows();
    let mut out = vec![T::zero(); npix * g.cout];
    let mut patches = vec![T::zero(); tile * plen];
    for p0 in (0..npix).step_by(tile) {
        let rows = tile.min(npix - p0);
        let buf = &mut patches[..rows * plen];
        g.fill_patches(&xh, p0, rows, buf);
        linalg::gemm(
            T::one(),
            MatRef::row_major(buf, rows, plen),
            MatRef::row_major(wm, plen, g.cout),
            T::zero(),
            MatMut::row_major(&mut out[p0 * g.cout..(p0 + rows) * g.cout], rows, g.cout),
        );
    }
    linalg::transpose(&out, npix, g.cout)
}

/// Returns `(dx, dW as matrix)` for one sample.
fn backward_sample<T: Element>(
    x: &[T],
    wm: &[T],
    grad: &[T],
    g: &Geometry,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let xh = linalg::transpose(x, g.cin, g.h * g.w);
    let gh = linalg::transpose(grad, g.cout, g.pixels());
    let (plen, npix) = (g.patch_len(), g.pixels());
    let tile = g.tile_rows();
    let mut patches = vec![T::zero(); if need_dw { tile * plen } else { 0 }];
    let mut dpatches = vec![T::zero(); if need_dx { tile * plen } else { 0 }];
    let mut dwm = need_dw.then(|| vec![T::zero(); plen * g.cout]);
    let mut dxh = need_dx.then(|| vec![T::zero(); g.h * g.w * g.cin]);
    for p0 in (0..npix).step_by(tile) {
        let rows = tile.min(npix - p0);
        let g_tile = MatRef::row_major(&gh[p0 * g.cout..(p0 + rows) * g.cout], rows, g.cout);
        if let Some(dwm) = dwm.as_mut() {
            let buf = &mut patches[..rows * plen];
            g.fill_patches(&xh, p0, rows, buf);
            linalg::gemm(
                T::one(),
                MatRef::transposed(buf, plen, rows),
                g_tile,
                T::one(),
                MatMut::row_major(dwm, plen, g.cout),
            );
        }
        if let Some(dxh) = dxh.as_mut() {
            let buf = &mut dpatches[..rows * plen];
            linalg::gemm(
                T::one(),
                g_tile,
                MatRef::transposed(wm, g.cout, plen),
                T::zero(),
                MatMut::row_major(buf, rows, plen),
            );
            g.scatter_patches(buf, p0, rows, dxh);
        }
    }
    let dx = dxh.map(|d| linalg::transpose(&d, g.h * g.w, g.cin));
    (dx, dwm)
}

struct Conv2dOp {
    geom: Geometry,
}

impl<T: Element> Backward<T> for Conv2dOp {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn backward(&self, inputs: &[Tensor<T>], _output: &[T], grad: &[T]) -> Vec<Option<Vec<T>>> {
        let g = &self.geom;
        let (x, w) = (&inputs[0], &inputs[1]);
        let n = x.shape().n();
        let wm = weight_matrix(w.data(), g);
        let (in_len, out_len) = (g.cin * g.h * g.w, g.cout * g.pixels());
        let need_dx = x.requires_grad();
        let need_dw = w.requires_grad();
        let per_sample: Vec<_> = (0..n)
            .into_par_iter()
            .map(|i| {
                backward_sample(
                    &x.data()[i * in_len..(i + 1) * in_len],
                    &wm,
                    &grad[i * out_len..(i + 1) * out_len],
                    g,
                    need_dx,
                    need_dw,
                )
            })
            .collect();
        let mut dx = need_dx.then(|| Vec::with_capacity(x.numel()));
        let mut dwm = need_dw.then(|| vec![T::zero(); wm.len()]);
        for (sdx, sdw) in per_sample {
            if let (Some(dx), Some(sdx)) = (dx.as_mut(), sdx) {
                dx.extend_from_slice(&sdx);
            }
            if let (Some(acc), Some(sdw)) = (dwm.as_mut(), sdw) {
                acc.iter_mut().zip(&sdw).for_each(|(a, b)| *a = *a + *b);
            }
        }
        let dw = dwm.map(|m| weight_from_matrix(&m, g));
        let mut out = vec![dx, dw];
        if let Some(b) = inputs.get(2) {
            out.push(b.requires_grad().then(|| {
                let mut db = vec![T::zero(); g.cout];
                for i in 0..n {
                    for (co, d) in db.iter_mut().enumerate() {
                        let start = i * out_len + co * g.pixels();
                        let s: T = grad[start..start + g.pixels()].iter().copied().sum();
                        *d = *d + s;
                    }
                }
                db
            }));
        }
        out
    }
}

/// Cross-correlation of `x (N, C_in, H, W)` with `weight (C_out, C_in, k, k)`.
pub fn conv2d<T: Element>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: Padding,
) -> Result<Tensor<T>> {
    let ws = weight.shape();
    if ws.h() != ws.w() {
        return Err(Error::InvalidArgument(format!(
            "conv kernel must be square, got {ws}"
        )));
    }
    if stride == 0 {
        return Err(Error::InvalidArgument(
            "conv stride must be positive".into(),
        ));
    }
    let g = geometry(x.shape(), ws, stride, padding)?;
    if let Some(b) = bias {
        if b.numel() != g.cout {
            return Err(Error::shape("conv2d bias", ws, b.shape()));
        }
    }
    let n = x.shape().n();
    let wm = weight_matrix(weight.data(), &g);
    let in_len = g.cin * g.h * g.w;
    let per_sample: Vec<Vec<T>> = (0..n)
        .into_par_iter()
        .map(|i| forward_sample(&x.data()[i * in_len..(i + 1) * in_len], &wm, &g))
        .collect();
    let mut data = Vec::with_capacity(n * g.cout * g.pixels());
    for s in per_sample {
        data.extend_from_slice(&s);
    }
    if let Some(b) = bias {
        for chunk in data.chunks_mut(g.pixels()).enumerate() {
            let (idx, plane) = chunk;
            let bv = b.data()[idx % g.cout];
            plane.iter_mut().for_each(|v| *v = *v + bv);
        }
    }
    let mut inputs = vec![x.clone(), weight.clone()];
    if let Some(b) = bias {
        inputs.push(b.clone());
    }
    Ok(Tensor::from_op(
        Shape::new(n, g.cout, g.ho, g.wo),
        data,
        inputs,
        Conv2dOp { geom: g },
    ))
}
