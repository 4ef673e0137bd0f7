//! Spatial and cross-channel pooling.

use crate::error::{Error, Result};
use crate::tensor::{Backward, Element, Shape, Tensor};

/// Routes each output gradient to one recorded input position.
struct ArgmaxRoute {
    name: &'static str,
    source: Vec<usize>,
}

impl<T: Element> Backward<T> for ArgmaxRoute {
    fn name(&self) -> &'static str {
        self.name
    }

    fn backward(&self, inputs: &[Tensor<T>], _output: &[T], grad: &[T]) -> Vec<Option<Vec<T>>> {
        let mut dx = vec![T::zero(); inputs[0].numel()];
        for (&src, &g) in self.source.iter().zip(grad) {
            dx[src] = dx[src] + g;
        }
        vec![Some(dx)]
    }
}

/// Max selection that lets NaN through so divergence stays visible downstream.
fn beats<T: Element>(a: T, b: T) -> bool {
    a > b || (a.is_nan() && !b.is_nan())
}

/// 2x2 max pooling with stride 2. Ties resolve to the first position in
/// row-major window order.
pub fn max_pool2d<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let s = x.shape();
    if !s.h().is_multiple_of(2) || !s.w().is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!(
            "max_pool2d needs even spatial extents, got {s}"
        )));
    }
    let (ho, wo) = (s.h() / 2, s.w() / 2);
    let out_shape = Shape::new(s.n(), s.c(), ho, wo);
    let mut data = Vec::with_capacity(out_shape.numel());
    let mut source = Vec::with_capacity(out_shape.numel());
    let xd = x.data();
    for plane in 0..s.n() * s.c() {
        let base = plane * s.h() * s.w();
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + 2 * oy * s.w() + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let j = base + (2 * oy + dy) * s.w() + 2 * ox + dx;
                    if beats(xd[j], xd[best]) {
                        best = j;
                    }
                }
                data.push(xd[best]);
                source.push(best);
            }
        }
    }
    Ok(Tensor::from_op(
        out_shape,
        data,
        vec![x.clone()],
        ArgmaxRoute {
            name: "max_pool2d",
            source,
        },
    ))
}

struct SpatialMean {
    plane: usize,
}

impl<T: Element> Backward<T> for SpatialMean {
    fn name(&self) -> &'static str {
        "global_avg_pool"
    }

    fn backward(&self, _inputs: &[Tensor<T>], _output: &[T], grad: &[T]) -> Vec<Option<Vec<T>>> {
        let inv = T::one() / T::of_f64(self.plane as f64);
        let dx = grad
            .iter()
            .flat_map(|&g| std::iter::repeat_n(g * inv, self.plane))
            .collect();
        vec![Some(dx)]
    }
}

fn check_spatial<T: Element>(x: &Tensor<T>, op: &str) -> Result<usize> {
    let plane = x.shape().h() * x.shape().w();
    if plane == 0 {
        return Err(Error::InvalidArgument(format!(
            "{op} needs a non-empty spatial extent, got {}",
            x.shape()
        )));
    }
    Ok(plane)
}

/// Per-channel spatial mean: `(N, C, H, W) -> (N, C, 1, 1)`.
pub fn global_avg_pool<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let plane = check_spatial(x, "global_avg_pool")?;
    let s = x.shape();
    let data = x
        .data()
        .chunks(plane)
        .map(|p| T::of_f64(p.iter().map(|v| v.as_f64()).sum::<f64>() / plane as f64))
        .collect();
    Ok(Tensor::from_op(
        Shape::new(s.n(), s.c(), 1, 1),
        data,
        vec![x.clone()],
        SpatialMean { plane },
    ))
}

/// Per-channel spatial maximum: `(N, C, H, W) -> (N, C, 1, 1)`.
pub fn global_max_pool<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let plane = check_spatial(x, "global_max_pool")?;
    let s = x.shape();
    let mut data = Vec::with_capacity(s.n() * s.c());
    let mut source = Vec::with_capacity(s.n() * s.c());
    for (pi, p) in x.data().chunks(plane).enumerate() {
        let mut best = 0;
        for (j, &v) in p.iter().enumerate() {
            if beats(v, p[best]) {
                best = j;
            }
        }
        data.push(p[best]);
        source.push(pi * plane + best);
    }
    Ok(Tensor::from_op(
        Shape::new(s.n(), s.c(), 1, 1),
        data,
        vec![x.clone()],
        ArgmaxRoute {
            name: "global_max_pool",
            source,
        },
    ))
}

struct ChannelMeanOp {
    channels: usize,
}

impl<T: Element> Backward<T> for ChannelMeanOp {
    fn name(&self) -> &'static str {
        "channel_mean"
    }

    fn backward(&self, inputs: &[Tensor<T>], _output: &[T], grad: &[T]) -> Vec<Option<Vec<T>>> {
        let s = inputs[0].shape();
        let plane = s.h() * s.w();
        let inv = T::one() / T::of_f64(self.channels as f64);
        let mut dx = vec![T::zero(); inputs[0].numel()];
        for n in 0..s.n() {
            let g = &grad[n * plane..(n + 1) * plane];
            for c in 0..self.channels {
                let start = (n * self.channels + c) * plane;
                for (d, &gv) in dx[start..start + plane].iter_mut().zip(g) {
                    *d = gv * inv;
                }
            }
        }
        vec![Some(dx)]
    }
}

fn check_channels<T: Element>(x: &Tensor<T>, op: &str) -> Result<()> {
    if x.shape().c() == 0 {
        return Err(Error::InvalidArgument(format!(
            "{op} needs at least one channel"
        )));
    }
    Ok(())
}

/// Mean across channels: `(N, C, H, W) -> (N, 1, H, W)`.
pub fn channel_mean<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    check_channels(x, "channel_mean")?;
    let s = x.shape();
    let plane = s.h() * s.w();
    let mut acc = vec![0.0f64; s.n() * plane];
    for n in 0..s.n() {
        for c in 0..s.c() {
            let start = (n * s.c() + c) * plane;
            for (a, v) in acc[n * plane..(n + 1) * plane]
                .iter_mut()
                .zip(&x.data()[start..start + plane])
            {
                *a += v.as_f64();
            }
        }
    }
    let data = acc
        .into_iter()
        .map(|a| T::of_f64(a / s.c() as f64))
        .collect();
    Ok(Tensor::from_op(
        Shape::new(s.n(), 1, s.h(), s.w()),
        data,
        vec![x.clone()],
        ChannelMeanOp { channels: s.c() },
    ))
}

/// Maximum across channels: `(N, C, H, W) -> (N, 1, H, W)`; ties go to the lowest channel.
pub fn channel_max<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    check_channels(x, "channel_max")?;
    let s = x.shape();
    let plane = s.h() * s.w();
    let xd = x.data();
    let mut data = Vec::with_capacity(s.n() * plane);
    let mut source = Vec::with_capacity(s.n() * plane);
    for n in 0..s.n() {
        for p in 0..plane {
            let mut best = n * s.c() * plane + p;
            for c in 1..s.c() {
                let j = (n * s.c() + c) * plane + p;
                if beats(xd[j], xd[best]) {
                    best = j;
                }
            }
            data.push(xd[best]);
            source.push(best);
        }
    }
    Ok(Tensor::from_op(
        Shape::new(s.n(), 1, s.h(), s.w()),
        data,
        vec![x.clone()],
        ArgmaxRoute {
            name: "channel_max",
            source,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_input_pools_to_constant() {
        let x = Tensor::<f32>::full([1, 2, 4, 6], 3.5);
        let y = max_pool2d(&x).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 2, 2, 3));
        assert!(y.data().iter().all(|&v| v == 3.5));
        assert_eq!(global_avg_pool(&x).unwrap().data(), &[3.5, 3.5]);
        assert_eq!(global_max_pool(&x).unwrap().data(), &[3.5, 3.5]);
    }

    #[test]
    fn single_window_max() {
        let x = Tensor::<f32>::new([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(max_pool2d(&x).unwrap().data(), &[4.0]);
        assert_eq!(global_avg_pool(&x).unwrap().data(), &[2.5]);
    }

    #[test]
    fn channel_of_zero_to_three() {
        let x = Tensor::<f32>::new([1, 1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        assert_eq!(global_avg_pool(&x).unwrap().data(), &[1.5]);
        assert_eq!(global_max_pool(&x).unwrap().data(), &[3.0]);
    }

    #[test]
    fn odd_extents_are_rejected() {
        let x = Tensor::<f32>::ones([1, 1, 3, 4]);
        assert!(max_pool2d(&x).is_err());
    }

    #[test]
    fn ties_route_gradient_to_first_position() {
        let x = Tensor::<f64>::leaf([1, 1, 2, 2], vec![1.0; 4], true).unwrap();
        max_pool2d(&x).unwrap().sum().backward().unwrap();
        assert_eq!(x.grad().unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn channel_reductions() {
        let x = Tensor::<f64>::new([1, 2, 1, 2], vec![1.0, 5.0, 3.0, -1.0]).unwrap();
        assert_eq!(channel_mean(&x).unwrap().data(), &[2.0, 2.0]);
        assert_eq!(channel_max(&x).unwrap().data(), &[3.0, 5.0]);
    }
}
