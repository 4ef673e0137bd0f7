//! Convolutional block attention: channel gates from a shared bottleneck MLP,
//! then spatial gates from a 7x7 convolution over channel statistics.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{
    channel_max, channel_mean, conv2d, global_avg_pool, global_max_pool, init, linear, Padding,
};
use crate::tensor::{concat_channels, Element, Tensor};

pub const SPATIAL_KERNEL: usize = 7;

#[derive(Clone, Debug)]
pub struct ChannelAttention<T: Element = f32> {
    /// `(C / r, C)`
    pub w1: Tensor<T>,
    pub b1: Option<Tensor<T>>,
    /// `(C, C / r)`
    pub w2: Tensor<T>,
    pub b2: Option<Tensor<T>>,
    pub reduction: usize,
}

impl<T: Element> ChannelAttention<T> {
    pub fn new(
        w1: Tensor<T>,
        b1: Option<Tensor<T>>,
        w2: Tensor<T>,
        b2: Option<Tensor<T>>,
        reduction: usize,
    ) -> Result<Self> {
        let (hidden, c) = w1.shape().as_matrix();
        check_reduction(c, reduction)?;
        if hidden != c / reduction || w2.shape().as_matrix() != (c, hidden) {
            return Err(Error::shape(
                "channel attention mlp",
                w1.shape(),
                w2.shape(),
            ));
        }
        if b1.as_ref().is_some_and(|b| b.numel() != hidden)
            || b2.as_ref().is_some_and(|b| b.numel() != c)
        {
            return Err(Error::InvalidArgument(
                "channel attention bias extents disagree with weights".into(),
            ));
        }
        Ok(Self {
            w1,
            b1,
            w2,
            b2,
            reduction,
        })
    }

    /// He-normal weights, zero biases. Parameters are named `<prefix>.w1` and so on.
    pub fn init(
        prefix: &str,
        channels: usize,
        reduction: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        check_reduction(channels, reduction)?;
        let hidden = channels / reduction;
        let w1 = Tensor::parameter(
            format!("{prefix}.w1"),
            [hidden, channels, 1, 1],
            init::he_normal(rng, channels, hidden * channels),
        )?;
        let w2 = Tensor::parameter(
            format!("{prefix}.w2"),
            [channels, hidden, 1, 1],
            init::he_normal(rng, hidden, channels * hidden),
        )?;
        let b1 = bias
            .then(|| {
                Tensor::parameter(
                    format!("{prefix}.b1"),
                    [1, hidden, 1, 1],
                    vec![T::zero(); hidden],
                )
            })
            .transpose()?;
        let b2 = bias
            .then(|| {
                Tensor::parameter(
                    format!("{prefix}.b2"),
                    [1, channels, 1, 1],
                    vec![T::zero(); channels],
                )
            })
            .transpose()?;
        Self::new(w1, b1, w2, b2, reduction)
    }

    pub fn channels(&self) -> usize {
        self.w1.shape().as_matrix().1
    }

    /// The shared two-layer MLP with a ReLU between the layers.
    pub fn mlp(&self, v: &Tensor<T>) -> Result<Tensor<T>> {
        let h = linear(v, &self.w1, self.b1.as_ref())?.relu();
        linear(&h, &self.w2, self.b2.as_ref())
    }

    pub fn parameters(&self) -> Vec<&Tensor<T>> {
        let mut out = vec![&self.w1];
        out.extend(self.b1.as_ref());
        out.push(&self.w2);
        out.extend(self.b2.as_ref());
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = vec![&mut self.w1];
        out.extend(self.b1.as_mut());
        out.push(&mut self.w2);
        out.extend(self.b2.as_mut());
        out
    }
}

fn check_reduction(channels: usize, reduction: usize) -> Result<()> {
    if reduction == 0 || !channels.is_multiple_of(reduction) || channels < reduction {
        return Err(Error::InvalidSpec(format!(
            "reduction ratio {reduction} must divide the channel count {channels}"
        )));
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct SpatialAttention<T: Element = f32> {
    /// `(1, 2, 7, 7)`
    pub weight: Tensor<T>,
    /// one value
    pub bias: Tensor<T>,
}

impl<T: Element> SpatialAttention<T> {
    pub fn new(weight: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        if weight.shape().0 != [1, 2, SPATIAL_KERNEL, SPATIAL_KERNEL] || bias.numel() != 1 {
            return Err(Error::shape(
                "spatial attention",
                weight.shape(),
                bias.shape(),
            ));
        }
        Ok(Self { weight, bias })
    }

    pub fn init(prefix: &str, rng: &mut impl Rng) -> Result<Self> {
        let k = SPATIAL_KERNEL;
        let weight = Tensor::parameter(
            format!("{prefix}.weight"),
            [1, 2, k, k],
            init::he_normal(rng, 2 * k * k, 2 * k * k),
        )?;
        let bias = Tensor::parameter(format!("{prefix}.bias"), [1, 1, 1, 1], vec![T::zero()])?;
        Self::new(weight, bias)
    }
}

#[derive(Clone, Debug)]
pub struct Cbam<T: Element = f32> {
    pub channel: ChannelAttention<T>,
    pub spatial: SpatialAttention<T>,
}

impl<T: Element> Cbam<T> {
    pub fn init(
        prefix: &str,
        channels: usize,
        reduction: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            channel: ChannelAttention::init(
                &format!("{prefix}.channel"),
                channels,
                reduction,
                bias,
                rng,
            )?,
            spatial: SpatialAttention::init(&format!("{prefix}.spatial"), rng)?,
        })
    }

    /// Same layout with every weight and bias zero.
    pub fn zeros(channels: usize, reduction: usize) -> Result<Self> {
        check_reduction(channels, reduction)?;
        let hidden = channels / reduction;
        Ok(Self {
            channel: ChannelAttention::new(
                Tensor::zeros([hidden, channels, 1, 1]).requires_grad_leaf(),
                Some(Tensor::zeros([1, hidden, 1, 1]).requires_grad_leaf()),
                Tensor::zeros([channels, hidden, 1, 1]).requires_grad_leaf(),
                Some(Tensor::zeros([1, channels, 1, 1]).requires_grad_leaf()),
                reduction,
            )?,
            spatial: SpatialAttention::new(
                Tensor::zeros([1, 2, SPATIAL_KERNEL, SPATIAL_KERNEL]).requires_grad_leaf(),
                Tensor::zeros([1, 1, 1, 1]).requires_grad_leaf(),
            )?,
        })
    }

    pub fn forward(&self, f: &Tensor<T>) -> Result<Tensor<T>> {
        cbam_apply(self, f)
    }

    pub fn parameters(&self) -> Vec<&Tensor<T>> {
        let mut out = self.channel.parameters();
        out.push(&self.spatial.weight);
        out.push(&self.spatial.bias);
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = self.channel.parameters_mut();
        out.push(&mut self.spatial.weight);
        out.push(&mut self.spatial.bias);
        out
    }
}

/// Returns the channel gates `(N, C, 1, 1)` and the gated features.
pub fn channel_attention<T: Element>(
    ca: &ChannelAttention<T>,
    f: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    if f.shape().c() != ca.channels() {
        return Err(Error::shape("channel_attention", f.shape(), ca.w1.shape()));
    }
    let avg = ca.mlp(&global_avg_pool(f)?)?;
    let max = ca.mlp(&global_max_pool(f)?)?;
    let gates = avg.add(&max)?.sigmoid();
    let gates = gates.reshape([f.shape().n(), f.shape().c(), 1, 1])?;
    let refined = f.mul(&gates)?;
    Ok((gates, refined))
}

/// Returns the spatial gates `(N, 1, H, W)` and the gated features.
pub fn spatial_attention<T: Element>(
    sa: &SpatialAttention<T>,
    f: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let pooled = concat_channels(&[channel_mean(f)?, channel_max(f)?])?;
    let gates = conv2d(&pooled, &sa.weight, Some(&sa.bias), 1, Padding::Same)?.sigmoid();
    let refined = f.mul(&gates)?;
    Ok((gates, refined))
}

pub fn cbam_apply<T: Element>(block: &Cbam<T>, f: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, f1) = channel_attention(&block.channel, f)?;
    let (_, f2) = spatial_attention(&block.spatial, &f1)?;
    Ok(f2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(shape: [usize; 4], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
    }

    #[test]
    fn zero_cbam_quarters_the_input() {
        let block = Cbam::<f64>::zeros(8, 2).unwrap();
        let f = random([2, 8, 5, 5], 1);
        let out = block.forward(&f).unwrap();
        for (o, x) in out.data().iter().zip(f.data()) {
            assert_eq!(*o, 0.25 * x);
        }
    }

    #[test]
    fn zero_input_stays_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let block = Cbam::<f64>::init("cbam", 8, 4, true, &mut rng).unwrap();
        let out = block.forward(&Tensor::zeros([1, 8, 4, 4])).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn reduction_must_divide_channels() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(ChannelAttention::<f32>::init("ca", 12, 8, true, &mut rng).is_err());
        assert!(ChannelAttention::<f32>::init("ca", 16, 8, true, &mut rng).is_ok());
    }

    #[test]
    fn channel_gates_from_constant_maps() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let ca = ChannelAttention::<f64>::init("ca", 4, 2, true, &mut rng).unwrap();
        let v = [0.3, -1.2, 0.8, 2.0];
        let f = Tensor::new([1, 4, 3, 3], v.iter().flat_map(|&x| [x; 9]).collect()).unwrap();
        let (gates, _) = channel_attention(&ca, &f).unwrap();
        // hand-rolled MLP
        let (w1, w2) = (ca.w1.data(), ca.w2.data());
        let hidden: Vec<f64> = (0..2)
            .map(|j| (0..4).map(|i| w1[j * 4 + i] * v[i]).sum::<f64>().max(0.0))
            .collect();
        for c in 0..4 {
            let z: f64 = (0..2).map(|j| w2[c * 2 + j] * hidden[j]).sum();
            let want = 1.0 / (1.0 + (-2.0 * z).exp());
            assert!((gates.data()[c] - want).abs() < 1e-12);
        }
    }
}
