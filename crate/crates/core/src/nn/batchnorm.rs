use crate::error::{Error, Result};
use crate::nn::Mode;
use crate::tensor::{Backward, Element, Tensor};

pub const BN_EPSILON: f64 = 1e-5;
/// Weight of the old running statistic: `new = 0.9 * old + 0.1 * batch`.
pub const BN_MOMENTUM: f64 = 0.9;

/// Per-channel batch normalization with tracked running statistics.
#[derive(Clone, Debug)]
pub struct BatchNorm2d<T: Element = f32> {
    pub name: String,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: f64,
    pub epsilon: f64,
    stats_ready: bool,
}

impl<T: Element> BatchNorm2d<T> {
    /// `gamma = 1`, `beta = 0`, running mean 0 and variance 1 (not yet usable for inference).
    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        let name = name.into();
        Self {
            gamma: Tensor::parameter(
                format!("{name}.gamma"),
                [1, channels, 1, 1],
                vec![T::one(); channels],
            )
            .expect("consistent shape"),
            beta: Tensor::parameter(
                format!("{name}.beta"),
                [1, channels, 1, 1],
                vec![T::zero(); channels],
            )
            .expect("consistent shape"),
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            momentum: BN_MOMENTUM,
            epsilon: BN_EPSILON,
            stats_ready: false,
            name,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    /// Whether running statistics exist (from training or a checkpoint).
    pub fn has_running_stats(&self) -> bool {
        self.stats_ready
    }

    /// Installs running statistics, e.g. from a checkpoint.
    pub fn set_running_stats(&mut self, mean: Vec<T>, var: Vec<T>) -> Result<()> {
        let c = self.channels();
        if mean.len() != c || var.len() != c {
            return Err(Error::InvalidArgument(format!(
                "{}: expected {c} running statistics, got {} / {}",
                self.name,
                mean.len(),
                var.len()
            )));
        }
        if var.iter().any(|v| *v < T::zero()) {
            return Err(Error::InvalidArgument(format!(
                "{}: negative running variance",
                self.name
            )));
        }
        self.running_mean = mean;
        self.running_var = var;
        self.stats_ready = true;
        Ok(())
    }

    /// Train mode normalizes with batch statistics and folds them into the
    /// running averages; infer mode uses the running averages.
    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        match mode {
            Mode::Train => {
                let (y, mean, var) = batch_norm_train(x, &self.gamma, &self.beta, self.epsilon)?;
                let s = x.shape();
                let m = (s.n() * s.h() * s.w()) as f64;
                let keep = T::of_f64(self.momentum);
                let take = T::of_f64(1.0 - self.momentum);
                let unbias = T::of_f64(m / (m - 1.0));
                for c in 0..self.channels() {
                    self.running_mean[c] = keep * self.running_mean[c] + take * mean[c];
                    self.running_var[c] = keep * self.running_var[c] + take * var[c] * unbias;
                }
                self.stats_ready = true;
                Ok(y)
            }
            Mode::Infer => self.forward_infer(x),
        }
    }

    pub fn forward_infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        if !self.stats_ready {
            return Err(Error::MissingRunningStats(self.name.clone()));
        }
        batch_norm_infer(
            x,
            &self.gamma,
            &self.beta,
            &self.running_mean,
            &self.running_var,
            self.epsilon,
        )
    }
}

fn check_channels<T: Element>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<usize> {
    let c = x.shape().c();
    if gamma.numel() != c || beta.numel() != c {
        return Err(Error::shape(
            "batch_norm channels",
            x.shape(),
            gamma.shape(),
        ));
    }
    Ok(c)
}

struct BatchNormTrainOp<T> {
    x_hat: Vec<T>,
    inv_std: Vec<T>,
}

impl<T: Element> Backward<T> for BatchNormTrainOp<T> {
    fn name(&self) -> &'static str {
        "batch_norm_train"
    }

    fn backward(&self, inputs: &[Tensor<T>], _output: &[T], grad: &[T]) -> Vec<Option<Vec<T>>> {
        let (x, gamma, beta) = (&inputs[0], &inputs[1], &inputs[2]);
        let s = x.shape();
        let (n, c, plane) = (s.n(), s.c(), s.h() * s.w());
        let m = T::of_f64((n * plane) as f64);
        let mut sum_g = vec![T::zero(); c];
        let mut sum_gx = vec![T::zero(); c];
        for i in 0..n {
            for ch in 0..c {
                let start = (i * c + ch) * plane;
                for j in start..start + plane {
                    sum_g[ch] = sum_g[ch] + grad[j];
                    sum_gx[ch] = sum_gx[ch] + grad[j] * self.x_hat[j];
                }
            }
        }
        let dx = x.requires_grad().then(|| {
            let mut dx = vec![T::zero(); x.numel()];
            for i in 0..n {
                for ch in 0..c {
                    let scale = gamma.data()[ch] * self.inv_std[ch] / m;
                    let start = (i * c + ch) * plane;
                    for j in start..start + plane {
                        dx[j] = scale * (m * grad[j] - sum_g[ch] - self.x_hat[j] * sum_gx[ch]);
                    }
                }
            }
            dx
        });
        vec![
            dx,
            gamma.requires_grad().then(|| sum_gx.clone()),
            beta.requires_grad().then(|| sum_g.clone()),
        ]
    }
}

/// Normalizes with the batch's per-channel statistics over `(N, H, W)`.
///
/// Returns the output with the batch mean and (biased) variance.
pub fn batch_norm_train<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    epsilon: f64,
) -> Result<(Tensor<T>, Vec<T>, Vec<T>)> {
    let c = check_channels(x, gamma, beta)?;
    let s = x.shape();
    let (n, plane) = (s.n(), s.h() * s.w());
    let m = n * plane;
    if m < 2 {
        return Err(Error::InvalidArgument(format!(
            "batch norm in train mode needs at least two values per channel, got input {s}"
        )));
    }
    let xd = x.data();
    let mut mean = vec![0.0f64; c];
    let mut var = vec![0.0f64; c];
    for i in 0..n {
        for ch in 0..c {
            let start = (i * c + ch) * plane;
            mean[ch] += xd[start..start + plane]
                .iter()
                .map(|v| v.as_f64())
                .sum::<f64>();
        }
    }
    mean.iter_mut().for_each(|v| *v /= m as f64);
    for i in 0..n {
        for ch in 0..c {
            let start = (i * c + ch) * plane;
            var[ch] += xd[start..start + plane]
                .iter()
                .map(|v| (v.as_f64() - mean[ch]).powi(2))
                .sum::<f64>();
        }
    }
    var.iter_mut().for_each(|v| *v /= m as f64);
    let inv_std: Vec<T> = var
        .iter()
        .map(|v| T::of_f64(1.0 / (v + epsilon).sqrt()))
        .collect();
    let mean_t: Vec<T> = mean.iter().map(|&v| T::of_f64(v)).collect();
    let mut x_hat = vec![T::zero(); x.numel()];
    let mut y = vec![T::zero(); x.numel()];
    for i in 0..n {
        for ch in 0..c {
            let (g, b) = (gamma.data()[ch], beta.data()[ch]);
            let start = (i * c + ch) * plane;
            for j in start..start + plane {
                let h = (xd[j] - mean_t[ch]) * inv_std[ch];
                x_hat[j] = h;
                y[j] = g * h + b;
            }
        }
    }
    let out = Tensor::from_op(
        s,
        y,
        vec![x.clone(), gamma.clone(), beta.clone()],
        BatchNormTrainOp { x_hat, inv_std },
    );
    Ok((out, mean_t, var.iter().map(|&v| T::of_f64(v)).collect()))
}

struct BatchNormInferOp<T> {
    x_hat: Vec<T>,
    inv_std: Vec<T>,
}

impl<T: Element> Backward<T> for BatchNormInferOp<T> {
    fn name(&self) -> &'static str {
        "batch_norm_infer"
    }

    fn backward(&self, inputs: &[Tensor<T>], _output: &[T], grad: &[T]) -> Vec<Option<Vec<T>>> {
        let (x, gamma, beta) = (&inputs[0], &inputs[1], &inputs[2]);
        let s = x.shape();
        let (c, plane) = (s.c(), s.h() * s.w());
        let channel = |j: usize| (j / plane) % c;
        let dx = x.requires_grad().then(|| {
            grad.iter()
                .enumerate()
                .map(|(j, &g)| g * gamma.data()[channel(j)] * self.inv_std[channel(j)])
                .collect()
        });
        let dgamma = gamma.requires_grad().then(|| {
            let mut d = vec![T::zero(); c];
            for (j, &g) in grad.iter().enumerate() {
                d[channel(j)] = d[channel(j)] + g * self.x_hat[j];
            }
            d
        });
        let dbeta = beta.requires_grad().then(|| {
            let mut d = vec![T::zero(); c];
            for (j, &g) in grad.iter().enumerate() {
                d[channel(j)] = d[channel(j)] + g;
            }
            d
        });
        vec![dx, dgamma, dbeta]
    }
}

/// Normalizes with fixed statistics.
pub fn batch_norm_infer<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    mean: &[T],
    var: &[T],
    epsilon: f64,
) -> Result<Tensor<T>> {
    let c = check_channels(x, gamma, beta)?;
    if mean.len() != c || var.len() != c {
        return Err(Error::shape(
            "batch_norm statistics",
            x.shape(),
            format!("{} channels", mean.len()),
        ));
    }
    let plane = x.shape().h() * x.shape().w();
    let inv_std: Vec<T> = var
        .iter()
        .map(|v| T::of_f64(1.0 / (v.as_f64() + epsilon).sqrt()))
        .collect();
    let mut x_hat = vec![T::zero(); x.numel()];
    let mut y = vec![T::zero(); x.numel()];
    for (j, &v) in x.data().iter().enumerate() {
        let ch = (j / plane) % c;
        let h = (v - mean[ch]) * inv_std[ch];
        x_hat[j] = h;
        y[j] = gamma.data()[ch] * h + beta.data()[ch];
    }
    Ok(Tensor::from_op(
        x.shape(),
        y,
        vec![x.clone(), gamma.clone(), beta.clone()],
        BatchNormInferOp { x_hat, inv_std },
    ))
}
