use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::Mode;
use crate::tensor::{Backward, Element, Tensor};

/// Inverted dropout. The mask of the `k`-th training call is a pure function
/// of `(seed, k)`.
#[derive(Clone, Debug)]
pub struct Dropout {
    pub rate: f64,
    pub seed: u64,
    calls: u64,
}

impl Dropout {
    pub fn new(rate: f64, seed: u64) -> Result<Self> {
        check_rate(rate)?;
        Ok(Self {
            rate,
            seed,
            calls: 0,
        })
    }

    /// Number of train-mode invocations so far.
    pub fn calls(&self) -> u64 {
        self.calls
    }

    pub fn forward<T: Element>(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        match mode {
            Mode::Infer => Ok(x.clone()),
            Mode::Train => {
                let stream = self.calls;
                self.calls += 1;
                dropout(x, self.rate, self.seed, stream)
            }
        }
    }
}

fn check_rate(rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidArgument(format!(
            "dropout rate must lie in [0, 1), got {rate}"
        )));
    }
    Ok(())
}

struct MaskOp<T> {
    mask: Vec<T>,
}

impl<T: Element> Backward<T> for MaskOp<T> {
    fn name(&self) -> &'static str {
        "dropout"
    }

    fn backward(&self, _inputs: &[Tensor<T>], _output: &[T], grad: &[T]) -> Vec<Option<Vec<T>>> {
        vec![Some(
            grad.iter().zip(&self.mask).map(|(&g, &m)| g * m).collect(),
        )]
    }
}

/// Zeroes each element with probability `rate` and scales survivors by `1 / (1 - rate)`.
pub fn dropout<T: Element>(x: &Tensor<T>, rate: f64, seed: u64, stream: u64) -> Result<Tensor<T>> {
    check_rate(rate)?;
    if rate == 0.0 {
        return Ok(x.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let keep = T::of_f64(1.0 / (1.0 - rate));
    let mask: Vec<T> = (0..x.numel())
        .map(|_| {
            if rng.random::<f64>() < rate {
                T::zero()
            } else {
                keep
            }
        })
        .collect();
    let data = x.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
    Ok(Tensor::from_op(
        x.shape(),
        data,
        vec![x.clone()],
        MaskOp { mask },
    ))
}
