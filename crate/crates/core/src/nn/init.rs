//! Parameter initialization.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::Element;

/// He-normal draw: `N(0, 2 / fan_in)`.
pub fn he_normal<T: Element>(rng: &mut impl Rng, fan_in: usize, len: usize) -> Vec<T> {
    let std = (2.0 / fan_in.max(1) as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("finite standard deviation");
    (0..len).map(|_| T::of_f64(normal.sample(rng))).collect()
}
