//! Central finite-difference verification of analytic gradients.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::{no_grad, Element, Tensor};

/// Floor applied to the relative-error denominator.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-8;

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(RELATIVE_ERROR_FLOOR)
}

/// Compares the analytic gradient of `f` at `x` against central differences
/// and returns the largest relative error over all coordinates of `x`.
///
/// `f` is usually scalar valued. When it returns a larger tensor the check
/// differentiates the fixed random projection `sum_i r_i * f(x)_i`; the
/// projection is accumulated in `f64` so that outputs untouched by a
/// perturbation cancel exactly.
pub fn finite_difference_check<T, F>(f: F, x: &Tensor<T>, epsilon: f64) -> Result<f64>
where
    T: Element,
    F: Fn(&Tensor<T>) -> Result<Tensor<T>>,
{
    check_against_reference(&f, &f, x, epsilon)
}

/// Like [`finite_difference_check`], but the central differences come from
/// `reference`, the same function evaluated in another precision `U`.
///
/// Checking an `f32` gradient against `f64` differences removes the rounding
/// noise of single-precision differencing, which otherwise dominates the
/// relative error of small gradient entries. `x` must be exactly
/// representable in `U`.
pub fn check_against_reference<T, U, F, G>(
    f: F,
    reference: G,
    x: &Tensor<T>,
    epsilon: f64,
) -> Result<f64>
where
    T: Element,
    U: Element,
    F: Fn(&Tensor<T>) -> Result<Tensor<T>>,
    G: Fn(&Tensor<U>) -> Result<Tensor<U>>,
{
    if !(epsilon > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "epsilon must be positive, got {epsilon}"
        )));
    }
    let leaf = x.detach().requires_grad_leaf();
    let y = f(&leaf)?;
    let weights: Vec<f64> = if y.numel() == 1 {
        vec![1.0]
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_9c4a);
        (0..y.numel())
            .map(|_| StandardNormal.sample(&mut rng))
            .collect()
    };
    check_finite(y.data(), "function value")?;
    let seed: Vec<T> = weights.iter().map(|&w| T::of_f64(w)).collect();
    y.backward_from(&seed)?;
    let analytic = leaf
        .grad()
        .map(|g| g.to_vec())
        .unwrap_or_else(|| vec![T::zero(); x.numel()]);
    check_finite(&analytic, "analytic gradient")?;

    let base: Vec<U> = x.data().iter().map(|v| U::of_f64(v.as_f64())).collect();
    let eps = U::of_f64(epsilon);
    let mut worst: f64 = 0.0;
    for i in 0..base.len() {
        let mut plus = base.clone();
        let mut minus = base.clone();
        plus[i] = base[i] + eps;
        minus[i] = base[i] - eps;
        let step = (plus[i] - minus[i]).as_f64();
        let (yp, ym) = no_grad(|| -> Result<_> {
            let yp = reference(&Tensor::new(x.shape(), plus.clone())?)?;
            let ym = reference(&Tensor::new(x.shape(), minus.clone())?)?;
            Ok((yp, ym))
        })?;
        if yp.numel() != weights.len() || ym.numel() != weights.len() {
            return Err(Error::shape(
                "gradient check reference",
                y.shape(),
                yp.shape(),
            ));
        }
        check_finite(yp.data(), "perturbed function value")?;
        check_finite(ym.data(), "perturbed function value")?;
        let diff: f64 = yp
            .data()
            .iter()
            .zip(ym.data())
            .zip(&weights)
            .map(|((&p, &m), &w)| w * (p.as_f64() - m.as_f64()))
            .sum();
        let numeric = diff / step;
        worst = worst.max(relative_error(analytic[i].as_f64(), numeric));
    }
    Ok(worst)
}

fn check_finite<T: Element>(values: &[T], what: &str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}
