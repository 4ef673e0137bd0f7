use crate::error::{Error, Result};
use crate::tensor::{Backward, Element, Shape, Tensor};

/// Lower clamp applied to probabilities inside the logarithm.
pub const LOG_FLOOR: f64 = 1e-12;

struct SoftmaxOp {
    k: usize,
}

impl<T: Element> Backward<T> for SoftmaxOp {
    fn name(&self) -> &'static str {
        "softmax"
    }

    fn backward(&self, _inputs: &[Tensor<T>], output: &[T], grad: &[T]) -> Vec<Option<Vec<T>>> {
        let mut dx = Vec::with_capacity(output.len());
        for (y, g) in output.chunks(self.k).zip(grad.chunks(self.k)) {
            let dot: T = y.iter().zip(g).map(|(&a, &b)| a * b).sum();
            dx.extend(y.iter().zip(g).map(|(&yi, &gi)| yi * (gi - dot)));
        }
        vec![Some(dx)]
    }
}

/// Row-wise softmax of `logits` viewed as `(N, K)`, computed with max subtraction.
pub fn softmax<T: Element>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, k) = logits.shape().as_matrix();
    if k == 0 {
        return Err(Error::InvalidArgument(
            "softmax needs at least one class".into(),
        ));
    }
    if logits.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("softmax logits".into()));
    }
    let mut out = Vec::with_capacity(n * k);
    for row in logits.data().chunks(k) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = row.iter().map(|&v| (v - max).exp()).collect();
        let total: T = exps.iter().copied().sum();
        out.extend(exps.into_iter().map(|e| e / total));
    }
    Ok(Tensor::from_op(
        Shape::matrix(n, k),
        out,
        vec![logits.clone()],
        SoftmaxOp { k },
    ))
}

struct CrossEntropyOp;

impl<T: Element> Backward<T> for CrossEntropyOp {
    fn name(&self) -> &'static str {
        "cross_entropy"
    }

    fn backward(&self, inputs: &[Tensor<T>], _output: &[T], grad: &[T]) -> Vec<Option<Vec<T>>> {
        let (probs, labels) = (&inputs[0], &inputs[1]);
        let n = T::of_f64(probs.shape().n() as f64);
        let floor = T::of_f64(LOG_FLOOR);
        let dp = probs
            .data()
            .iter()
            .zip(labels.data())
            .map(|(&p, &y)| {
                if y == T::zero() || p <= floor {
                    T::zero()
                } else {
                    -grad[0] * y / (n * p)
                }
            })
            .collect();
        vec![Some(dp), None]
    }
}

/// Mean over rows of `-sum_k y_k log(max(p_k, 1e-12))`.
pub fn cross_entropy<T: Element>(probs: &Tensor<T>, labels: &Tensor<T>) -> Result<Tensor<T>> {
    if probs.shape().as_matrix() != labels.shape().as_matrix() {
        return Err(Error::shape("cross_entropy", probs.shape(), labels.shape()));
    }
    let (n, k) = probs.shape().as_matrix();
    if n == 0 {
        return Err(Error::InvalidArgument(
            "cross_entropy over an empty batch".into(),
        ));
    }
    for (i, row) in labels.data().chunks(k).enumerate() {
        let ones = row.iter().filter(|&&v| v == T::one()).count();
        let zeros = row.iter().filter(|&&v| v == T::zero()).count();
        if ones != 1 || ones + zeros != k {
            return Err(Error::InvalidArgument(format!(
                "label row {i} is not one-hot"
            )));
        }
    }
    let total: f64 = probs
        .data()
        .iter()
        .zip(labels.data())
        .filter(|(_, &y)| y != T::zero())
        .map(|(&p, &y)| -y.as_f64() * p.as_f64().max(LOG_FLOOR).ln())
        .sum();
    let loss = T::of_f64(total / n as f64);
    Ok(Tensor::from_op(
        Shape::SCALAR,
        vec![loss],
        vec![probs.clone(), labels.clone()],
        CrossEntropyOp,
    ))
}

/// One-hot rows `(N, K, 1, 1)` for class indices.
pub fn one_hot<T: Element>(labels: &[usize], classes: usize) -> Result<Tensor<T>> {
    let mut data = vec![T::zero(); labels.len() * classes];
    for (i, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(Error::InvalidArgument(format!(
                "label {l} out of range for {classes} classes"
            )));
        }
        data[i * classes + l] = T::one();
    }
    Tensor::new(Shape::matrix(labels.len(), classes), data)
}
