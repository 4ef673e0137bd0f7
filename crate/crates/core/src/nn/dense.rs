use crate::error::{Error, Result};
use crate::linalg::{self, MatMut, MatRef};
use crate::tensor::{Backward, Element, Shape, Tensor};

/// Fully connected layer, `y = x W^T + b`.
#[derive(Clone, Debug)]
pub struct Dense<T: Element = f32> {
    /// `(out, in)`
    pub weight: Tensor<T>,
    /// `out` values
    pub bias: Tensor<T>,
}

impl<T: Element> Dense<T> {
    pub fn new(weight: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        let (out, _) = weight.shape().as_matrix();
        if bias.numel() != out {
            return Err(Error::shape("dense bias", weight.shape(), bias.shape()));
        }
        Ok(Self { weight, bias })
    }

    pub fn in_features(&self) -> usize {
        self.weight.shape().as_matrix().1
    }

    pub fn out_features(&self) -> usize {
        self.weight.shape().as_matrix().0
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        linear(x, &self.weight, Some(&self.bias))
    }
}

struct LinearOp {
    n: usize,
    fan_in: usize,
    fan_out: usize,
}

impl<T: Element> Backward<T> for LinearOp {
    fn name(&self) -> &'static str {
        "linear"
    }

    fn backward(&self, inputs: &[Tensor<T>], _output: &[T], grad: &[T]) -> Vec<Option<Vec<T>>> {
        let (x, w) = (&inputs[0], &inputs[1]);
        let (n, fi, fo) = (self.n, self.fan_in, self.fan_out);
        let dx = x.requires_grad().then(|| {
            let mut dx = vec![T::zero(); n * fi];
            linalg::gemm(
                T::one(),
                MatRef::row_major(grad, n, fo),
                MatRef::row_major(w.data(), fo, fi),
                T::zero(),
                MatMut::row_major(&mut dx, n, fi),
            );
            dx
        });
        let dw = w.requires_grad().then(|| {
            let mut dw = vec![T::zero(); fo * fi];
            linalg::gemm(
                T::one(),
                MatRef::transposed(grad, fo, n),
                MatRef::row_major(x.data(), n, fi),
                T::zero(),
                MatMut::row_major(&mut dw, fo, fi),
            );
            dw
        });
        let mut out = vec![dx, dw];
        if let Some(b) = inputs.get(2) {
            out.push(b.requires_grad().then(|| {
                let mut db = vec![T::zero(); fo];
                for row in grad.chunks(fo) {
                    db.iter_mut().zip(row).for_each(|(d, &g)| *d = *d + g);
                }
                db
            }));
        }
        out
    }
}

/// `x` viewed as `(N, in)` times `weight (out, in)` transposed, plus `bias`;
/// the result has shape `(N, out, 1, 1)`.
pub fn linear<T: Element>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let (n, fi) = x.shape().as_matrix();
    let (fo, wi) = weight.shape().as_matrix();
    if fi != wi {
        return Err(Error::shape("linear", x.shape(), weight.shape()));
    }
    let mut y = vec![T::zero(); n * fo];
    if let Some(b) = bias {
        if b.numel() != fo {
            return Err(Error::shape("linear bias", weight.shape(), b.shape()));
        }
        for row in y.chunks_mut(fo) {
            row.copy_from_slice(b.data());
        }
    }
    linalg::gemm(
        T::one(),
        MatRef::row_major(x.data(), n, fi),
        MatRef::transposed(weight.data(), fi, fo),
        if bias.is_some() { T::one() } else { T::zero() },
        MatMut::row_major(&mut y, n, fo),
    );
    let mut inputs = vec![x.clone(), weight.clone()];
    if let Some(b) = bias {
        inputs.push(b.clone());
    }
    Ok(Tensor::from_op(
        Shape::matrix(n, fo),
        y,
        inputs,
        LinearOp {
            n,
            fan_in: fi,
            fan_out: fo,
        },
    ))
}
