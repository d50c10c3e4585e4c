use crate::error::{Error, Result};
use crate::nn::scalar::{gemm, Op};
use crate::nn::{Scalar, Tensor};

/// Fully connected layer, `y = W x + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense<S> {
    /// `[out, in]`
    pub weight: Tensor<S>,
    /// `[out]`
    pub bias: Tensor<S>,
}

impl<S: Scalar> Dense<S> {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Dense {
            weight: Tensor::zeros(&[outputs, inputs]),
            bias: Tensor::zeros(&[outputs]),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape()[0]
    }

    /// `x` is `[N, in]`; returns `[N, out]`.
    pub fn forward(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let n = match *x.shape() {
            [n, i] if i == self.inputs() => n,
            _ => {
                return Err(Error::ShapeMismatch {
                    expected: vec![x.shape().first().copied().unwrap_or(0), self.inputs()],
                    found: x.shape().to_vec(),
                })
            }
        };
        let out = self.outputs();
        let mut y = Tensor::zeros(&[n, out]);
        for row in y.data_mut().chunks_exact_mut(out) {
            row.copy_from_slice(self.bias.data());
        }
        gemm(n, self.inputs(), out, x.data(), Op::N, self.weight.data(), Op::T, S::one(), y.data_mut());
        Ok(y)
    }

    /// Returns `(grad_input, grad_weight, grad_bias)` given the forward input.
    pub fn backward(
        &self,
        grad_out: &Tensor<S>,
        input: &Tensor<S>,
    ) -> Result<(Tensor<S>, Tensor<S>, Tensor<S>)> {
        let n = input.shape()[0];
        let (inp, out) = (self.inputs(), self.outputs());
        grad_out.expect_shape(&[n, out])?;
        let mut grad_weight = Tensor::zeros(&[out, inp]);
        gemm(out, n, inp, grad_out.data(), Op::T, input.data(), Op::N, S::zero(), grad_weight.data_mut());
        let mut grad_bias = Tensor::zeros(&[out]);
        for row in grad_out.data().chunks_exact(out) {
            for (b, &g) in grad_bias.data_mut().iter_mut().zip(row) {
                *b += g;
            }
        }
        let mut grad_in = Tensor::zeros(&[n, inp]);
        gemm(n, out, inp, grad_out.data(), Op::N, self.weight.data(), Op::N, S::zero(), grad_in.data_mut());
        Ok((grad_in, grad_weight, grad_bias))
    }
}
