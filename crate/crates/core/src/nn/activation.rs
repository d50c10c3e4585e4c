use crate::nn::{Scalar, Tensor};

pub fn relu_forward<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    x.map(|v| if v > S::zero() { v } else { S::zero() })
}

/// Masks `grad_out` by `input > 0`.
pub fn relu_backward<S: Scalar>(grad_out: &Tensor<S>, input: &Tensor<S>) -> Tensor<S> {
    let mut g = grad_out.clone();
    for (v, &x) in g.data_mut().iter_mut().zip(input.data()) {
        if x <= S::zero() {
            *v = S::zero();
        }
    }
    g
}

#[inline]
pub fn sigmoid<S: Scalar>(x: S) -> S {
    // split by sign so exp never overflows
    if x >= S::zero() {
        (S::one() + (-x).exp()).recip()
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

pub fn sigmoid_forward<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    x.map(sigmoid)
}

/// Backward from the forward output `y`: `g * y * (1 - y)`.
pub fn sigmoid_backward<S: Scalar>(grad_out: &Tensor<S>, output: &Tensor<S>) -> Tensor<S> {
    let mut g = grad_out.clone();
    for (v, &y) in g.data_mut().iter_mut().zip(output.data()) {
        *v *= y * (S::one() - y);
    }
    g
}
