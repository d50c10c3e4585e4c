//! Batch normalization over `[N, C, H, W]` (per channel) or `[N, F]`
//! (per unit) inputs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BatchNormConfig {
    pub momentum: f64,
    pub epsilon: f64,
}

impl Default for BatchNormConfig {
    fn default() -> Self {
        BatchNormConfig {
            momentum: 0.1,
            epsilon: 1e-5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm<S> {
    pub gamma: Tensor<S>,
    pub beta: Tensor<S>,
    pub running_mean: Tensor<S>,
    pub running_var: Tensor<S>,
    pub config: BatchNormConfig,
}

#[derive(Debug, Clone)]
pub struct BatchNormCache<S> {
    shape: Vec<usize>,
    x_hat: Vec<S>,
    inv_std: Vec<S>,
}

/// `(batch, features, spatial)` view of a 2-D or 4-D input.
fn layout(shape: &[usize], features: usize) -> Result<(usize, usize)> {
    let ok = match shape {
        [_, f] => *f == features,
        [_, c, _, _] => *c == features,
        _ => false,
    };
    if !ok {
        let mut expected = shape.to_vec();
        if expected.len() >= 2 {
            expected[1] = features;
        }
        return Err(Error::ShapeMismatch {
            expected,
            found: shape.to_vec(),
        });
    }
    let spatial = shape[2..].iter().product();
    Ok((shape[0], spatial))
}

const LANES: usize = 8;

/// Sum of `f(x)` over `xs` with independent partial sums per lane, so the
/// loop vectorizes; the order is fixed, so results are deterministic.
fn lane_sum<S: Scalar>(xs: &[S], f: impl Fn(S) -> S) -> S {
    let mut acc = [S::zero(); LANES];
    let mut chunks = xs.chunks_exact(LANES);
    for c in &mut chunks {
        for (a, &v) in acc.iter_mut().zip(c) {
            *a += f(v);
        }
    }
    let mut total = chunks.remainder().iter().fold(S::zero(), |t, &v| t + f(v));
    for a in acc {
        total += a;
    }
    total
}

fn lane_dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    let mut acc = [S::zero(); LANES];
    let mut ca = a.chunks_exact(LANES);
    let mut cb = b.chunks_exact(LANES);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for k in 0..LANES {
            acc[k] += x[k] * y[k];
        }
    }
    let mut total = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .fold(S::zero(), |t, (&x, &y)| t + x * y);
    for v in acc {
        total += v;
    }
    total
}

impl<S: Scalar> BatchNorm<S> {
    pub fn new(features: usize, config: BatchNormConfig) -> Self {
        BatchNorm {
            gamma: Tensor::filled(&[features], S::one()),
            beta: Tensor::zeros(&[features]),
            running_mean: Tensor::zeros(&[features]),
            running_var: Tensor::filled(&[features], S::one()),
            config,
        }
    }

    pub fn features(&self) -> usize {
        self.gamma.len()
    }

    /// Train mode: normalizes with batch statistics and updates the
    /// running statistics.
    pub fn forward_train(&mut self, x: &Tensor<S>) -> Result<(Tensor<S>, BatchNormCache<S>)> {
        let f = self.features();
        let (n, spatial) = layout(x.shape(), f)?;
        if n < 2 {
            return Err(Error::BatchTooSmall(n));
        }
        let count = n * spatial;
        let inv_count = S::from_f64(1.0 / count as f64);
        let unbias = S::from_f64(count as f64 / (count - 1) as f64);
        let momentum = S::from_f64(self.config.momentum);
        let eps = S::from_f64(self.config.epsilon);
        let xd = x.data();

        let mut y = Tensor::zeros(x.shape());
        let mut x_hat = vec![S::zero(); xd.len()];
        let mut inv_std = vec![S::zero(); f];
        for c in 0..f {
            let plane = |s: usize| (s * f + c) * spatial..(s * f + c + 1) * spatial;
            let mut sum = S::zero();
            for s in 0..n {
                sum += lane_sum(&xd[plane(s)], |v| v);
            }
            let mean = sum * inv_count;
            let mut sq = S::zero();
            for s in 0..n {
                sq += lane_sum(&xd[plane(s)], |v| (v - mean) * (v - mean));
            }
            let var = sq * inv_count;
            let istd = (var + eps).sqrt().recip();
            inv_std[c] = istd;
            let (g, b) = (self.gamma.data()[c], self.beta.data()[c]);
            for s in 0..n {
                let r = plane(s);
                for ((h, o), &v) in x_hat[r.clone()]
                    .iter_mut()
                    .zip(&mut y.data_mut()[r.clone()])
                    .zip(&xd[r])
                {
                    *h = (v - mean) * istd;
                    *o = g * *h + b;
                }
            }
            let rm = &mut self.running_mean.data_mut()[c];
            *rm = (S::one() - momentum) * *rm + momentum * mean;
            let rv = &mut self.running_var.data_mut()[c];
            *rv = (S::one() - momentum) * *rv + momentum * var * unbias;
        }
        Ok((
            y,
            BatchNormCache {
                shape: x.shape().to_vec(),
                x_hat,
                inv_std,
            },
        ))
    }

    /// Eval mode: normalizes with the running statistics.
    pub fn forward_eval(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let f = self.features();
        let (n, spatial) = layout(x.shape(), f)?;
        let eps = S::from_f64(self.config.epsilon);
        let mut y = x.clone();
        let yd = y.data_mut();
        for c in 0..f {
            let scale = self.gamma.data()[c] * (self.running_var.data()[c] + eps).sqrt().recip();
            let shift = self.beta.data()[c] - self.running_mean.data()[c] * scale;
            for s in 0..n {
                for v in &mut yd[(s * f + c) * spatial..(s * f + c + 1) * spatial] {
                    *v = *v * scale + shift;
                }
            }
        }
        Ok(y)
    }

    /// Returns `(grad_input, grad_gamma, grad_beta)`.
    pub fn backward(
        &self,
        grad_out: &Tensor<S>,
        cache: &BatchNormCache<S>,
    ) -> Result<(Tensor<S>, Tensor<S>, Tensor<S>)> {
        grad_out.expect_shape(&cache.shape)?;
        let f = self.features();
        let (n, spatial) = layout(&cache.shape, f)?;
        let count = S::from_f64((n * spatial) as f64);
        let gd = grad_out.data();
        let mut grad_in = Tensor::zeros(&cache.shape);
        let mut grad_gamma = Tensor::zeros(&[f]);
        let mut grad_beta = Tensor::zeros(&[f]);
        for c in 0..f {
            let plane = |s: usize| (s * f + c) * spatial..(s * f + c + 1) * spatial;
            let (mut dg, mut db) = (S::zero(), S::zero());
            for s in 0..n {
                dg += lane_dot(&gd[plane(s)], &cache.x_hat[plane(s)]);
                db += lane_sum(&gd[plane(s)], |v| v);
            }
            grad_gamma.data_mut()[c] = dg;
            grad_beta.data_mut()[c] = db;
            let k = self.gamma.data()[c] * cache.inv_std[c] / count;
            let gi = grad_in.data_mut();
            for s in 0..n {
                let r = plane(s);
                for ((o, &g), &h) in gi[r.clone()]
                    .iter_mut()
                    .zip(&gd[r.clone()])
                    .zip(&cache.x_hat[r])
                {
                    *o = k * (count * g - db - h * dg);
                }
            }
        }
        Ok((grad_in, grad_gamma, grad_beta))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch(shape: &[usize]) -> Tensor<f64> {
        let len = shape.iter().product();
        Tensor::from_vec(shape, (0..len).map(|v| ((v * 7 % 13) as f64).sqrt() + v as f64 * 0.1).collect()).unwrap()
    }

    #[test]
    fn train_mode_standardizes_each_feature() {
        for shape in [vec![8, 4], vec![3, 2, 3, 3]] {
            let f = shape[1];
            let mut bn = BatchNorm::<f64>::new(f, BatchNormConfig::default());
            let x = batch(&shape);
            let (y, _) = bn.forward_train(&x).unwrap();
            let (n, spatial) = layout(&shape, f).unwrap();
            for c in 0..f {
                let vals: Vec<f64> = (0..n)
                    .flat_map(|s| y.data()[(s * f + c) * spatial..(s * f + c + 1) * spatial].to_vec())
                    .collect();
                let mean = vals.iter().sum::<f64>() / vals.len() as f64;
                let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
                assert!(mean.abs() < 1e-12);
                assert!((var - 1.0).abs() < 1e-3, "var {var}");
            }
        }
    }

    #[test]
    fn zero_gamma_outputs_beta() {
        let mut bn = BatchNorm::<f64>::new(4, BatchNormConfig::default());
        bn.gamma = Tensor::zeros(&[4]);
        bn.beta = Tensor::from_vec(&[4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (y, _) = bn.forward_train(&batch(&[8, 4])).unwrap();
        for (k, v) in y.data().iter().enumerate() {
            assert_eq!(*v, (k % 4 + 1) as f64);
        }
    }

    #[test]
    fn running_stats_follow_momentum() {
        let mut bn = BatchNorm::<f64>::new(1, BatchNormConfig::default());
        let x = Tensor::from_vec(&[2, 1], vec![1.0, 3.0]).unwrap();
        bn.forward_train(&x).unwrap();
        assert!((bn.running_mean.data()[0] - 0.2).abs() < 1e-15);
        // unbiased batch variance 2.0
        assert!((bn.running_var.data()[0] - (0.9 + 0.2)).abs() < 1e-15);
    }

    #[test]
    fn eval_uses_running_stats() {
        let mut bn = BatchNorm::<f64>::new(1, BatchNormConfig::default());
        bn.running_mean = Tensor::from_vec(&[1], vec![2.0]).unwrap();
        bn.running_var = Tensor::from_vec(&[1], vec![4.0 - 1e-5]).unwrap();
        let y = bn.forward_eval(&Tensor::from_vec(&[1, 1], vec![6.0]).unwrap()).unwrap();
        assert!((y.data()[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn batch_of_one_rejected_in_train_mode() {
        let mut bn = BatchNorm::<f64>::new(3, BatchNormConfig::default());
        assert!(matches!(
            bn.forward_train(&batch(&[1, 3])),
            Err(Error::BatchTooSmall(1))
        ));
        assert!(bn.forward_eval(&batch(&[1, 3])).is_ok());
    }
}
