//! Finite-difference gradient oracles shared by the integration tests.
#![allow(dead_code)]

use bgsnetd::nn::activation::{relu_backward, relu_forward, sigmoid_backward, sigmoid_forward};
use bgsnetd::nn::pool::{maxpool2_backward, maxpool2_forward};
use bgsnetd::nn::{bce_loss, Architecture, BatchNorm, BatchNormConfig, Conv2d, Dense, Model, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-5;

/// Gradients below this magnitude are compared in absolute terms.
pub const FLOOR: f64 = 1e-6;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, rand_vec(rng, n, scale)).unwrap()
}

/// Max relative error between `analytic` and central differences of `f`
/// with respect to every entry of `x`.
pub fn check_all(x: &mut Tensor<f64>, analytic: &[f64], mut f: impl FnMut(&Tensor<f64>) -> f64) -> f64 {
    assert_eq!(x.len(), analytic.len());
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let orig = x.data()[i];
        x.data_mut()[i] = orig + H;
        let up = f(x);
        x.data_mut()[i] = orig - H;
        let down = f(x);
        x.data_mut()[i] = orig;
        worst = worst.max(rel_err(analytic[i], (up - down) / (2.0 * H)));
    }
    worst
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Conv with loss `<r, conv(x)>`: input, weight and bias gradients.
pub fn conv_error(seed: u64) -> f64 {
    let mut g = rng(seed);
    let mut conv = Conv2d::<f64>::zeros(2, 3);
    conv.weight = rand_tensor(&mut g, &[3, 2, 3, 3], 0.5);
    conv.bias = rand_tensor(&mut g, &[3], 0.5);
    let mut x = rand_tensor(&mut g, &[2, 2, 6, 6], 1.0);
    let r = rand_vec(&mut g, 2 * 3 * 6 * 6, 1.0);
    let (_, cache) = conv.forward(&x).unwrap();
    let go = Tensor::from_vec(&[2, 3, 6, 6], r.clone()).unwrap();
    let (gi, gw, gb) = conv.backward(&go, &cache, true).unwrap();

    let loss = |c: &Conv2d<f64>, x: &Tensor<f64>| dot(c.forward(x).unwrap().0.data(), &r);
    let mut worst = check_all(&mut x, gi.unwrap().data(), |x| loss(&conv, x));
    let mut w = conv.weight.clone();
    worst = worst.max(check_all(&mut w, gw.data(), |w| {
        let mut c = conv.clone();
        c.weight = w.clone();
        loss(&c, &x)
    }));
    let mut b = conv.bias.clone();
    worst.max(check_all(&mut b, gb.data(), |b| {
        let mut c = conv.clone();
        c.bias = b.clone();
        loss(&c, &x)
    }))
}

pub fn relu_error(seed: u64) -> f64 {
    let mut g = rng(seed);
    // keep inputs away from the kink
    let mut x = Tensor::from_vec(
        &[3, 10],
        rand_vec(&mut g, 30, 1.0)
            .into_iter()
            .map(|v| if v.abs() < 0.05 { v + 0.1 } else { v })
            .collect(),
    )
    .unwrap();
    let r = rand_vec(&mut g, 30, 1.0);
    let go = Tensor::from_vec(&[3, 10], r.clone()).unwrap();
    let gi = relu_backward(&go, &x);
    check_all(&mut x, gi.data(), |x| dot(relu_forward(x).data(), &r))
}

pub fn sigmoid_error(seed: u64) -> f64 {
    let mut g = rng(seed);
    let mut x = rand_tensor(&mut g, &[3, 10], 4.0);
    let r = rand_vec(&mut g, 30, 1.0);
    let go = Tensor::from_vec(&[3, 10], r.clone()).unwrap();
    let gi = sigmoid_backward(&go, &sigmoid_forward(&x));
    check_all(&mut x, gi.data(), |x| dot(sigmoid_forward(x).data(), &r))
}

pub fn maxpool_error(seed: u64) -> f64 {
    let mut g = rng(seed);
    let mut x = rand_tensor(&mut g, &[2, 3, 4, 6], 1.0);
    let r = rand_vec(&mut g, 2 * 3 * 2 * 3, 1.0);
    let (y, argmax) = maxpool2_forward(&x).unwrap();
    let go = Tensor::from_vec(y.shape(), r.clone()).unwrap();
    let gi = maxpool2_backward(&go, &argmax, x.shape()).unwrap();
    check_all(&mut x, gi.data(), |x| dot(maxpool2_forward(x).unwrap().0.data(), &r))
}

pub fn dense_error(seed: u64) -> f64 {
    let mut g = rng(seed);
    let mut d = Dense::<f64>::zeros(5, 3);
    d.weight = rand_tensor(&mut g, &[3, 5], 0.5);
    d.bias = rand_tensor(&mut g, &[3], 0.5);
    let mut x = rand_tensor(&mut g, &[4, 5], 1.0);
    let r = rand_vec(&mut g, 12, 1.0);
    let go = Tensor::from_vec(&[4, 3], r.clone()).unwrap();
    let (gi, gw, gb) = d.backward(&go, &x).unwrap();
    let loss = |d: &Dense<f64>, x: &Tensor<f64>| dot(d.forward(x).unwrap().data(), &r);
    let mut worst = check_all(&mut x, gi.data(), |x| loss(&d, x));
    let mut w = d.weight.clone();
    worst = worst.max(check_all(&mut w, gw.data(), |w| {
        let mut c = d.clone();
        c.weight = w.clone();
        loss(&c, &x)
    }));
    let mut b = d.bias.clone();
    worst.max(check_all(&mut b, gb.data(), |b| {
        let mut c = d.clone();
        c.bias = b.clone();
        loss(&c, &x)
    }))
}

/// Train-mode batch norm on `shape` (`[N, F]` or `[N, C, H, W]`).
pub fn batchnorm_error(seed: u64, shape: &[usize]) -> f64 {
    let mut g = rng(seed);
    let f = shape[1];
    let mut bn = BatchNorm::<f64>::new(f, BatchNormConfig::default());
    bn.gamma = rand_tensor(&mut g, &[f], 1.0);
    bn.beta = rand_tensor(&mut g, &[f], 1.0);
    let mut x = rand_tensor(&mut g, shape, 2.0);
    let n: usize = shape.iter().product();
    let r = rand_vec(&mut g, n, 1.0);
    let (_, cache) = bn.clone().forward_train(&x).unwrap();
    let go = Tensor::from_vec(shape, r.clone()).unwrap();
    let (gi, gg, gb) = bn.backward(&go, &cache).unwrap();
    let loss = |b: &BatchNorm<f64>, x: &Tensor<f64>| dot(b.clone().forward_train(x).unwrap().0.data(), &r);
    let mut worst = check_all(&mut x, gi.data(), |x| loss(&bn, x));
    let mut gamma = bn.gamma.clone();
    worst = worst.max(check_all(&mut gamma, gg.data(), |t| {
        let mut b = bn.clone();
        b.gamma = t.clone();
        loss(&b, &x)
    }));
    let mut beta = bn.beta.clone();
    worst.max(check_all(&mut beta, gb.data(), |t| {
        let mut b = bn.clone();
        b.beta = t.clone();
        loss(&b, &x)
    }))
}

pub fn bce_error(seed: u64) -> f64 {
    let mut g = rng(seed);
    let mut p = Tensor::from_vec(&[16], (0..16).map(|_| g.random_range(0.02..0.98)).collect()).unwrap();
    let t: Vec<f64> = (0..16).map(|i| f64::from(i % 2 == 0)).collect();
    let (_, grad) = bce_loss(p.data(), &t);
    check_all(&mut p, &grad, |p| bce_loss(p.data(), &t).0)
}

/// End-to-end thumbnail model under BCE: max relative error over
/// `samples` randomly drawn parameters, and the number checked.
pub fn model_error(seed: u64, samples: usize) -> (f64, usize) {
    let mut g = rng(seed);
    let arch = Architecture::thumbnail();
    let mut model = Model::<f64>::init(&arch, seed).unwrap();
    // move biases and batch-norm affine terms off their init values
    for t in model.params_mut() {
        if t.shape().len() == 1 {
            for v in t.data_mut() {
                *v += g.random_range(-0.3..0.3);
            }
        }
    }
    let batch = 6;
    let x = rand_tensor(&mut g, &model.input_shape(batch), 1.0);
    let targets: Vec<f64> = (0..batch).map(|i| f64::from(i % 2 == 1)).collect();
    let loss = |m: &mut Model<f64>| {
        let (p, _) = m.forward_train(&x).unwrap();
        bce_loss(&p, &targets).0
    };
    let (p, cache) = model.forward_train(&x).unwrap();
    let (_, gp) = bce_loss(&p, &targets);
    let grads = model.backward(&cache, &gp).unwrap();

    let sizes: Vec<usize> = model.params().iter().map(|t| t.len()).collect();
    let mut worst: f64 = 0.0;
    for _ in 0..samples {
        let ti = g.random_range(0..sizes.len());
        let k = g.random_range(0..sizes[ti]);
        let orig = model.params()[ti].data()[k];
        model.params_mut()[ti].data_mut()[k] = orig + H;
        let up = loss(&mut model);
        model.params_mut()[ti].data_mut()[k] = orig - H;
        let down = loss(&mut model);
        model.params_mut()[ti].data_mut()[k] = orig;
        worst = worst.max(rel_err(grads.tensors[ti].data()[k], (up - down) / (2.0 * H)));
    }
    (worst, samples)
}
