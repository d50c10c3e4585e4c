mod common;

use bgsnetd::nn::{bce_loss, Architecture, Model, Tensor};
use common::*;

const LAYER_TOL: f64 = 1e-4;
const MODEL_TOL: f64 = 1e-3;

#[test]
fn conv_gradients() {
    for seed in 0..3 {
        let e = conv_error(seed);
        assert!(e < LAYER_TOL, "seed {seed}: {e:e}");
    }
}

#[test]
fn relu_gradients() {
    assert!(relu_error(1) < LAYER_TOL);
}

#[test]
fn sigmoid_gradients() {
    assert!(sigmoid_error(2) < LAYER_TOL);
}

#[test]
fn maxpool_gradients() {
    assert!(maxpool_error(3) < LAYER_TOL);
}

#[test]
fn dense_gradients() {
    assert!(dense_error(4) < LAYER_TOL);
}

#[test]
fn batchnorm_train_mode_gradients() {
    let e2 = batchnorm_error(5, &[8, 4]);
    let e4 = batchnorm_error(6, &[3, 2, 3, 4]);
    assert!(e2 < LAYER_TOL, "{e2:e}");
    assert!(e4 < LAYER_TOL, "{e4:e}");
}

#[test]
fn bce_gradients() {
    assert!(bce_error(7) < LAYER_TOL);
}

#[test]
fn thumbnail_end_to_end() {
    let (e, n) = model_error(11, 150);
    assert!(n >= 100);
    assert!(e < MODEL_TOL, "{e:e}");
}

fn bn_free_thumbnail() -> Model<f64> {
    let arch = Architecture {
        use_batch_norm: false,
        ..Architecture::thumbnail()
    };
    Model::init(&arch, 9).unwrap()
}

#[test]
fn split_batch_gradients_sum_to_full_batch() {
    let mut g = rng(21);
    let mut model = bn_free_thumbnail();
    let x = rand_tensor(&mut g, &model.input_shape(6), 1.0);
    let t: Vec<f64> = vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0];
    let per = x.len() / 6;

    // sum-reduced loss so shard gradients add up
    let grads_of = |m: &mut Model<f64>, lo: usize, hi: usize| {
        let xs = Tensor::from_vec(&m.input_shape(hi - lo), x.data()[lo * per..hi * per].to_vec()).unwrap();
        let (p, cache) = m.forward_train(&xs).unwrap();
        let (_, gp) = bce_loss(&p, &t[lo..hi]);
        let scaled: Vec<f64> = gp.iter().map(|v| v * (hi - lo) as f64).collect();
        m.backward(&cache, &scaled).unwrap()
    };
    let full = grads_of(&mut model, 0, 6);
    let mut acc = grads_of(&mut model, 0, 2);
    acc.add_assign(&grads_of(&mut model, 2, 5));
    acc.add_assign(&grads_of(&mut model, 5, 6));
    for (a, b) in full.tensors.iter().zip(&acc.tensors) {
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() <= 1e-12 * (1.0 + x.abs()), "{x} vs {y}");
        }
    }
}

#[test]
fn bn_free_model_gradients() {
    let mut g = rng(22);
    let mut model = bn_free_thumbnail();
    let x = rand_tensor(&mut g, &model.input_shape(4), 1.0);
    let t = [0.0, 1.0, 1.0, 0.0];
    let (p, cache) = model.forward_train(&x).unwrap();
    let grads = model.backward(&cache, &bce_loss(&p, &t).1).unwrap();
    let mut worst: f64 = 0.0;
    for ti in 0..grads.tensors.len() {
        let len = grads.tensors[ti].len();
        for k in (0..len).step_by(len / 5 + 1) {
            let orig = model.params()[ti].data()[k];
            let mut at = |v: f64| {
                model.params_mut()[ti].data_mut()[k] = v;
                let l = bce_loss(&model.forward_train(&x).unwrap().0, &t).0;
                model.params_mut()[ti].data_mut()[k] = orig;
                l
            };
            let num = (at(orig + H) - at(orig - H)) / (2.0 * H);
            worst = worst.max(rel_err(grads.tensors[ti].data()[k], num));
        }
    }
    assert!(worst < MODEL_TOL, "{worst:e}");
}
