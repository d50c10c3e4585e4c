//! RMSprop training loop over a patch dataset.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::checkpoint::{decode_checkpoint, encode_checkpoint};
use crate::nn::{bce_loss, Architecture, Model, Scalar, Tensor};
use crate::patches::{PatchDataset, PatchSample};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub rmsprop_rho: f64,
    pub rmsprop_epsilon: f64,
    pub seed: u64,
    pub shuffle: bool,
    /// Stop after this many epochs without a lower mean loss.
    pub early_stop_patience: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.001,
            batch_size: 150,
            epochs: 10,
            rmsprop_rho: 0.9,
            rmsprop_epsilon: 1e-8,
            seed: 0,
            shuffle: true,
            early_stop_patience: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "learning rate must be non-negative, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size < 2 {
            return Err(Error::InvalidConfig(format!(
                "batch size must be at least 2 for batch norm, got {}",
                self.batch_size
            )));
        }
        if !(0.0..1.0).contains(&self.rmsprop_rho) || self.rmsprop_epsilon <= 0.0 {
            return Err(Error::InvalidConfig(
                "rmsprop needs 0 <= rho < 1 and epsilon > 0".into(),
            ));
        }
        Ok(())
    }
}

/// Per-parameter running averages of squared gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct RmspropState<S> {
    pub accumulators: Vec<Tensor<S>>,
}

impl<S: Scalar> RmspropState<S> {
    pub fn new(model: &Model<S>) -> Self {
        RmspropState {
            accumulators: model
                .params()
                .iter()
                .map(|p| Tensor::zeros(p.shape()))
                .collect(),
        }
    }
}

/// `acc = rho * acc + (1 - rho) * g^2; p -= lr * g / (sqrt(acc) + eps)`.
pub fn rmsprop_step<S: Scalar>(
    params: &mut [&mut Tensor<S>],
    grads: &[Tensor<S>],
    state: &mut RmspropState<S>,
    cfg: &TrainConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.accumulators.len() {
        return Err(Error::ShapeMismatch {
            expected: vec![params.len()],
            found: vec![grads.len(), state.accumulators.len()],
        });
    }
    let lr = S::from_f64(cfg.learning_rate);
    let rho = S::from_f64(cfg.rmsprop_rho);
    let eps = S::from_f64(cfg.rmsprop_epsilon);
    let keep = S::one() - rho;
    for ((p, g), acc) in params.iter_mut().zip(grads).zip(&mut state.accumulators) {
        if p.shape() != g.shape() || p.shape() != acc.shape() {
            return Err(Error::ShapeMismatch {
                expected: p.shape().to_vec(),
                found: g.shape().to_vec(),
            });
        }
        for ((w, &gv), a) in p.data_mut().iter_mut().zip(g.data()).zip(acc.data_mut()) {
            *a = rho * *a + keep * gv * gv;
            *w -= lr * gv / (a.sqrt() + eps);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub accuracy: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn final_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.mean_loss)
    }

    pub fn write_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "epoch,mean_loss,accuracy,seconds")?;
        for e in &self.epochs {
            writeln!(
                w,
                "{},{:.8},{:.6},{:.3}",
                e.epoch, e.mean_loss, e.accuracy, e.seconds
            )?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("write to vec");
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<S> {
    pub model: Model<S>,
    pub optimizer: RmspropState<S>,
    pub history: TrainHistory,
}

/// Stacks samples into an `[N, 2, T, T]` batch and a target vector.
pub fn assemble_batch<S: Scalar>(
    samples: &[&PatchSample],
    channels: usize,
    t: usize,
) -> Result<(Tensor<S>, Vec<S>)> {
    let plen = channels * t * t;
    let mut data = Vec::with_capacity(samples.len() * plen);
    for s in samples {
        if s.data.len() != plen {
            return Err(Error::ShapeMismatch {
                expected: vec![channels, t, t],
                found: vec![s.data.len()],
            });
        }
        data.extend(s.data.iter().map(|&v| S::from_f64(f64::from(v))));
    }
    let targets = samples.iter().map(|s| S::from_f64(f64::from(s.label))).collect();
    Ok((Tensor::from_vec(&[samples.len(), channels, t, t], data)?, targets))
}

/// Trains a freshly initialized model (seeded with `cfg.seed`).
pub fn train<S: Scalar>(
    dataset: &PatchDataset,
    arch: &Architecture,
    cfg: &TrainConfig,
) -> Result<TrainOutcome<S>> {
    let mut model = Model::<S>::init(arch, cfg.seed)?;
    let mut optimizer = RmspropState::new(&model);
    let history = train_model(&mut model, &mut optimizer, dataset, cfg)?;
    Ok(TrainOutcome {
        model,
        optimizer,
        history,
    })
}

/// Continues training `model` in place.
pub fn train_model<S: Scalar>(
    model: &mut Model<S>,
    optimizer: &mut RmspropState<S>,
    dataset: &PatchDataset,
    cfg: &TrainConfig,
) -> Result<TrainHistory> {
    cfg.validate()?;
    if dataset.samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let arch = model.architecture().clone();
    if dataset.patch_size != arch.input_size {
        return Err(Error::InvalidConfig(format!(
            "dataset patch size {} does not match model input {}",
            dataset.patch_size, arch.input_size
        )));
    }
    let (bg, fg) = dataset.label_counts();
    if bg == 0 || fg == 0 {
        log::warn!("training set has a single class ({bg} background, {fg} foreground)");
    }
    if dataset.samples.len() < 2 {
        return Err(Error::BatchTooSmall(dataset.samples.len()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(0x7261_696e);
    let mut order: Vec<usize> = (0..dataset.samples.len()).collect();
    let mut history = TrainHistory::default();
    let mut best = f64::INFINITY;
    let mut stale = 0usize;

    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        if cfg.shuffle {
            order.shuffle(&mut rng);
        }
        let (mut loss_sum, mut correct, mut seen) = (0.0f64, 0usize, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let batch: Vec<&PatchSample> = chunk.iter().map(|&i| &dataset.samples[i]).collect();
            let (x, targets) = assemble_batch::<S>(&batch, arch.in_channels, arch.input_size)?;
            let (probs, cache) = model.forward_train(&x)?;
            let (loss, grad) = bce_loss(&probs, &targets);
            let grads = model.backward(&cache, &grad)?;
            drop(cache);
            rmsprop_step(&mut model.params_mut(), &grads.tensors, optimizer, cfg)?;

            loss_sum += loss.as_f64() * batch.len() as f64;
            seen += batch.len();
            correct += probs
                .iter()
                .zip(&targets)
                .filter(|(p, t)| (p.as_f64() >= 0.5) == (t.as_f64() >= 0.5))
                .count();
        }
        if seen == 0 {
            return Err(Error::BatchTooSmall(dataset.samples.len()));
        }
        let record = EpochRecord {
            epoch,
            mean_loss: loss_sum / seen as f64,
            accuracy: correct as f64 / seen as f64,
            seconds: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: loss {:.5} accuracy {:.4} ({:.1}s)",
            record.mean_loss,
            record.accuracy,
            record.seconds
        );
        history.epochs.push(record);

        if let Some(patience) = cfg.early_stop_patience {
            if record.mean_loss < best {
                best = record.mean_loss;
                stale = 0;
            } else {
                stale += 1;
                if stale >= patience {
                    log::info!("loss plateaued for {patience} epochs, stopping");
                    break;
                }
            }
        }
    }
    Ok(history)
}

pub fn save_checkpoint<S: Scalar>(
    model: &Model<S>,
    state: &RmspropState<S>,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_checkpoint(model, Some(&state.accumulators)))
        .map_err(|e| Error::io(path, e))
}

/// Loads a model with its optimizer state; checkpoints saved without one
/// get zeroed accumulators.
pub fn load_checkpoint<S: Scalar>(path: impl AsRef<Path>) -> Result<(Model<S>, RmspropState<S>)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (model, acc) = decode_checkpoint::<S>(&bytes)?;
    let state = match acc {
        Some(accumulators) => RmspropState { accumulators },
        None => RmspropState::new(&model),
    };
    Ok((model, state))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> TrainConfig {
        TrainConfig::default()
    }

    #[test]
    fn first_step_magnitude() {
        for g in [2.5f64, -0.01, 40.0] {
            let mut p = Tensor::from_vec(&[1], vec![1.0]).unwrap();
            let grads = vec![Tensor::from_vec(&[1], vec![g]).unwrap()];
            let mut state = RmspropState {
                accumulators: vec![Tensor::zeros(&[1])],
            };
            rmsprop_step(&mut [&mut p], &grads, &mut state, &cfg()).unwrap();
            let step = p.data()[0] - 1.0;
            assert!((step + 0.0031623 * g.signum()).abs() < 1e-6, "step {step}");
            assert!((state.accumulators[0].data()[0] - 0.1 * g * g).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_gradient_only_decays_accumulators() {
        let mut p = Tensor::<f64>::from_vec(&[2], vec![0.3, -0.4]).unwrap();
        let mut state = RmspropState {
            accumulators: vec![Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap()],
        };
        let grads = vec![Tensor::zeros(&[2])];
        rmsprop_step(&mut [&mut p], &grads, &mut state, &cfg()).unwrap();
        assert_eq!(p.data(), &[0.3, -0.4]);
        assert!((state.accumulators[0].data()[0] - 0.9).abs() < 1e-15);
        assert!((state.accumulators[0].data()[1] - 1.8).abs() < 1e-15);
    }

    #[test]
    fn second_step_with_zero_gradient_keeps_params() {
        let mut p = Tensor::from_vec(&[1], vec![1.0]).unwrap();
        let mut state = RmspropState {
            accumulators: vec![Tensor::zeros(&[1])],
        };
        let g1 = vec![Tensor::from_vec(&[1], vec![0.7]).unwrap()];
        rmsprop_step(&mut [&mut p], &g1, &mut state, &cfg()).unwrap();
        let after_one = p.clone();
        rmsprop_step(&mut [&mut p], &[Tensor::zeros(&[1])], &mut state, &cfg()).unwrap();
        assert_eq!(p, after_one);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut p = Tensor::<f64>::zeros(&[2]);
        let mut state = RmspropState {
            accumulators: vec![Tensor::zeros(&[2])],
        };
        assert!(rmsprop_step(&mut [&mut p], &[Tensor::zeros(&[3])], &mut state, &cfg()).is_err());
    }

    #[test]
    fn config_validation() {
        let bad = TrainConfig {
            batch_size: 1,
            ..cfg()
        };
        assert!(bad.validate().is_err());
        assert!(cfg().validate().is_ok());
    }

    #[test]
    fn history_csv() {
        let h = TrainHistory {
            epochs: vec![EpochRecord {
                epoch: 1,
                mean_loss: 0.5,
                accuracy: 0.75,
                seconds: 1.25,
            }],
        };
        let mut out = Vec::new();
        h.write_csv(&mut out).unwrap();
        assert_eq!(
            String::from_utf8(out).unwrap(),
            "epoch,mean_loss,accuracy,seconds\n1,0.50000000,0.750000,1.250\n"
        );
    }
}
