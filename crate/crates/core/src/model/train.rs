//! Deterministic desk-scale training.

use std::time::Instant;

use ndarray::{Array1, Array3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::CheckpointMeta;
use super::data::Dataset;
use super::network::ReluMode;
use super::{ArchSpec, ModelHandle, Normalization};
use crate::error::{ensure, Result};
use crate::optim::Adam;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub arch: ArchSpec,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { arch: ArchSpec::desk_resnet(), epochs: 4, learning_rate: 2e-3, batch_size: 32, weight_decay: 1e-4, seed: 0 }
    }
}

pub fn softmax(logits: &Array1<f64>) -> Array1<f64> {
    let max = logits.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let e = logits.mapv(|v| (v - max).exp());
    let s = e.sum();
    e / s
}

fn channel_stats(data: &Dataset) -> Normalization {
    let c = data.geometry.channels;
    let plane = data.geometry.height * data.geometry.width;
    let mut sum = vec![0.0; c];
    let mut sq = vec![0.0; c];
    for s in &data.samples {
        for (ch, chunk) in s.pixels.chunks_exact(plane).enumerate() {
            for &p in chunk {
                let v = f64::from(p) / 255.0;
                sum[ch] += v;
                sq[ch] += v * v;
            }
        }
    }
    let n = (data.len() * plane) as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let std = sq.iter().zip(&mean).map(|(q, m)| (q / n - m * m).max(1e-12).sqrt()).collect();
    Normalization { mean, std }
}

/// Fraction of samples whose argmax logit equals the label.
pub fn accuracy(model: &ModelHandle, data: &Dataset) -> Result<f64> {
    let mut correct = 0usize;
    for i in 0..data.len() {
        let logits = model.logits(&data.image(i))?;
        if argmax(&logits) == data.samples[i].label {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len().max(1) as f64)
}

pub fn argmax(v: &Array1<f64>) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &x)| if x > bv { (i, x) } else { (bi, bv) })
        .0
}

/// Trains on `train`, measures held-out accuracy on `test`.
pub fn train_desk_model(train: &Dataset, test: &Dataset, config: &TrainConfig) -> Result<(ModelHandle, CheckpointMeta)> {
    ensure!(!train.is_empty(), Validation, "training set is empty");
    ensure!(config.epochs >= 1 && config.batch_size >= 1, Validation, "epochs and batch size must be positive");
    ensure!(config.learning_rate > 0.0, Validation, "learning rate must be positive");
    ensure!(train.geometry == test.geometry, Validation, "train/test geometry mismatch");
    let classes = train.class_count();
    let network = config.arch.build(train.geometry.channels, classes, config.seed);
    let mut model = ModelHandle::new(config.arch.clone(), network, classes, train.geometry, channel_stats(train))?;

    let mut optimizers: Vec<(Adam, Adam)> = Vec::new();
    model.network.visit_params(|_, w, b| optimizers.push((Adam::new(w.len(), config.learning_rate), Adam::new(b.len(), config.learning_rate))));

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(1));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let total_steps = config.epochs * train.len().div_ceil(config.batch_size);
    let mut step = 0usize;
    let mut last_epoch_correct = 0usize;
    let started = Instant::now();
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut correct = 0usize;
        let mut loss_sum = 0.0;
        for batch in order.chunks(config.batch_size) {
            let mut grads = model.network.zero_grads();
            for &i in batch {
                let x = model.normalize(&train.image(i));
                let trace = model.network.forward(x, None);
                let logits = trace.logits.as_ref().expect("full forward");
                let label = train.samples[i].label;
                let p = softmax(logits);
                loss_sum -= p[label].max(1e-300).ln();
                if argmax(logits) == label {
                    correct += 1;
                }
                let mut g = p;
                g[label] -= 1.0;
                g /= batch.len() as f64;
                model.network.backward(&trace, &[], Some(&g), ReluMode::Standard, Some(&mut grads), false);
            }
            let progress = step as f64 / total_steps as f64;
            let lr = config.learning_rate * (0.05 + 0.95 * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()));
            let mut slot = 0;
            let wd = config.weight_decay;
            model.network.visit_params_mut(|_, w, b| {
                let (ow, ob) = &mut optimizers[slot];
                ow.lr = lr;
                ob.lr = lr;
                let gw: Vec<f64> = grads[slot].weight.iter().zip(w.iter()).map(|(g, p)| g + wd * p).collect();
                ow.step(w.as_slice_mut().expect("contiguous weight"), &gw);
                ob.step(b.as_slice_mut().expect("contiguous bias"), grads[slot].bias.as_slice().expect("contiguous"));
                slot += 1;
            });
            step += 1;
        }
        last_epoch_correct = correct;
        log::info!(
            "epoch {} loss {:.4} train-acc {:.4} ({:.0}s)",
            epoch + 1,
            loss_sum / train.len() as f64,
            correct as f64 / train.len() as f64,
            started.elapsed().as_secs_f64()
        );
    }
    let train_accuracy = last_epoch_correct as f64 / train.len() as f64;
    let test_accuracy = if test.is_empty() { f64::NAN } else { accuracy(&model, test)? };
    let chance = 1.0 / classes as f64;
    let warning = (train_accuracy < 2.0 * chance)
        .then(|| format!("training did not converge: final train accuracy {train_accuracy:.3} < 2x chance"));
    if let Some(w) = &warning {
        log::warn!("{w}");
    }
    let meta = CheckpointMeta {
        arch: config.arch.clone(),
        class_count: classes,
        class_names: train.class_names.clone(),
        geometry: train.geometry,
        normalization: model.normalization.clone(),
        taps: model.taps.clone(),
        dataset: train.name.clone(),
        training_seed: config.seed,
        train_accuracy,
        test_accuracy,
        warning,
    };
    Ok((model, meta))
}

/// Convenience for callers that already hold an image tensor.
pub fn predict(model: &ModelHandle, image: &Array3<f64>) -> Result<usize> {
    Ok(argmax(&model.logits(image)?))
}
