#![allow(dead_code)]

use fvis::model::data::{shapes10, Dataset, Split};
use fvis::model::train::{train_desk_model, TrainConfig};
use fvis::model::{ArchSpec, Geometry, ModelHandle};
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_model(arch: ArchSpec, side: usize, seed: u64) -> ModelHandle {
    ModelHandle::init(arch, 4, Geometry { channels: 3, height: side, width: side }, seed).unwrap()
}

pub fn random_image(c: usize, h: usize, w: usize, seed: u64) -> Array3<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array3::from_shape_fn((c, h, w), |_| rng.gen_range(0.05..0.95))
}

pub fn small_data() -> (Dataset, Dataset) {
    (shapes10(60, 0, 16, Split::Train).unwrap(), shapes10(10, 0, 16, Split::Test).unwrap())
}

/// Ten epochs on 16x16 shapes; about 0.6 test accuracy.
pub fn small_trained(seed: u64) -> (ModelHandle, Dataset, Dataset) {
    let (train, test) = small_data();
    let config = TrainConfig {
        arch: ArchSpec::ResNet { widths: vec![8, 16, 16] },
        epochs: 10,
        batch_size: 16,
        learning_rate: 5e-3,
        seed,
        ..Default::default()
    };
    let (mut model, _) = train_desk_model(&train, &test, &config).unwrap();
    // a stable hash so pipeline manifests can be compared
    model.checkpoint_hash = format!("small-{seed}");
    (model, train, test)
}
