//! Checkpoint directories: `weights.safetensors` plus `meta.json`.

use std::fs;
use std::path::Path;

use ndarray::{ArrayD, Ix1, Ix2};
use serde::{Deserialize, Serialize};

use super::{ArchSpec, Geometry, LayerTap, ModelHandle, Normalization};
use crate::archive::{self, atomic_write, NamedArrays};
use crate::error::{ensure, Error, Result};

pub const WEIGHTS_FILE: &str = "weights.safetensors";
pub const META_FILE: &str = "meta.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub arch: ArchSpec,
    pub class_count: usize,
    pub class_names: Vec<String>,
    pub geometry: Geometry,
    pub normalization: Normalization,
    pub taps: Vec<LayerTap>,
    pub dataset: String,
    pub training_seed: u64,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

fn weights(model: &ModelHandle) -> NamedArrays {
    let mut arrays = NamedArrays::new();
    model.network.visit_params(|name, w, b| {
        arrays.insert(format!("{name}/weight"), w.clone().into_dyn());
        arrays.insert(format!("{name}/bias"), b.clone().into_dyn());
    });
    arrays
}

/// Saves and records the weight-archive hash on the model.
pub fn save(model: &mut ModelHandle, meta: &CheckpointMeta, dir: &Path) -> Result<String> {
    let hash = archive::write_arrays(&dir.join(WEIGHTS_FILE), &weights(model))?;
    atomic_write(&dir.join(META_FILE), serde_json::to_string_pretty(meta)?.as_bytes())?;
    model.checkpoint_hash = hash.clone();
    Ok(hash)
}

pub fn read_meta(dir: &Path) -> Result<CheckpointMeta> {
    let path = dir.join(META_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn load(dir: &Path) -> Result<(ModelHandle, CheckpointMeta)> {
    let meta = read_meta(dir)?;
    let (mut arrays, hash) = archive::read_arrays(&dir.join(WEIGHTS_FILE))?;
    let mut network = meta.arch.build(meta.geometry.channels, meta.class_count, 0);
    let mut missing = Vec::new();
    let mut take = |name: String, shape: &[usize]| -> Option<ArrayD<f64>> {
        match arrays.remove(&name) {
            Some(a) if a.shape() == shape => Some(a),
            _ => {
                missing.push(name);
                None
            }
        }
    };
    network.visit_params_mut(|name, w, b| {
        if let Some(a) = take(format!("{name}/weight"), w.shape()) {
            *w = a.into_dimensionality::<Ix2>().expect("checked shape");
        }
        if let Some(a) = take(format!("{name}/bias"), b.shape()) {
            *b = a.into_dimensionality::<Ix1>().expect("checked shape");
        }
    });
    ensure!(missing.is_empty(), Archive, "checkpoint lacks or misshapes arrays: {}", missing.join(", "));
    ensure!(arrays.is_empty(), Archive, "checkpoint has unexpected arrays: {:?}", arrays.keys().collect::<Vec<_>>());
    let mut model =
        ModelHandle::new(meta.arch.clone(), network, meta.class_count, meta.geometry, meta.normalization.clone())?;
    ensure!(model.taps == meta.taps, Archive, "tap list in metadata does not match the architecture");
    model.checkpoint_hash = hash;
    Ok((model, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn save_load_round_trip_preserves_logits() {
        let geometry = Geometry { channels: 3, height: 8, width: 8 };
        let mut model = ModelHandle::init(ArchSpec::desk_resnet(), 5, geometry, 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        model.network.head.weight.mapv_inplace(|_| rng.gen_range(-1.0..1.0));
        model.normalization = Normalization { mean: vec![0.4, 0.5, 0.6], std: vec![0.2, 0.25, 0.3] };
        let meta = CheckpointMeta {
            arch: model.arch.clone(),
            class_count: 5,
            class_names: (0..5).map(|i| i.to_string()).collect(),
            geometry,
            normalization: model.normalization.clone(),
            taps: model.taps.clone(),
            dataset: "test".into(),
            training_seed: 11,
            train_accuracy: 0.0,
            test_accuracy: 0.0,
            warning: None,
        };
        let dir = tempfile::tempdir().unwrap();
        let hash = save(&mut model, &meta, dir.path()).unwrap();
        let (loaded, meta2) = load(dir.path()).unwrap();
        assert_eq!(meta2, meta);
        assert_eq!(loaded.checkpoint_hash, hash);
        for _ in 0..3 {
            let img = Array3::from_shape_fn(geometry.dim(), |_| rng.gen::<f64>());
            let a = model.logits(&img).unwrap();
            let b = loaded.logits(&img).unwrap();
            assert!((&a - &b).iter().all(|d| d.abs() <= 1e-6));
        }
    }
}
