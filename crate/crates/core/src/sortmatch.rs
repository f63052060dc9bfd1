//! Sort-matching loss between a generated activation map and a reference
//! distribution.
//!
//! Matching works per channel on the empirical distribution of values over
//! spatial positions:
//!
//! 1. every reference channel row is sorted ascending and the sorted rows are
//!    averaged over references ([`sorted_reference`]);
//! 2. the generated row `z` is ranked, and the k-th smallest profile value is
//!    placed where `z` holds its k-th smallest value ([`reorder_to_generated`]);
//! 3. the loss is the mean squared difference between `z` and that reordered
//!    target ([`sm_loss`]).
//!
//! The reordered target is a constant for differentiation, so the gradient is
//! `2 (z - z_r) / |z|`. Ties in `z` are ranked by position.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayView1, Axis, Ix2};
use serde::{Deserialize, Serialize};

use crate::archive::{self, atomic_write, NamedArrays};
use crate::attribution::RelevanceMode;
use crate::error::{ensure, Error, Result};
use crate::model::{ActivationTensor, ModelHandle};

/// Per-channel ascending profile averaged over references.
#[derive(Debug, Clone, PartialEq)]
pub struct SortedChannelProfile {
    pub layer_id: String,
    pub values: Array2<f64>,
}

/// Ordered `(layer, weight)` pairs; weights already include any global loss scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchPlan {
    pub layers: Vec<(String, f64)>,
}

impl MatchPlan {
    pub fn new(layers: Vec<(String, f64)>) -> Result<Self> {
        ensure!(!layers.is_empty(), Validation, "match plan is empty");
        ensure!(
            layers.iter().all(|(_, w)| w.is_finite() && *w >= 0.0),
            Validation,
            "match plan weights must be finite and nonnegative"
        );
        ensure!(layers.iter().any(|(_, w)| *w > 0.0), Validation, "match plan needs at least one positive weight");
        for (i, (name, _)) in layers.iter().enumerate() {
            ensure!(
                layers[..i].iter().all(|(n, _)| n != name),
                Validation,
                "layer {name} appears twice in the match plan"
            );
        }
        Ok(Self { layers })
    }

    /// Every tap with weight 1.
    pub fn uniform(layers: &[String]) -> Result<Self> {
        Self::new(layers.iter().map(|l| (l.clone(), 1.0)).collect())
    }

    /// First and last tap only.
    pub fn first_last(layers: &[String]) -> Result<Self> {
        match layers {
            [] => Self::new(Vec::new()),
            [only] => Self::uniform(std::slice::from_ref(only)),
            [first, .., last] => Self::new(vec![(first.clone(), 1.0), (last.clone(), 1.0)]),
        }
    }

    pub fn layer_ids(&self) -> Vec<&str> {
        self.layers.iter().map(|(l, _)| l.as_str()).collect()
    }

    pub fn scaled(&self, factor: f64) -> Result<Self> {
        Self::new(self.layers.iter().map(|(l, w)| (l.clone(), w * factor)).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub fingerprint: String,
    pub relevance_mode: RelevanceMode,
    pub reference_count: usize,
    #[serde(default)]
    pub corruption: usize,
}

/// The matching target: one sorted profile per tapped layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceDistribution {
    pub profiles: BTreeMap<String, SortedChannelProfile>,
    pub provenance: Provenance,
}

fn sorted_row(row: ArrayView1<f64>) -> Vec<f64> {
    let mut v = row.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite activations"));
    v
}

/// Stable ascending argsort: ties keep position order.
fn argsort(row: ArrayView1<f64>) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[a].partial_cmp(&row[b]).expect("finite activations"));
    idx
}

/// Elementwise mean of every reference's ascending-sorted channel rows.
pub fn sorted_reference(refs: &[ActivationTensor]) -> Result<SortedChannelProfile> {
    let first = refs.first().ok_or_else(|| Error::Validation("no reference activations".into()))?;
    let shape = first.shape();
    let mut acc = Array2::<f64>::zeros(shape);
    for r in refs {
        ensure!(
            r.shape() == shape,
            Validation,
            "reference activation shape {:?} differs from {:?}",
            r.shape(),
            shape
        );
        ensure!(r.values.iter().all(|v| v.is_finite()), Validation, "reference activations contain non-finite values");
        for (mut dst, src) in acc.axis_iter_mut(Axis(0)).zip(r.values.axis_iter(Axis(0))) {
            for (d, s) in dst.iter_mut().zip(sorted_row(src)) {
                *d += s;
            }
        }
    }
    acc /= refs.len() as f64;
    Ok(SortedChannelProfile { layer_id: first.layer_id.clone(), values: acc })
}

/// Places the profile's k-th smallest value at the position of `z`'s k-th smallest value.
pub fn reorder_to_generated(z: &ActivationTensor, profile: &SortedChannelProfile) -> Result<ActivationTensor> {
    ensure!(
        z.shape() == profile.values.dim(),
        Validation,
        "activation shape {:?} does not match profile shape {:?} for {}",
        z.shape(),
        profile.values.dim(),
        z.layer_id
    );
    let mut out = Array2::zeros(z.shape());
    for ((zrow, prow), mut orow) in z.values.axis_iter(Axis(0)).zip(profile.values.axis_iter(Axis(0))).zip(out.axis_iter_mut(Axis(0))) {
        for (rank, pos) in argsort(zrow).into_iter().enumerate() {
            orow[pos] = prow[rank];
        }
    }
    Ok(ActivationTensor::new(z.layer_id.clone(), out))
}

/// Mean squared difference over all channels and positions.
pub fn sm_loss(z: &ActivationTensor, z_r: &ActivationTensor) -> Result<f64> {
    ensure!(z.shape() == z_r.shape(), Validation, "shape mismatch {:?} vs {:?}", z.shape(), z_r.shape());
    let n = z.values.len() as f64;
    Ok(z.values.iter().zip(z_r.values.iter()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n)
}

/// Gradient of [`sm_loss`] with respect to `z`, holding `z_r` fixed.
pub fn sm_loss_grad(z: &ActivationTensor, z_r: &ActivationTensor) -> Result<Array2<f64>> {
    ensure!(z.shape() == z_r.shape(), Validation, "shape mismatch {:?} vs {:?}", z.shape(), z_r.shape());
    let scale = 2.0 / z.values.len() as f64;
    Ok((&z.values - &z_r.values) * scale)
}

#[derive(Debug, Clone)]
pub struct MultiLayerLoss {
    pub total: f64,
    /// Unweighted per-layer terms in plan order.
    pub per_layer: Vec<(String, f64)>,
    /// Weighted gradient with respect to each matched activation.
    pub grads: BTreeMap<String, Array2<f64>>,
}

/// `Σ_l weight_l · sm_loss(z_l, reorder(z_l, profile_l))`, with gradients.
pub fn sm_loss_multilayer(
    acts: &BTreeMap<String, ActivationTensor>,
    refdist: &ReferenceDistribution,
    plan: &MatchPlan,
) -> Result<MultiLayerLoss> {
    let mut total = 0.0;
    let mut per_layer = Vec::with_capacity(plan.layers.len());
    let mut grads = BTreeMap::new();
    for (layer, weight) in &plan.layers {
        let z = acts
            .get(layer)
            .ok_or_else(|| Error::Config(format!("no activations captured for plan layer {layer}")))?;
        let profile = refdist
            .profiles
            .get(layer)
            .ok_or_else(|| Error::Config(format!("reference distribution lacks plan layer {layer}")))?;
        let z_r = reorder_to_generated(z, profile)?;
        let loss = sm_loss(z, &z_r)?;
        total += weight * loss;
        per_layer.push((layer.clone(), loss));
        if *weight > 0.0 {
            grads.insert(layer.clone(), sm_loss_grad(z, &z_r)? * *weight);
        }
    }
    Ok(MultiLayerLoss { total, per_layer, grads })
}

pub const PROFILES_FILE: &str = "profiles.safetensors";
pub const PROFILES_META_FILE: &str = "meta.json";

impl ReferenceDistribution {
    pub fn reference_count(&self) -> usize {
        self.provenance.reference_count
    }

    pub fn to_arrays(&self) -> NamedArrays {
        self.profiles
            .iter()
            .map(|(layer, p)| (format!("{layer}/profile"), p.values.clone().into_dyn()))
            .collect()
    }

    /// Writes `profiles.safetensors` and `meta.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        archive::write_arrays(&dir.join(PROFILES_FILE), &self.to_arrays())?;
        atomic_write(&dir.join(PROFILES_META_FILE), serde_json::to_string_pretty(&self.provenance)?.as_bytes())
    }

    /// Loads and checks every profile against the model's tap shapes.
    pub fn load(dir: &Path, model: &ModelHandle) -> Result<Self> {
        let meta_path = dir.join(PROFILES_META_FILE);
        let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let provenance: Provenance = serde_json::from_str(&text)?;
        let (arrays, _) = archive::read_arrays(&dir.join(PROFILES_FILE))?;
        let mut profiles = BTreeMap::new();
        for (name, array) in arrays {
            let layer = name
                .strip_suffix("/profile")
                .ok_or_else(|| Error::Archive(format!("unexpected entry {name}")))?;
            let tap = model.tap(layer)?;
            let values = array
                .into_dimensionality::<Ix2>()
                .map_err(|e| Error::Archive(format!("{name}: {e}")))?;
            ensure!(
                values.dim() == (tap.channel_count, tap.spatial_size()),
                Archive,
                "profile {layer} has shape {:?}, model tap is {:?}",
                values.dim(),
                (tap.channel_count, tap.spatial_size())
            );
            profiles.insert(layer.to_string(), SortedChannelProfile { layer_id: layer.to_string(), values });
        }
        ensure!(provenance.reference_count >= 1, Archive, "reference count must be at least 1");
        Ok(Self { profiles, provenance })
    }
}
