//! Differentiable classifier backend with named block-output taps.

pub mod arch;
pub mod checkpoint;
pub mod data;
pub mod layers;
pub mod network;
pub mod train;

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
pub use arch::ArchSpec;
use network::{ForwardTrace, Network, ReluMode, TapSeed};

/// Input geometry `C×H×W`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Geometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Geometry {
    pub fn dim(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Per-channel input standardization, owned by the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    pub fn identity(channels: usize) -> Self {
        Self { mean: vec![0.0; channels], std: vec![1.0; channels] }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerTap {
    pub layer_id: String,
    pub channel_count: usize,
    pub height: usize,
    pub width: usize,
}

impl LayerTap {
    pub fn spatial_size(&self) -> usize {
        self.height * self.width
    }
}

/// Block output flattened to `channels × positions`.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTensor {
    pub layer_id: String,
    pub values: Array2<f64>,
}

impl ActivationTensor {
    pub fn new(layer_id: impl Into<String>, values: Array2<f64>) -> Self {
        Self { layer_id: layer_id.into(), values }
    }

    pub(crate) fn from_map(layer_id: &str, map: &Array3<f64>) -> Self {
        let (c, h, w) = map.dim();
        let values = map
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((c, h * w))
            .expect("contiguous map");
        Self::new(layer_id, values)
    }

    pub fn shape(&self) -> (usize, usize) {
        self.values.dim()
    }
}

pub struct ModelHandle {
    pub arch: ArchSpec,
    pub class_count: usize,
    pub geometry: Geometry,
    pub normalization: Normalization,
    pub taps: Vec<LayerTap>,
    pub network: Network,
    /// Hash of the weight archive this model was loaded from or saved to.
    pub checkpoint_hash: String,
}

/// Output of [`ModelHandle::forward_with_taps`]; retains what is needed to
/// differentiate back to the image.
pub struct TapForward {
    pub activations: BTreeMap<String, ActivationTensor>,
    pub logits: Option<Array1<f64>>,
    pub(crate) trace: ForwardTrace,
}

impl ModelHandle {
    pub fn new(
        arch: ArchSpec,
        network: Network,
        class_count: usize,
        geometry: Geometry,
        normalization: Normalization,
    ) -> Result<Self> {
        ensure!(class_count >= 2, Validation, "class_count must be at least 2, got {class_count}");
        ensure!(
            normalization.std.len() == geometry.channels && normalization.mean.len() == geometry.channels,
            Validation,
            "normalization constants must have one entry per input channel"
        );
        ensure!(
            normalization.std.iter().all(|s| *s > 0.0 && s.is_finite()),
            Validation,
            "normalization std must be strictly positive"
        );
        ensure!(!network.blocks.is_empty(), Validation, "network has no blocks");
        let probe = network.forward(Array3::zeros(geometry.dim()), Some(network.blocks.len() - 1));
        let taps = network
            .blocks
            .iter()
            .zip(&probe.blocks)
            .map(|(b, cache)| {
                let (c, h, w) = cache.output.dim();
                LayerTap { layer_id: b.name.clone(), channel_count: c, height: h, width: w }
            })
            .collect();
        Ok(Self { arch, class_count, geometry, normalization, taps, network, checkpoint_hash: String::new() })
    }

    /// Fresh, untrained model.
    pub fn init(arch: ArchSpec, class_count: usize, geometry: Geometry, seed: u64) -> Result<Self> {
        let network = arch.build(geometry.channels, class_count, seed);
        Self::new(arch, network, class_count, geometry, Normalization::identity(geometry.channels))
    }

    pub fn tap(&self, layer_id: &str) -> Result<&LayerTap> {
        self.taps
            .iter()
            .find(|t| t.layer_id == layer_id)
            .ok_or_else(|| Error::TapNotFound(layer_id.to_string()))
    }

    pub fn tap_index(&self, layer_id: &str) -> Result<usize> {
        self.network.block_index(layer_id).ok_or_else(|| Error::TapNotFound(layer_id.to_string()))
    }

    pub fn tap_names(&self) -> Vec<String> {
        self.taps.iter().map(|t| t.layer_id.clone()).collect()
    }

    /// Width of the pooled feature vector feeding the classifier.
    pub fn penultimate_width(&self) -> usize {
        self.taps.last().expect("taps nonempty").channel_count
    }

    pub fn last_tap(&self) -> &LayerTap {
        self.taps.last().expect("taps nonempty")
    }

    pub(crate) fn validate_image(&self, image: &Array3<f64>) -> Result<()> {
        ensure!(
            image.dim() == self.geometry.dim(),
            Validation,
            "image shape {:?} does not match model input {:?}",
            image.dim(),
            self.geometry.dim()
        );
        ensure!(image.iter().all(|v| v.is_finite()), Validation, "image contains non-finite values");
        Ok(())
    }

    pub(crate) fn normalize(&self, image: &Array3<f64>) -> Array3<f64> {
        let mut x = image.to_owned();
        for (c, mut plane) in x.axis_iter_mut(Axis(0)).enumerate() {
            let (m, s) = (self.normalization.mean[c], self.normalization.std[c]);
            plane.mapv_inplace(|v| (v - m) / s);
        }
        x
    }

    fn denormalize_grad(&self, mut grad: Array3<f64>) -> Array3<f64> {
        for (c, mut plane) in grad.axis_iter_mut(Axis(0)).enumerate() {
            let s = self.normalization.std[c];
            plane.mapv_inplace(|v| v / s);
        }
        grad
    }

    /// Forward pass in pixel space `[0,1]` capturing the requested block outputs.
    /// `with_logits = false` stops at the deepest requested tap.
    pub fn forward_taps(&self, image: &Array3<f64>, taps: &[&str], with_logits: bool) -> Result<TapForward> {
        self.validate_image(image)?;
        let mut indices = Vec::with_capacity(taps.len());
        for name in taps {
            indices.push(self.tap_index(name)?);
        }
        let stop = if with_logits { None } else { Some(indices.iter().copied().max().unwrap_or(0)) };
        let trace = self.network.forward(self.normalize(image), stop);
        let activations = taps
            .iter()
            .zip(&indices)
            .map(|(name, &i)| (name.to_string(), ActivationTensor::from_map(name, &trace.blocks[i].output)))
            .collect();
        Ok(TapForward { activations, logits: trace.logits.clone(), trace })
    }

    pub fn forward_with_taps(&self, image: &Array3<f64>, taps: &[&str]) -> Result<TapForward> {
        self.forward_taps(image, taps, true)
    }

    pub fn logits(&self, image: &Array3<f64>) -> Result<Array1<f64>> {
        Ok(self.forward_taps(image, &[], true)?.logits.expect("full forward"))
    }

    /// Pooled features feeding the classifier head, one row per image.
    pub fn penultimate_embedding(&self, images: &[Array3<f64>]) -> Result<Array2<f64>> {
        ensure!(!images.is_empty(), Validation, "embedding batch is empty");
        let d = self.penultimate_width();
        let mut out = Array2::zeros((images.len(), d));
        for (row, image) in out.axis_iter_mut(Axis(0)).zip(images) {
            self.validate_image(image)?;
            let last = self.network.blocks.len() - 1;
            let trace = self.network.forward(self.normalize(image), Some(last));
            let pooled = network::global_avg_pool(&trace.blocks[last].output);
            pooled.assign_to(row);
        }
        Ok(out)
    }
}

impl TapForward {
    pub fn logits(&self) -> &Array1<f64> {
        self.logits.as_ref().expect("forward pass did not reach the head")
    }

    /// Raw block output `C×H×W` for a captured tap.
    pub(crate) fn block_output<'a>(&'a self, model: &ModelHandle, layer_id: &str) -> Result<&'a Array3<f64>> {
        let i = model.tap_index(layer_id)?;
        self.trace
            .blocks
            .get(i)
            .map(|b| &b.output)
            .ok_or_else(|| Error::Config(format!("tap {layer_id} was not reached by this forward pass")))
    }

    /// Gradient of `Σ_l <grads_l, A_l> + <logit_grad, logits>` with respect to the pixel-space image.
    pub fn backward(
        &self,
        model: &ModelHandle,
        tap_grads: &BTreeMap<String, Array2<f64>>,
        logit_grad: Option<&Array1<f64>>,
    ) -> Result<Array3<f64>> {
        self.backward_with_mode(model, tap_grads, logit_grad, ReluMode::Standard)
    }

    pub(crate) fn backward_with_mode(
        &self,
        model: &ModelHandle,
        tap_grads: &BTreeMap<String, Array2<f64>>,
        logit_grad: Option<&Array1<f64>>,
        mode: ReluMode,
    ) -> Result<Array3<f64>> {
        let mut maps = Vec::with_capacity(tap_grads.len());
        for (name, g) in tap_grads {
            let i = model.tap_index(name)?;
            let tap = &model.taps[i];
            ensure!(
                g.dim() == (tap.channel_count, tap.spatial_size()),
                Validation,
                "gradient for {name} has shape {:?}, expected {:?}",
                g.dim(),
                (tap.channel_count, tap.spatial_size())
            );
            ensure!(i < self.trace.blocks.len(), Config, "tap {name} was not reached by this forward pass");
            let map = g
                .as_standard_layout()
                .into_owned()
                .into_shape_with_order((tap.channel_count, tap.height, tap.width))
                .expect("contiguous gradient");
            maps.push((i, map));
        }
        ensure!(
            logit_grad.is_none() || self.trace.logits.is_some(),
            Config,
            "logit gradient requires a forward pass through the head"
        );
        let seeds: Vec<TapSeed<'_>> = maps.iter().map(|(i, g)| TapSeed { block: *i, grad: g }).collect();
        let back = model.network.backward(&self.trace, &seeds, logit_grad, mode, None, false);
        Ok(model.denormalize_grad(back.input_grad))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn geometry() -> Geometry {
        Geometry { channels: 3, height: 12, width: 12 }
    }

    fn random_head(model: &mut ModelHandle, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        model.network.head.weight.mapv_inplace(|_| rng.gen_range(-0.5..0.5));
    }

    #[test]
    fn zero_image_untrained_gives_equal_logits() {
        let model = ModelHandle::init(ArchSpec::desk_resnet(), 10, geometry(), 1).unwrap();
        let logits = model.logits(&Array3::zeros(geometry().dim())).unwrap();
        assert!(logits.iter().all(|v| *v == logits[0]));
    }

    #[test]
    fn unknown_tap_is_rejected() {
        let model = ModelHandle::init(ArchSpec::desk_resnet(), 10, geometry(), 1).unwrap();
        let err = model.forward_with_taps(&Array3::zeros(geometry().dim()), &["blockX"]).err().unwrap();
        assert!(matches!(err, Error::TapNotFound(name) if name == "blockX"));
    }

    #[test]
    fn non_finite_image_is_rejected() {
        let model = ModelHandle::init(ArchSpec::desk_plain(), 3, geometry(), 1).unwrap();
        let mut img = Array3::zeros(geometry().dim());
        img[[0, 1, 1]] = f64::NAN;
        assert!(matches!(model.logits(&img), Err(Error::Validation(_))));
    }

    #[test]
    fn forward_is_deterministic_and_shapes_match_taps() {
        let mut model = ModelHandle::init(ArchSpec::desk_resnet(), 4, geometry(), 7).unwrap();
        random_head(&mut model, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let img = Array3::from_shape_fn(geometry().dim(), |_| rng.gen::<f64>());
        let names = model.tap_names();
        let refs: Vec<&str> = names.iter().map(String::as_str).collect();
        let a = model.forward_with_taps(&img, &refs).unwrap();
        let b = model.forward_with_taps(&img, &refs).unwrap();
        for tap in &model.taps {
            let x = &a.activations[&tap.layer_id];
            assert_eq!(x.shape(), (tap.channel_count, tap.spatial_size()));
            assert_eq!(x.values, b.activations[&tap.layer_id].values);
        }
        assert_eq!(a.logits(), b.logits());
    }

    #[test]
    fn class_count_below_two_is_rejected() {
        assert!(ModelHandle::init(ArchSpec::desk_plain(), 1, geometry(), 0).is_err());
    }

    #[test]
    fn embedding_rows_match_batch() {
        let model = ModelHandle::init(ArchSpec::desk_resnet(), 3, geometry(), 2).unwrap();
        let img = Array3::from_elem(geometry().dim(), 0.3);
        let emb = model.penultimate_embedding(&[img.clone(), img]).unwrap();
        assert_eq!(emb.dim(), (2, model.penultimate_width()));
        assert_eq!(emb.row(0), emb.row(1));
        assert!(model.penultimate_embedding(&[]).is_err());
    }
}
