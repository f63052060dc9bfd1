//! Relevance maps for class, channel and concept-direction targets.
//!
//! Two attribution routes are provided:
//!
//! * epsilon-rule layer-wise relevance propagation ([`lrp_relevance`]): every
//!   convolution and the classifier head redistribute relevance in proportion
//!   to each input's contribution `x_i w_ij / (z_j + eps·sign(z_j))`;
//!   rectifiers pass relevance through; residual sums split relevance between
//!   branch and shortcut in proportion to their outputs;
//! * guided backpropagation ([`guided_backprop_relevance`]): the gradient of
//!   the target score where every rectifier also blocks negative upstream
//!   gradients.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array1, Array2, Array3, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::archive::{self, NamedArrays};
use crate::error::{ensure, Error, Result};
use crate::model::layers::{stabilize, Conv2d};
use crate::model::network::{global_avg_pool, Layer, LayerCache, ReluMode, SkipCache, TapSeed};
use crate::model::{ActivationTensor, ModelHandle, TapForward};

pub const LRP_EPSILON: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RelevanceMode {
    None,
    Lrp,
    Guided,
}

impl RelevanceMode {
    pub fn as_str(self) -> &'static str {
        match self {
            RelevanceMode::None => "none",
            RelevanceMode::Lrp => "lrp",
            RelevanceMode::Guided => "guided",
        }
    }
}

impl std::str::FromStr for RelevanceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(RelevanceMode::None),
            "lrp" => Ok(RelevanceMode::Lrp),
            "guided" => Ok(RelevanceMode::Guided),
            other => Err(Error::Validation(format!("unknown relevance mode {other:?} (expected none, lrp or guided)"))),
        }
    }
}

/// What a relevance pass (and a visualization) is about.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum AttributionTarget {
    Class { class: usize },
    Neuron { layer_id: String, channel: usize },
    Concept { layer_id: String, direction: Vec<f64> },
}

impl AttributionTarget {
    /// Short path-safe label, e.g. `class-3`, `block3-c5`, `concept-<hash>`.
    pub fn label(&self) -> String {
        match self {
            AttributionTarget::Class { class } => format!("class-{class}"),
            AttributionTarget::Neuron { layer_id, channel } => format!("{layer_id}-c{channel}"),
            AttributionTarget::Concept { layer_id, direction } => {
                let bytes: Vec<u8> = direction.iter().flat_map(|v| v.to_le_bytes()).collect();
                format!("{layer_id}-concept-{}", &archive::sha256_hex(&bytes)[..12])
            }
        }
    }

    pub fn validate(&self, model: &ModelHandle) -> Result<()> {
        match self {
            AttributionTarget::Class { class } => {
                ensure!(*class < model.class_count, Validation, "class {class} out of range (model has {})", model.class_count);
            }
            AttributionTarget::Neuron { layer_id, channel } => {
                let tap = model.tap(layer_id)?;
                ensure!(
                    *channel < tap.channel_count,
                    Validation,
                    "channel {channel} out of range for {layer_id} ({} channels)",
                    tap.channel_count
                );
            }
            AttributionTarget::Concept { layer_id, direction } => {
                let tap = model.tap(layer_id)?;
                ensure!(
                    layer_id == &model.last_tap().layer_id,
                    Config,
                    "concept directions live on the penultimate feature layer {}, not {layer_id}",
                    model.last_tap().layer_id
                );
                ensure!(
                    direction.len() == tap.channel_count,
                    Validation,
                    "direction has {} entries, layer {layer_id} has {} channels",
                    direction.len(),
                    tap.channel_count
                );
                ensure!(direction.iter().all(|v| v.is_finite()), Validation, "direction contains non-finite values");
                ensure!(direction.iter().any(|v| *v != 0.0), Validation, "direction vector is zero");
            }
        }
        Ok(())
    }

    /// The neuron a concept reduces to when its direction is a positive
    /// multiple of a channel basis vector.
    pub fn equivalent_neuron(&self) -> Option<AttributionTarget> {
        let AttributionTarget::Concept { layer_id, direction } = self else { return None };
        let mut nonzero = direction.iter().enumerate().filter(|(_, v)| **v != 0.0);
        match (nonzero.next(), nonzero.next()) {
            (Some((channel, v)), None) if *v > 0.0 => Some(AttributionTarget::Neuron { layer_id: layer_id.clone(), channel }),
            _ => None,
        }
    }

    /// Block index of the target, `None` for class logits.
    fn block(&self, model: &ModelHandle) -> Result<Option<usize>> {
        match self {
            AttributionTarget::Class { .. } => Ok(None),
            AttributionTarget::Neuron { layer_id, .. } | AttributionTarget::Concept { layer_id, .. } => {
                Ok(Some(model.tap_index(layer_id)?))
            }
        }
    }

    /// Taps usable as matching layers: strictly shallower than the target.
    pub fn reachable_taps(&self, model: &ModelHandle) -> Result<Vec<String>> {
        let limit = self.block(model)?.unwrap_or(model.taps.len());
        Ok(model.taps[..limit].iter().map(|t| t.layer_id.clone()).collect())
    }

    /// Taps a matching plan may use: the reachable taps plus the target layer itself.
    pub fn matchable_taps(&self, model: &ModelHandle) -> Result<Vec<String>> {
        let limit = self.block(model)?.map_or(model.taps.len(), |t| t + 1);
        Ok(model.taps[..limit].iter().map(|t| t.layer_id.clone()).collect())
    }

    /// GAP of the channel, or the projection of the pooled features onto the
    /// direction, computed from a `C×D` activation.
    pub fn score_activation(&self, acts: &Array2<f64>) -> f64 {
        let pooled = acts.mean_axis(Axis(1)).expect("nonempty positions");
        match self {
            AttributionTarget::Neuron { channel, .. } => pooled[*channel],
            AttributionTarget::Concept { direction, .. } => pooled.iter().zip(direction).map(|(a, d)| a * d).sum(),
            AttributionTarget::Class { .. } => f64::NAN,
        }
    }
}

/// Relevance at one tap, congruent with its activation.
#[derive(Debug, Clone, PartialEq)]
pub struct RelevanceMap {
    pub layer_id: String,
    pub values: Array2<f64>,
}

#[derive(Debug, Clone, Copy)]
pub struct LrpOptions {
    pub epsilon: f64,
    /// Multiplies the target's initial relevance.
    pub init_scale: f64,
}

impl Default for LrpOptions {
    fn default() -> Self {
        Self { epsilon: LRP_EPSILON, init_scale: 1.0 }
    }
}

/// Relevance of each input of `y = x·w` for a single output, without bias.
/// Exposed for checking the rule on hand-sized examples.
pub fn lrp_linear_eps(x: &[f64], w: &[f64], relevance: f64, epsilon: f64) -> Vec<f64> {
    let z: f64 = x.iter().zip(w).map(|(a, b)| a * b).sum();
    let s = relevance / stabilize(z, epsilon);
    x.iter().zip(w).map(|(a, b)| a * b * s).collect()
}

fn check_taps(model: &ModelHandle, target: &AttributionTarget, taps: &[&str]) -> Result<Vec<usize>> {
    target.validate(model)?;
    let limit = target.block(model)?;
    taps.iter()
        .map(|name| {
            let i = model.tap_index(name)?;
            if let Some(t) = limit {
                ensure!(
                    i < t,
                    Config,
                    "tap {name} is not shallower than the target layer {}",
                    model.taps[t].layer_id
                );
            }
            Ok(i)
        })
        .collect()
}

fn to_map(a: &Array2<f64>, c: usize, h: usize, w: usize) -> Array3<f64> {
    a.as_standard_layout().into_owned().into_shape_with_order((c, h, w)).expect("congruent relevance")
}

fn to_flat(a: &Array3<f64>) -> Array2<f64> {
    let (c, h, w) = a.dim();
    a.as_standard_layout().into_owned().into_shape_with_order((c, h * w)).expect("contiguous")
}

/// Cosine-argmax initialization: the direction placed at the most aligned position.
pub fn concept_init_from_activation(acts: &Array2<f64>, direction: &[f64]) -> Result<Array2<f64>> {
    let (c, d) = acts.dim();
    ensure!(direction.len() == c, Validation, "direction has {} entries, activation has {c} channels", direction.len());
    let dnorm = direction.iter().map(|v| v * v).sum::<f64>().sqrt();
    ensure!(dnorm > 0.0, Validation, "direction vector is zero");
    let mut best: Option<(usize, f64)> = None;
    for p in 0..d {
        let col = acts.column(p);
        let norm = col.dot(&col).sqrt();
        if norm == 0.0 {
            continue;
        }
        let cos = col.iter().zip(direction).map(|(a, b)| a * b).sum::<f64>() / (norm * dnorm);
        if best.map_or(true, |(_, b)| cos > b) {
            best = Some((p, cos));
        }
    }
    let (pos, _) = best.ok_or_else(|| Error::DegenerateInput("every position has a zero channel vector".into()))?;
    let mut init = Array2::zeros((c, d));
    for (ch, v) in direction.iter().enumerate() {
        init[[ch, pos]] = *v;
    }
    Ok(init)
}

pub fn concept_relevance_init(
    model: &ModelHandle,
    image: &Array3<f64>,
    layer_id: &str,
    direction: &[f64],
) -> Result<RelevanceMap> {
    let target = AttributionTarget::Concept { layer_id: layer_id.to_string(), direction: direction.to_vec() };
    target.validate(model)?;
    let fwd = model.forward_taps(image, &[layer_id], false)?;
    let values = concept_init_from_activation(&fwd.activations[layer_id].values, direction)?;
    Ok(RelevanceMap { layer_id: layer_id.to_string(), values })
}

enum Start {
    Logits(Array1<f64>),
    Block { index: usize, relevance: Array3<f64> },
}

fn initial_relevance(model: &ModelHandle, fwd: &TapForward, target: &AttributionTarget, scale: f64) -> Result<Start> {
    match target {
        AttributionTarget::Class { class } => {
            let logits = fwd
                .logits
                .as_ref()
                .ok_or_else(|| Error::Config("class relevance needs a forward pass through the head".into()))?;
            let mut r = Array1::zeros(logits.len());
            r[*class] = logits[*class] * scale;
            Ok(Start::Logits(r))
        }
        AttributionTarget::Neuron { layer_id, channel } => {
            let index = model.tap_index(layer_id)?;
            let map = fwd.block_output(model, layer_id)?;
            let (c, h, w) = map.dim();
            let gap = global_avg_pool(map)[*channel];
            let mut relevance = Array3::zeros((c, h, w));
            relevance.index_axis_mut(Axis(0), *channel).fill(gap * scale / (h * w) as f64);
            Ok(Start::Block { index, relevance })
        }
        AttributionTarget::Concept { layer_id, direction } => {
            let index = model.tap_index(layer_id)?;
            let map = fwd.block_output(model, layer_id)?;
            let (c, h, w) = map.dim();
            let init = concept_init_from_activation(&to_flat(map), direction)? * scale;
            Ok(Start::Block { index, relevance: to_map(&init, c, h, w) })
        }
    }
}

fn lrp_conv(conv: &Conv2d, input: &Array3<f64>, output: &Array3<f64>, relevance: &Array3<f64>, eps: f64) -> Array3<f64> {
    let mut s = relevance.clone();
    Zip::from(&mut s).and(output).for_each(|r, &z| *r /= stabilize(z, eps));
    let (_, h, w) = input.dim();
    conv.backward_input(&s, h, w) * input
}

fn lrp_layer(layer: &Layer, cache: &LayerCache, relevance: Array3<f64>, eps: f64) -> Array3<f64> {
    match (layer, cache) {
        (Layer::Conv(conv), LayerCache::Conv { input, output, .. }) => lrp_conv(conv, input, output, &relevance, eps),
        (Layer::Relu, LayerCache::Relu { .. }) => relevance,
        (Layer::Residual(res), LayerCache::Residual { input, branch, branch_out, skip, output }) => {
            let mut ratio = relevance;
            Zip::from(&mut ratio).and(output).for_each(|r, &z| *r /= stabilize(z, eps));
            let r_branch = branch_out * &ratio;
            let mut total = lrp_layers(&res.branch, branch, r_branch, eps);
            match (&res.shortcut, skip) {
                (None, SkipCache::Identity) => total += &(input * &ratio),
                (Some(conv), SkipCache::Conv { output: skip_out, .. }) => {
                    let r_skip = skip_out * &ratio;
                    total += &lrp_conv(conv, input, skip_out, &r_skip, eps);
                }
                _ => unreachable!("residual cache does not match layer"),
            }
            total
        }
        _ => unreachable!("layer cache does not match layer"),
    }
}

fn lrp_layers(layers: &[Layer], caches: &[LayerCache], mut relevance: Array3<f64>, eps: f64) -> Array3<f64> {
    for (layer, cache) in layers.iter().zip(caches).rev() {
        relevance = lrp_layer(layer, cache, relevance, eps);
    }
    relevance
}

/// Epsilon-LRP on an existing forward pass (which must reach the target).
pub fn lrp_from_forward(
    model: &ModelHandle,
    fwd: &TapForward,
    target: &AttributionTarget,
    taps: &[&str],
    options: LrpOptions,
) -> Result<BTreeMap<String, RelevanceMap>> {
    let indices = check_taps(model, target, taps)?;
    let trace = &fwd.trace;
    let eps = options.epsilon;
    let (mut relevance, top) = match initial_relevance(model, fwd, target, options.init_scale)? {
        Start::Logits(r_logits) => {
            let pooled = trace.pooled.as_ref().expect("full forward");
            let logits = trace.logits.as_ref().expect("full forward");
            let s = Array1::from_iter(r_logits.iter().zip(logits).map(|(r, z)| r / stabilize(*z, eps)));
            let r_pooled = model.network.head.weight.t().dot(&s) * pooled;
            let last = trace.blocks.len() - 1;
            let map = &trace.blocks[last].output;
            let (c, h, w) = map.dim();
            let d = (h * w) as f64;
            let r = Array3::from_shape_fn((c, h, w), |(ci, y, x)| {
                map[[ci, y, x]] / d * r_pooled[ci] / stabilize(pooled[ci], eps)
            });
            (r, last)
        }
        Start::Block { index, relevance } => (relevance, index),
    };
    let mut out = BTreeMap::new();
    let lowest = indices.iter().copied().min().unwrap_or(top);
    for b in (lowest..=top).rev() {
        if let Some(pos) = indices.iter().position(|&i| i == b) {
            out.insert(taps[pos].to_string(), RelevanceMap { layer_id: taps[pos].to_string(), values: to_flat(&relevance) });
        }
        if b == lowest {
            break;
        }
        relevance = lrp_layers(&model.network.blocks[b].layers, &trace.blocks[b].layers, relevance, eps);
    }
    Ok(out)
}

pub fn lrp_relevance(
    model: &ModelHandle,
    image: &Array3<f64>,
    target: &AttributionTarget,
    taps: &[&str],
) -> Result<BTreeMap<String, RelevanceMap>> {
    let fwd = forward_for_target(model, image, target)?;
    lrp_from_forward(model, &fwd, target, taps, LrpOptions::default())
}

fn forward_for_target(model: &ModelHandle, image: &Array3<f64>, target: &AttributionTarget) -> Result<TapForward> {
    target.validate(model)?;
    match target {
        AttributionTarget::Class { .. } => model.forward_taps(image, &[], true),
        AttributionTarget::Neuron { layer_id, .. } | AttributionTarget::Concept { layer_id, .. } => {
            model.forward_taps(image, &[layer_id.as_str()], false)
        }
    }
}

/// Guided-backpropagation gradients of the target score at each tap.
pub fn guided_from_forward(
    model: &ModelHandle,
    fwd: &TapForward,
    target: &AttributionTarget,
    taps: &[&str],
) -> Result<BTreeMap<String, RelevanceMap>> {
    gradient_maps(model, fwd, target, taps, ReluMode::Guided)
}

/// Gradient of the neuron or concept score with respect to its own block output.
fn block_seed(model: &ModelHandle, fwd: &TapForward, target: &AttributionTarget) -> Result<(usize, Array3<f64>)> {
    match target {
        AttributionTarget::Neuron { layer_id, channel } => {
            let index = model.tap_index(layer_id)?;
            let map = fwd.block_output(model, layer_id)?;
            let (c, h, w) = map.dim();
            let mut g = Array3::zeros((c, h, w));
            g.index_axis_mut(Axis(0), *channel).fill(1.0 / (h * w) as f64);
            Ok((index, g))
        }
        AttributionTarget::Concept { layer_id, direction } => {
            let index = model.tap_index(layer_id)?;
            let map = fwd.block_output(model, layer_id)?;
            let (c, h, w) = map.dim();
            let init = concept_init_from_activation(&to_flat(map), direction)?;
            Ok((index, to_map(&init, c, h, w)))
        }
        AttributionTarget::Class { .. } => Err(Error::Config("class targets have no block seed".into())),
    }
}

pub(crate) fn gradient_maps(
    model: &ModelHandle,
    fwd: &TapForward,
    target: &AttributionTarget,
    taps: &[&str],
    mode: ReluMode,
) -> Result<BTreeMap<String, RelevanceMap>> {
    let indices = check_taps(model, target, taps)?;
    let trace = &fwd.trace;
    let (seed_map, logit_grad) = match target {
        AttributionTarget::Class { class } => {
            ensure!(trace.logits.is_some(), Config, "class relevance needs a forward pass through the head");
            let mut g = Array1::zeros(model.class_count);
            g[*class] = 1.0;
            (None, Some(g))
        }
        _ => (Some(block_seed(model, fwd, target)?), None),
    };
    let seeds: Vec<TapSeed<'_>> = seed_map.iter().map(|(i, g)| TapSeed { block: *i, grad: g }).collect();
    let back = model.network.backward(trace, &seeds, logit_grad.as_ref(), mode, None, true);
    let mut out = BTreeMap::new();
    for (name, i) in taps.iter().zip(indices) {
        let values = back.tap_grads[i]
            .as_ref()
            .map(to_flat)
            .unwrap_or_else(|| {
                let t = &model.taps[i];
                Array2::zeros((t.channel_count, t.spatial_size()))
            });
        out.insert(name.to_string(), RelevanceMap { layer_id: name.to_string(), values });
    }
    Ok(out)
}

pub fn guided_backprop_relevance(
    model: &ModelHandle,
    image: &Array3<f64>,
    target: &AttributionTarget,
    taps: &[&str],
) -> Result<BTreeMap<String, RelevanceMap>> {
    let fwd = forward_for_target(model, image, target)?;
    guided_from_forward(model, &fwd, target, taps)
}

/// Relevance maps for `mode` from an existing forward pass; `None` for mode none.
pub fn relevance_from_forward(
    model: &ModelHandle,
    fwd: &TapForward,
    target: &AttributionTarget,
    taps: &[&str],
    mode: RelevanceMode,
) -> Result<Option<BTreeMap<String, RelevanceMap>>> {
    match mode {
        RelevanceMode::None => Ok(None),
        RelevanceMode::Lrp => lrp_from_forward(model, fwd, target, taps, LrpOptions::default()).map(Some),
        RelevanceMode::Guided => guided_from_forward(model, fwd, target, taps).map(Some),
    }
}

/// Like [`relevance_from_forward`], but `taps` may also name the target layer,
/// whose map is the starting relevance (LRP) or the seed gradient (guided).
pub fn plan_relevance(
    model: &ModelHandle,
    fwd: &TapForward,
    target: &AttributionTarget,
    taps: &[&str],
    mode: RelevanceMode,
) -> Result<Option<BTreeMap<String, RelevanceMap>>> {
    let own = match target {
        AttributionTarget::Class { .. } => None,
        AttributionTarget::Neuron { layer_id, .. } | AttributionTarget::Concept { layer_id, .. } => Some(layer_id.as_str()),
    };
    let shallower: Vec<&str> = taps.iter().copied().filter(|t| Some(*t) != own).collect();
    let Some(mut maps) = relevance_from_forward(model, fwd, target, &shallower, mode)? else {
        return Ok(None);
    };
    if let Some(layer) = own.filter(|l| taps.contains(l)) {
        let map = match mode {
            RelevanceMode::Lrp => match initial_relevance(model, fwd, target, LrpOptions::default().init_scale)? {
                Start::Block { relevance, .. } => relevance,
                Start::Logits(_) => unreachable!("block targets start at a block"),
            },
            _ => block_seed(model, fwd, target)?.1,
        };
        maps.insert(layer.to_string(), RelevanceMap { layer_id: layer.to_string(), values: to_flat(&map) });
    }
    Ok(Some(maps))
}

/// `A ⊙ R`, signs preserved.
pub fn relevance_weighted_activation(a: &ActivationTensor, r: &RelevanceMap) -> Result<ActivationTensor> {
    ensure!(
        a.shape() == r.values.dim(),
        Validation,
        "activation shape {:?} does not match relevance shape {:?}",
        a.shape(),
        r.values.dim()
    );
    Ok(ActivationTensor::new(a.layer_id.clone(), &a.values * &r.values))
}

/// Writes maps as `<layer_id>/relevance` entries.
pub fn export_relevance(maps: &BTreeMap<String, RelevanceMap>, path: &Path) -> Result<String> {
    let arrays: NamedArrays =
        maps.iter().map(|(l, m)| (format!("{l}/relevance"), m.values.clone().into_dyn())).collect();
    archive::write_arrays(path, &arrays)
}
