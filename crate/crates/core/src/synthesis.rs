//! Gradient-based image synthesis against a reference distribution.

use std::collections::BTreeMap;

use ndarray::{s, Array2, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::baselines::BaselineConfig;
use crate::attribution::{plan_relevance, relevance_weighted_activation, AttributionTarget, RelevanceMode};
use crate::error::{ensure, Error, Result};
use crate::model::{ActivationTensor, ModelHandle};
use crate::optim::Adam;
use crate::sortmatch::{sm_loss_multilayer, MatchPlan, ReferenceDistribution};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesisConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub alpha_tv: f64,
    pub alpha_l2: f64,
    pub plan: MatchPlan,
    /// Maximum circular shift in pixels per step.
    pub jitter: usize,
    pub seed: u64,
    pub relevance_mode: RelevanceMode,
}

impl SynthesisConfig {
    pub const DEFAULT_STEPS: usize = 512;
    pub const DEFAULT_LEARNING_RATE: f64 = 0.05;

    /// One pixel per 32 of image side, at most 8.
    pub fn default_jitter(side: usize) -> usize {
        (side / 32).clamp(1, 8)
    }

    pub fn new(plan: MatchPlan, side: usize) -> Self {
        Self {
            steps: Self::DEFAULT_STEPS,
            learning_rate: Self::DEFAULT_LEARNING_RATE,
            alpha_tv: 0.0,
            alpha_l2: 0.0,
            plan,
            jitter: Self::default_jitter(side),
            seed: 0,
            relevance_mode: RelevanceMode::None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.steps >= 1, Validation, "steps must be at least 1");
        ensure!(self.learning_rate >= 0.0 && self.learning_rate.is_finite(), Validation, "learning rate must be finite and nonnegative");
        ensure!(self.alpha_tv >= 0.0 && self.alpha_l2 >= 0.0, Validation, "regularizer weights must be nonnegative");
        Ok(())
    }
}

/// One optimization step. For the final step the losses are those of the
/// returned image, evaluated without jitter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub step: usize,
    pub total: f64,
    /// Unweighted sort-matching term per plan layer, in plan order.
    pub sm: Vec<f64>,
    pub tv: f64,
    pub l2: f64,
    /// Maximized activation (baseline objective); subtracted from the total.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub activation: Option<f64>,
}

impl TraceEntry {
    pub fn recompose(&self, plan: &MatchPlan, alpha_tv: f64, alpha_l2: f64) -> f64 {
        let sm: f64 = plan.layers.iter().zip(&self.sm).map(|((_, w), v)| w * v).sum();
        sm + alpha_tv * self.tv + alpha_l2 * self.l2 - self.activation.unwrap_or(0.0)
    }
}

/// Settings of the method that produced a result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "kebab-case")]
pub enum MethodConfig {
    Vital(SynthesisConfig),
    FourierAm(BaselineConfig),
}

impl MethodConfig {
    pub fn seed(&self) -> u64 {
        match self {
            MethodConfig::Vital(c) => c.seed,
            MethodConfig::FourierAm(c) => c.seed,
        }
    }

    pub fn steps(&self) -> usize {
        match self {
            MethodConfig::Vital(c) => c.steps,
            MethodConfig::FourierAm(c) => c.steps,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthesisResult {
    pub method: String,
    pub target: AttributionTarget,
    pub config: MethodConfig,
    /// `C×H×W` in `[0,1]`.
    pub image: Array3<f64>,
    /// `H×W` in `[0,1]`.
    pub transparency: Array2<f64>,
    pub trace: Vec<TraceEntry>,
}

impl SynthesisResult {
    pub fn final_entry(&self) -> &TraceEntry {
        self.trace.last().expect("trace has one entry per step")
    }
}

fn pair_count(image: &Array3<f64>) -> usize {
    let (c, h, w) = image.dim();
    c * (h * w.saturating_sub(1) + h.saturating_sub(1) * w)
}

/// Mean squared difference over horizontally and vertically adjacent pixel pairs.
pub fn tv_loss(image: &Array3<f64>) -> f64 {
    let n = pair_count(image);
    if n == 0 {
        return 0.0;
    }
    let dx = &image.slice(s![.., .., 1..]) - &image.slice(s![.., .., ..-1]);
    let dy = &image.slice(s![.., 1.., ..]) - &image.slice(s![.., ..-1, ..]);
    (dx.mapv(|v| v * v).sum() + dy.mapv(|v| v * v).sum()) / n as f64
}

pub fn tv_grad(image: &Array3<f64>) -> Array3<f64> {
    let mut g = Array3::zeros(image.raw_dim());
    let n = pair_count(image);
    if n == 0 {
        return g;
    }
    let scale = 2.0 / n as f64;
    let dx = (&image.slice(s![.., .., 1..]) - &image.slice(s![.., .., ..-1])) * scale;
    let dy = (&image.slice(s![.., 1.., ..]) - &image.slice(s![.., ..-1, ..])) * scale;
    {
        let mut right = g.slice_mut(s![.., .., 1..]);
        right += &dx;
    }
    {
        let mut left = g.slice_mut(s![.., .., ..-1]);
        left -= &dx;
    }
    {
        let mut down = g.slice_mut(s![.., 1.., ..]);
        down += &dy;
    }
    {
        let mut up = g.slice_mut(s![.., ..-1, ..]);
        up -= &dy;
    }
    g
}

/// Mean of squared pixel values.
pub fn l2_loss(image: &Array3<f64>) -> f64 {
    image.mapv(|v| v * v).mean().unwrap_or(0.0)
}

pub fn l2_grad(image: &Array3<f64>) -> Array3<f64> {
    image * (2.0 / image.len().max(1) as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub sm_total: f64,
    pub per_layer: Vec<(String, f64)>,
    pub tv: f64,
    pub l2: f64,
}

/// Weighted sort-matching term plus `alpha_tv·TV + alpha_l2·l2`.
pub fn total_loss(
    acts: &BTreeMap<String, ActivationTensor>,
    refdist: &ReferenceDistribution,
    plan: &MatchPlan,
    image: &Array3<f64>,
    alpha_tv: f64,
    alpha_l2: f64,
) -> Result<LossBreakdown> {
    ensure!(image.iter().all(|v| v.is_finite()), Validation, "image contains non-finite values");
    let sm = sm_loss_multilayer(acts, refdist, plan)?;
    let tv = tv_loss(image);
    let l2 = l2_loss(image);
    Ok(LossBreakdown { total: sm.total + alpha_tv * tv + alpha_l2 * l2, sm_total: sm.total, per_layer: sm.per_layer, tv, l2 })
}

/// Circular shift offsets `(dy, dx)` for one step, uniform in `[-amplitude, amplitude]`.
pub fn jitter_offsets(amplitude: usize, seed: u64, step: usize) -> (isize, isize) {
    if amplitude == 0 {
        return (0, 0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step as u64 + 1);
    let a = amplitude as isize;
    (rng.gen_range(-a..=a), rng.gen_range(-a..=a))
}

/// Circularly shifts every channel by `(dy, dx)`.
pub fn roll(image: &Array3<f64>, dy: isize, dx: isize) -> Array3<f64> {
    let (c, h, w) = image.dim();
    let (hi, wi) = (h as isize, w as isize);
    Array3::from_shape_fn((c, h, w), |(ci, y, x)| {
        let sy = (y as isize - dy).rem_euclid(hi) as usize;
        let sx = (x as isize - dx).rem_euclid(wi) as usize;
        image[[ci, sy, sx]]
    })
}

pub fn check_jitter(amplitude: usize, height: usize, width: usize) -> Result<()> {
    ensure!(
        amplitude < height.min(width),
        Validation,
        "jitter amplitude {amplitude} must be smaller than the image side {}",
        height.min(width)
    );
    Ok(())
}

pub fn jitter(image: &Array3<f64>, amplitude: usize, seed: u64, step: usize) -> Result<Array3<f64>> {
    let (_, h, w) = image.dim();
    check_jitter(amplitude, h, w)?;
    let (dy, dx) = jitter_offsets(amplitude, seed, step);
    Ok(roll(image, dy, dx))
}

/// Running sum of channel-summed absolute pixel gradients.
#[derive(Debug, Clone)]
pub struct TransparencyAccumulator {
    sum: Array2<f64>,
    steps: usize,
}

impl TransparencyAccumulator {
    pub fn new(height: usize, width: usize) -> Self {
        Self { sum: Array2::zeros((height, width)), steps: 0 }
    }

    pub fn add(&mut self, grad: &Array3<f64>) {
        self.sum += &grad.mapv(f64::abs).sum_axis(Axis(0));
        self.steps += 1;
    }

    pub fn steps(&self) -> usize {
        self.steps
    }
}

/// Per-pixel mean accumulated magnitude divided by its maximum; all-zero stays zero.
pub fn transparency_map(acc: &TransparencyAccumulator) -> Array2<f64> {
    let mean = &acc.sum / acc.steps.max(1) as f64;
    let max = mean.fold(0.0f64, |m, &v| m.max(v));
    if max > 0.0 {
        mean / max
    } else {
        mean
    }
}

/// Seeded `N(0.5, 0.1)` noise clamped to `[0,1]`.
pub fn initial_image(c: usize, h: usize, w: usize, seed: u64) -> Array3<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::<f64>::new(0.5, 0.1).expect("valid std");
    Array3::from_shape_fn((c, h, w), |_| normal.sample(&mut rng).clamp(0.0, 1.0))
}

struct StepEval {
    per_layer: Vec<(String, f64)>,
    sm_total: f64,
    /// Pixel gradient of the sort-matching term, in unjittered coordinates.
    sm_grad: Array3<f64>,
}

/// Sort-matching term and its pixel gradient for `image` shifted by `(dy, dx)`.
fn evaluate_sm(
    model: &ModelHandle,
    target: &AttributionTarget,
    refdist: &ReferenceDistribution,
    config: &SynthesisConfig,
    image: &Array3<f64>,
    (dy, dx): (isize, isize),
) -> Result<StepEval> {
    let shifted = roll(image, dy, dx);
    let layers = config.plan.layer_ids();
    let mode = config.relevance_mode;
    let fwd = match (mode, target) {
        (RelevanceMode::None, _) => model.forward_taps(&shifted, &layers, false)?,
        (_, AttributionTarget::Class { .. }) => model.forward_taps(&shifted, &layers, true)?,
        (_, AttributionTarget::Neuron { layer_id, .. } | AttributionTarget::Concept { layer_id, .. }) => {
            let mut with_target = layers.clone();
            if !with_target.contains(&layer_id.as_str()) {
                with_target.push(layer_id.as_str());
            }
            model.forward_taps(&shifted, &with_target, false)?
        }
    };
    let relevance = plan_relevance(model, &fwd, target, &layers, mode)?;
    let mut acts = BTreeMap::new();
    for layer in &layers {
        let a = &fwd.activations[*layer];
        let matched = match &relevance {
            Some(maps) => relevance_weighted_activation(a, &maps[*layer])?,
            None => a.clone(),
        };
        acts.insert(layer.to_string(), matched);
    }
    let sm = sm_loss_multilayer(&acts, refdist, &config.plan)?;
    let mut grads = sm.grads;
    if let Some(maps) = &relevance {
        // relevance is held fixed within a step
        for (layer, g) in grads.iter_mut() {
            *g *= &maps[layer].values;
        }
    }
    let g = fwd.backward(model, &grads, None)?;
    Ok(StepEval { per_layer: sm.per_layer, sm_total: sm.total, sm_grad: roll(&g, -dy, -dx) })
}

fn check_refdist(model: &ModelHandle, refdist: &ReferenceDistribution, config: &SynthesisConfig) -> Result<()> {
    for (layer, _) in &config.plan.layers {
        let tap = model.tap(layer)?;
        let profile = refdist
            .profiles
            .get(layer)
            .ok_or_else(|| Error::Config(format!("reference distribution lacks plan layer {layer}")))?;
        ensure!(
            profile.values.dim() == (tap.channel_count, tap.spatial_size()),
            Config,
            "reference profile for {layer} does not match the model geometry"
        );
    }
    ensure!(
        refdist.provenance.relevance_mode == config.relevance_mode,
        Config,
        "reference distribution was built with relevance mode {}, synthesis uses {}",
        refdist.provenance.relevance_mode.as_str(),
        config.relevance_mode.as_str()
    );
    Ok(())
}

/// Optimizes a noise image so its (relevance-weighted) activations match `refdist`.
pub fn synthesize(
    target: &AttributionTarget,
    refdist: &ReferenceDistribution,
    model: &ModelHandle,
    config: &SynthesisConfig,
) -> Result<SynthesisResult> {
    config.validate()?;
    target.validate(model)?;
    check_refdist(model, refdist, config)?;
    if config.relevance_mode != RelevanceMode::None {
        let matchable = target.matchable_taps(model)?;
        for (layer, _) in &config.plan.layers {
            ensure!(matchable.contains(layer), Config, "plan layer {layer} is deeper than the target");
        }
    }
    let (c, h, w) = model.geometry.dim();
    check_jitter(config.jitter, h, w)?;

    let mut image = initial_image(c, h, w, config.seed);
    let mut adam = Adam::new(image.len(), config.learning_rate);
    let mut transparency = TransparencyAccumulator::new(h, w);
    let mut trace = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let offsets = jitter_offsets(config.jitter, config.seed, step);
        let eval = evaluate_sm(model, target, refdist, config, &image, offsets)?;
        let tv = tv_loss(&image);
        let l2 = l2_loss(&image);
        let total = eval.sm_total + config.alpha_tv * tv + config.alpha_l2 * l2;
        let entry = TraceEntry {
            step,
            total,
            sm: eval.per_layer.iter().map(|(_, v)| *v).collect(),
            tv,
            l2,
            activation: None,
        };
        if !total.is_finite() || eval.sm_grad.iter().any(|v| !v.is_finite()) {
            trace.push(entry);
            return Err(Error::Divergence { step, trace });
        }
        transparency.add(&eval.sm_grad);
        let mut grad = eval.sm_grad;
        if config.alpha_tv > 0.0 {
            grad.scaled_add(config.alpha_tv, &tv_grad(&image));
        }
        if config.alpha_l2 > 0.0 {
            grad.scaled_add(config.alpha_l2, &l2_grad(&image));
        }
        adam.step(image.as_slice_mut().expect("contiguous image"), grad.as_slice().expect("contiguous grad"));
        image.mapv_inplace(|v| v.clamp(0.0, 1.0));
        trace.push(entry);
    }
    let final_eval = evaluate_sm(model, target, refdist, config, &image, (0, 0))?;
    let tv = tv_loss(&image);
    let l2 = l2_loss(&image);
    let total = final_eval.sm_total + config.alpha_tv * tv + config.alpha_l2 * l2;
    if !total.is_finite() {
        return Err(Error::Divergence { step: config.steps - 1, trace });
    }
    let last = trace.last_mut().expect("steps >= 1");
    *last = TraceEntry { step: last.step, total, sm: final_eval.per_layer.iter().map(|(_, v)| *v).collect(), tv, l2, activation: None };
    Ok(SynthesisResult {
        method: "vital".into(),
        target: target.clone(),
        config: MethodConfig::Vital(config.clone()),
        image,
        transparency: transparency_map(&transparency),
        trace,
    })
}
