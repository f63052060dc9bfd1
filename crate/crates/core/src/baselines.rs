//! Fourier-parameterized activation maximization.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::attribution::AttributionTarget;
use crate::error::{ensure, Error, Result};
use crate::imageops::{crop_resize, crop_resize_backward, CropWindow};
use crate::model::ModelHandle;
use crate::optim::Adam;
use crate::synthesis::{
    check_jitter, jitter_offsets, l2_loss, roll, transparency_map, tv_loss, MethodConfig, SynthesisResult, TraceEntry,
    TransparencyAccumulator,
};

/// Half-plane complex spectrum per channel, `C×H×(W/2+1)` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumParam {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub coeffs: Vec<Complex64>,
    /// Exponent of the `1/f` amplitude scaling.
    pub decay: f64,
}

impl SpectrumParam {
    pub fn half_width(width: usize) -> usize {
        width / 2 + 1
    }

    pub fn zeros(channels: usize, height: usize, width: usize, decay: f64) -> Self {
        let n = channels * height * Self::half_width(width);
        Self { channels, height, width, coeffs: vec![Complex64::new(0.0, 0.0); n], decay }
    }

    /// Coefficients drawn from `N(0, sd)` in both parts.
    pub fn random(channels: usize, height: usize, width: usize, decay: f64, sd: f64, seed: u64) -> Self {
        let mut p = Self::zeros(channels, height, width, decay);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::<f64>::new(0.0, sd).expect("valid sd");
        for c in &mut p.coeffs {
            *c = Complex64::new(normal.sample(&mut rng), normal.sample(&mut rng));
        }
        p
    }

    fn plane(&self) -> usize {
        self.height * Self::half_width(self.width)
    }

    /// Amplitude scale per half-plane bin: `max(f, 1/max(H,W))^-decay`.
    pub fn scale(&self) -> Vec<f64> {
        let (h, w) = (self.height, self.width);
        let wh = Self::half_width(w);
        let floor = 1.0 / h.max(w) as f64;
        let mut out = Vec::with_capacity(h * wh);
        for ky in 0..h {
            let fy = signed_freq(ky, h) / h as f64;
            for kx in 0..wh {
                let fx = kx as f64 / w as f64;
                out.push((fx * fx + fy * fy).sqrt().max(floor).powf(-self.decay));
            }
        }
        out
    }

    fn check(&self) -> Result<()> {
        ensure!(
            self.coeffs.len() == self.channels * self.plane(),
            Validation,
            "spectrum has {} coefficients, expected {}",
            self.coeffs.len(),
            self.channels * self.plane()
        );
        ensure!(self.coeffs.iter().all(|c| c.re.is_finite() && c.im.is_finite()), Validation, "spectrum is not finite");
        Ok(())
    }
}

fn signed_freq(k: usize, n: usize) -> f64 {
    if k <= n / 2 {
        k as f64
    } else {
        k as f64 - n as f64
    }
}

/// Weight of a half-plane column in the real reconstruction: columns with a
/// mirrored partner count twice.
fn column_weight(kx: usize, width: usize) -> f64 {
    if kx == 0 || (width % 2 == 0 && kx == width / 2) {
        1.0
    } else {
        2.0
    }
}

struct Fft2 {
    rows_fwd: std::sync::Arc<dyn rustfft::Fft<f64>>,
    rows_inv: std::sync::Arc<dyn rustfft::Fft<f64>>,
    cols_fwd: std::sync::Arc<dyn rustfft::Fft<f64>>,
    cols_inv: std::sync::Arc<dyn rustfft::Fft<f64>>,
    height: usize,
    width: usize,
}

impl Fft2 {
    fn new(height: usize, width: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            rows_fwd: planner.plan_fft_forward(width),
            rows_inv: planner.plan_fft_inverse(width),
            cols_fwd: planner.plan_fft_forward(height),
            cols_inv: planner.plan_fft_inverse(height),
            height,
            width,
        }
    }

    /// Unnormalized 2-D transform of a row-major `H×W` buffer, in place.
    fn run(&self, buf: &mut [Complex64], inverse: bool) {
        let (h, w) = (self.height, self.width);
        let (rows, cols) = if inverse { (&self.rows_inv, &self.cols_inv) } else { (&self.rows_fwd, &self.cols_fwd) };
        for row in buf.chunks_exact_mut(w) {
            rows.process(row);
        }
        let mut col = vec![Complex64::new(0.0, 0.0); h];
        for x in 0..w {
            for y in 0..h {
                col[y] = buf[y * w + x];
            }
            cols.process(&mut col);
            for y in 0..h {
                buf[y * w + x] = col[y];
            }
        }
    }
}

/// Pre-sigmoid image: `Re(1/N · Σ_half weight·scale·coeff·e^{iθ})`.
fn spectrum_to_logits(param: &SpectrumParam, fft: &Fft2) -> Array3<f64> {
    let (c, h, w) = (param.channels, param.height, param.width);
    let wh = SpectrumParam::half_width(w);
    let scale = param.scale();
    let n = (h * w) as f64;
    let mut out = Array3::zeros((c, h, w));
    let mut buf = vec![Complex64::new(0.0, 0.0); h * w];
    for ch in 0..c {
        buf.iter_mut().for_each(|v| *v = Complex64::new(0.0, 0.0));
        let coeffs = &param.coeffs[ch * h * wh..(ch + 1) * h * wh];
        for ky in 0..h {
            for kx in 0..wh {
                let i = ky * wh + kx;
                buf[ky * w + kx] = coeffs[i] * (scale[i] * column_weight(kx, w));
            }
        }
        fft.run(&mut buf, true);
        for y in 0..h {
            for x in 0..w {
                out[[ch, y, x]] = buf[y * w + x].re / n;
            }
        }
    }
    out
}

/// Adjoint of [`spectrum_to_logits`] applied to a pixel gradient.
fn logits_grad_to_spectrum(param: &SpectrumParam, grad: &Array3<f64>, fft: &Fft2) -> Vec<Complex64> {
    let (c, h, w) = (param.channels, param.height, param.width);
    let wh = SpectrumParam::half_width(w);
    let scale = param.scale();
    let n = (h * w) as f64;
    let mut out = vec![Complex64::new(0.0, 0.0); param.coeffs.len()];
    let mut buf = vec![Complex64::new(0.0, 0.0); h * w];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                buf[y * w + x] = Complex64::new(grad[[ch, y, x]], 0.0);
            }
        }
        fft.run(&mut buf, false);
        for ky in 0..h {
            for kx in 0..wh {
                let i = ky * wh + kx;
                out[ch * h * wh + i] = buf[ky * w + kx] * (scale[i] * column_weight(kx, w) / n);
            }
        }
    }
    out
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Inverse FFT per channel, frequency-scaled, squashed by a sigmoid.
pub fn decode_spectrum(param: &SpectrumParam) -> Result<Array3<f64>> {
    param.check()?;
    let fft = Fft2::new(param.height, param.width);
    Ok(spectrum_to_logits(param, &fft).mapv(sigmoid))
}

/// Spectrum whose decode is `image`; pixels must lie strictly inside `(0,1)`.
pub fn encode_spectrum(image: &Array3<f64>, decay: f64) -> Result<SpectrumParam> {
    ensure!(
        image.iter().all(|v| *v > 0.0 && *v < 1.0),
        Validation,
        "encoding needs pixels strictly inside (0,1)"
    );
    let (c, h, w) = image.dim();
    let mut param = SpectrumParam::zeros(c, h, w, decay);
    let wh = SpectrumParam::half_width(w);
    let scale = param.scale();
    let fft = Fft2::new(h, w);
    let mut buf = vec![Complex64::new(0.0, 0.0); h * w];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let p = image[[ch, y, x]];
                buf[y * w + x] = Complex64::new((p / (1.0 - p)).ln(), 0.0);
            }
        }
        fft.run(&mut buf, false);
        for ky in 0..h {
            for kx in 0..wh {
                let i = ky * wh + kx;
                param.coeffs[ch * h * wh + i] = buf[ky * w + kx] / scale[i];
            }
        }
    }
    Ok(param)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub jitter: usize,
    pub seed: u64,
    pub decay: f64,
    /// Standard deviation of the initial coefficients.
    pub init_sd: f64,
    /// Half-width of the uniform pixel noise added each step; 0 disables.
    pub noise: f64,
    /// Mean and standard deviation of the crop side as a fraction of the image.
    /// `None` disables cropping.
    pub crop: Option<(f64, f64)>,
}

impl BaselineConfig {
    pub fn new(side: usize) -> Self {
        Self {
            steps: 512,
            learning_rate: 1.0,
            jitter: crate::synthesis::SynthesisConfig::default_jitter(side),
            seed: 0,
            decay: 1.0,
            init_sd: 0.01,
            noise: 0.1,
            crop: Some((0.25, 0.1)),
        }
    }

    /// Plain ascent: no jitter, noise or crops.
    pub fn plain(steps: usize, learning_rate: f64, seed: u64) -> Self {
        Self { steps, learning_rate, jitter: 0, seed, decay: 1.0, init_sd: 0.01, noise: 0.0, crop: None }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.steps >= 1, Validation, "steps must be at least 1");
        ensure!(self.learning_rate >= 0.0 && self.learning_rate.is_finite(), Validation, "learning rate must be finite and nonnegative");
        ensure!(self.noise >= 0.0 && self.init_sd >= 0.0, Validation, "noise and init sd must be nonnegative");
        if let Some((mean, sd)) = self.crop {
            ensure!(mean > 0.0 && mean <= 1.0 && sd >= 0.0, Validation, "crop fraction mean must be in (0,1]");
        }
        Ok(())
    }
}

struct Augment {
    offsets: (isize, isize),
    noise: Option<Array2<f64>>,
    window: Option<CropWindow>,
}

/// Per-step augmentation, deterministic in `(seed, step)`.
fn draw_augment(config: &BaselineConfig, h: usize, w: usize, step: usize) -> Augment {
    let offsets = jitter_offsets(config.jitter, config.seed, step);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_f00d_cafe_d00d);
    rng.set_stream(step as u64 + 1);
    let noise = (config.noise > 0.0).then(|| Array2::from_shape_fn((h, w), |_| rng.gen_range(-config.noise..=config.noise)));
    let window = config.crop.map(|(mean, sd)| {
        let frac = if sd > 0.0 { Normal::new(mean, sd).expect("valid sd").sample(&mut rng) } else { mean };
        let frac = frac.clamp(0.05, 1.0);
        let ch = ((frac * h as f64).round() as usize).clamp(2.min(h), h);
        let cw = ((frac * w as f64).round() as usize).clamp(2.min(w), w);
        let y0 = rng.gen_range(0..=h - ch);
        let x0 = rng.gen_range(0..=w - cw);
        CropWindow { y0, x0, height: ch, width: cw }
    });
    Augment { offsets, noise, window }
}

fn apply_augment(image: &Array3<f64>, aug: &Augment) -> Array3<f64> {
    let (_, h, w) = image.dim();
    let mut x = roll(image, aug.offsets.0, aug.offsets.1);
    if let Some(noise) = &aug.noise {
        for mut plane in x.outer_iter_mut() {
            plane += noise;
        }
    }
    match aug.window {
        Some(window) => crop_resize(&x, window, h, w),
        None => x,
    }
}

fn augment_backward(grad: Array3<f64>, aug: &Augment) -> Array3<f64> {
    let (_, h, w) = grad.dim();
    let g = match aug.window {
        Some(window) => crop_resize_backward(&grad, window, h, w),
        None => grad,
    };
    roll(&g, -aug.offsets.0, -aug.offsets.1)
}

/// Target activation and its gradient with respect to the (augmented) input.
fn objective(model: &ModelHandle, target: &AttributionTarget, x: &Array3<f64>) -> Result<(f64, Array3<f64>)> {
    match target {
        AttributionTarget::Class { class } => {
            let fwd = model.forward_taps(x, &[], true)?;
            let value = fwd.logits()[*class];
            let mut g = Array1::zeros(model.class_count);
            g[*class] = 1.0;
            Ok((value, fwd.backward(model, &BTreeMap::new(), Some(&g))?))
        }
        AttributionTarget::Neuron { layer_id, channel } => {
            let fwd = model.forward_taps(x, &[layer_id.as_str()], false)?;
            let acts = &fwd.activations[layer_id];
            let (c, d) = acts.shape();
            let value = target.score_activation(&acts.values);
            let mut g = Array2::zeros((c, d));
            g.row_mut(*channel).fill(1.0 / d as f64);
            Ok((value, fwd.backward(model, &BTreeMap::from([(layer_id.clone(), g)]), None)?))
        }
        AttributionTarget::Concept { .. } => {
            Err(Error::Config("the activation-maximization baseline supports class and neuron targets".into()))
        }
    }
}

fn trace_entry(step: usize, image: &Array3<f64>, activation: f64) -> TraceEntry {
    TraceEntry { step, total: -activation, sm: Vec::new(), tv: tv_loss(image), l2: l2_loss(image), activation: Some(activation) }
}

/// Gradient ascent on the target activation over a Fourier-parameterized image.
pub fn activation_max_synthesize(
    target: &AttributionTarget,
    model: &ModelHandle,
    config: &BaselineConfig,
) -> Result<SynthesisResult> {
    config.validate()?;
    target.validate(model)?;
    let (c, h, w) = model.geometry.dim();
    check_jitter(config.jitter, h, w)?;
    let fft = Fft2::new(h, w);
    let mut param = SpectrumParam::random(c, h, w, config.decay, config.init_sd, config.seed);
    let mut flat: Vec<f64> = param.coeffs.iter().flat_map(|z| [z.re, z.im]).collect();
    let mut adam = Adam::new(flat.len(), config.learning_rate);
    let mut transparency = TransparencyAccumulator::new(h, w);
    let mut trace = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let logits = spectrum_to_logits(&param, &fft);
        let image = logits.mapv(sigmoid);
        let aug = draw_augment(config, h, w, step);
        let (value, g_aug) = objective(model, target, &apply_augment(&image, &aug))?;
        // loss is the negated activation
        let g_image = augment_backward(g_aug, &aug).mapv(|v| -v);
        let entry = trace_entry(step, &image, value);
        if !value.is_finite() || g_image.iter().any(|v| !v.is_finite()) {
            trace.push(entry);
            return Err(Error::Divergence { step, trace });
        }
        transparency.add(&g_image);
        let g_logits = &g_image * &image.mapv(|p| p * (1.0 - p));
        let g_coeffs = logits_grad_to_spectrum(&param, &g_logits, &fft);
        let g_flat: Vec<f64> = g_coeffs.iter().flat_map(|z| [z.re, z.im]).collect();
        adam.step(&mut flat, &g_flat);
        for (z, pair) in param.coeffs.iter_mut().zip(flat.chunks_exact(2)) {
            *z = Complex64::new(pair[0], pair[1]);
        }
        trace.push(entry);
    }
    let image = spectrum_to_logits(&param, &fft).mapv(sigmoid);
    let (value, _) = objective(model, target, &image)?;
    if !value.is_finite() {
        return Err(Error::Divergence { step: config.steps - 1, trace });
    }
    let last = trace.last_mut().expect("steps >= 1");
    *last = trace_entry(last.step, &image, value);
    Ok(SynthesisResult {
        method: "fourier-am".into(),
        target: target.clone(),
        config: MethodConfig::FourierAm(config.clone()),
        image,
        transparency: transparency_map(&transparency),
        trace,
    })
}
