mod common;

use std::f64::consts::PI;

use fvis::attribution::AttributionTarget;
use fvis::baselines::*;
use fvis::model::ArchSpec;
use ndarray::Array3;

/// Direct real-part sum over the half plane, with mirrored columns doubled.
fn decode_oracle(p: &SpectrumParam) -> Array3<f64> {
    let (c, h, w) = (p.channels, p.height, p.width);
    let wh = w / 2 + 1;
    let n = (h * w) as f64;
    Array3::from_shape_fn((c, h, w), |(ch, y, x)| {
        let mut sum = 0.0;
        for ky in 0..h {
            let fy = if ky <= h / 2 { ky as f64 } else { ky as f64 - h as f64 } / h as f64;
            for kx in 0..wh {
                let fx = kx as f64 / w as f64;
                let scale = (fx * fx + fy * fy).sqrt().max(1.0 / h.max(w) as f64).powf(-p.decay);
                let weight = if kx == 0 || (w % 2 == 0 && kx == w / 2) { 1.0 } else { 2.0 };
                let z = p.coeffs[(ch * h + ky) * wh + kx];
                let theta = 2.0 * PI * (ky as f64 * y as f64 / h as f64 + kx as f64 * x as f64 / w as f64);
                sum += weight * scale * (z.re * theta.cos() - z.im * theta.sin());
            }
        }
        1.0 / (1.0 + (-sum / n).exp())
    })
}

#[test]
fn decode_matches_direct_sum() {
    for (i, (h, w)) in [(8, 8), (6, 9), (7, 5), (16, 16)].into_iter().enumerate() {
        for decay in [0.0, 1.0, 1.5] {
            let p = SpectrumParam::random(2, h, w, decay, 0.5, i as u64);
            let fast = decode_spectrum(&p).unwrap();
            let slow = decode_oracle(&p);
            assert!((&fast - &slow).iter().all(|v| v.abs() < 1e-12), "{h}x{w} decay {decay}");
        }
    }
}

#[test]
fn zero_learning_rate_decodes_the_initial_spectrum() {
    let model = common::random_model(ArchSpec::desk_plain(), 16, 0);
    let config = BaselineConfig { steps: 4, learning_rate: 0.0, seed: 3, ..BaselineConfig::new(16) };
    let result = activation_max_synthesize(&AttributionTarget::Class { class: 1 }, &model, &config).unwrap();
    let init = SpectrumParam::random(3, 16, 16, config.decay, config.init_sd, 3);
    assert_eq!(result.image, decode_spectrum(&init).unwrap());
    assert_eq!(result.trace.len(), 4);
}

#[test]
fn ascent_raises_the_target() {
    let (model, _, _) = common::small_trained(0);
    let start = decode_spectrum(&SpectrumParam::random(3, 16, 16, 1.0, 0.01, 0)).unwrap();
    let fwd = model.forward_taps(&start, &["block2"], false).unwrap();
    let gap = fwd.activations["block2"].values.mean_axis(ndarray::Axis(1)).unwrap();
    let live = (0..gap.len()).max_by(|&a, &b| gap[a].total_cmp(&gap[b])).unwrap();
    for target in [
        AttributionTarget::Class { class: 2 },
        AttributionTarget::Neuron { layer_id: "block2".into(), channel: live },
    ] {
        let result = activation_max_synthesize(&target, &model, &BaselineConfig::plain(40, 0.5, 0)).unwrap();
        let first = result.trace[0].activation.unwrap();
        let last = result.final_entry().activation.unwrap();
        assert!(last > first, "{target:?}: {first} -> {last}");
        assert!(result.trace.iter().all(|e| e.total == -e.activation.unwrap()));
    }
}

#[test]
fn augmented_runs_are_deterministic() {
    let model = common::random_model(ArchSpec::desk_resnet(), 16, 2);
    let target = AttributionTarget::Class { class: 0 };
    let config = BaselineConfig { steps: 10, ..BaselineConfig::new(16) };
    let a = activation_max_synthesize(&target, &model, &config).unwrap();
    let b = activation_max_synthesize(&target, &model, &config).unwrap();
    assert_eq!(a.image, b.image);
    assert_eq!(a.trace, b.trace);
    assert_eq!(a.transparency, b.transparency);
    let c = activation_max_synthesize(&target, &model, &BaselineConfig { seed: 1, ..config }).unwrap();
    assert_ne!(a.image, c.image);
}

#[test]
fn invalid_settings_are_rejected() {
    let model = common::random_model(ArchSpec::desk_plain(), 16, 0);
    let target = AttributionTarget::Class { class: 0 };
    let bad_crop = BaselineConfig { crop: Some((0.0, 0.1)), ..BaselineConfig::new(16) };
    assert!(activation_max_synthesize(&target, &model, &bad_crop).is_err());
    let big_jitter = BaselineConfig { jitter: 16, ..BaselineConfig::new(16) };
    assert!(activation_max_synthesize(&target, &model, &big_jitter).is_err());
    let concept = AttributionTarget::Concept { layer_id: "block3".into(), direction: vec![1.0; 32] };
    assert!(matches!(activation_max_synthesize(&concept, &model, &BaselineConfig::new(16)), Err(fvis::Error::Config(_))));
    let bad_class = AttributionTarget::Class { class: 9 };
    assert!(activation_max_synthesize(&bad_class, &model, &BaselineConfig::new(16)).is_err());
}
