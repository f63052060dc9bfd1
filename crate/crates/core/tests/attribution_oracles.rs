mod common;

use fvis::attribution::*;
use fvis::model::layers::Conv2d;
use fvis::model::network::Layer;
use fvis::model::{ArchSpec, ModelHandle};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{random_image, random_model};

fn strongest_channel(model: &ModelHandle, image: &Array3<f64>, layer: &str) -> (usize, f64) {
    let fwd = model.forward_taps(image, &[layer], false).unwrap();
    let pooled = fwd.activations[layer].values.mean_axis(ndarray::Axis(1)).unwrap();
    pooled.iter().copied().enumerate().fold((0, f64::MIN), |best, (i, v)| if v > best.1 { (i, v) } else { best })
}

fn zero_biases(layers: &mut [Layer]) {
    for layer in layers {
        match layer {
            Layer::Conv(c) => c.bias.fill(0.0),
            Layer::Residual(r) => {
                zero_biases(&mut r.branch);
                if let Some(c) = &mut r.shortcut {
                    c.bias.fill(0.0);
                }
            }
            Layer::Relu => {}
        }
    }
}

fn bias_free(arch: ArchSpec, seed: u64) -> ModelHandle {
    let mut model = random_model(arch, 12, seed);
    for block in &mut model.network.blocks {
        zero_biases(&mut block.layers);
    }
    model
}

fn random_arch(rng: &mut ChaCha8Rng) -> ArchSpec {
    let depth = rng.gen_range(2..=4);
    let widths: Vec<usize> = (0..depth).map(|_| rng.gen_range(2..7)).collect();
    if rng.gen_bool(0.5) {
        ArchSpec::Plain { widths }
    } else {
        ArchSpec::ResNet { widths }
    }
}

#[test]
fn lrp_conserves_relevance_on_random_rectifier_networks() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut checked, mut trial) = (0, 0u64);
    while checked < 50 {
        trial += 1;
        assert!(trial < 2000, "too few fully live targets");
        let model = bias_free(random_arch(&mut rng), trial);
        let image = random_image(3, 12, 12, trial + 100);
        let last = model.last_tap().layer_id.clone();
        let (channel, score) = strongest_channel(&model, &image, &last);
        // The uniform start puts relevance on every position; a position whose
        // whole receptive field is dead has nothing to pass it to.
        let fwd = model.forward_taps(&image, &[last.as_str()], false).unwrap();
        if fwd.activations[last.as_str()].values.row(channel).iter().any(|v| *v <= 0.0) {
            continue;
        }
        checked += 1;
        let target = AttributionTarget::Neuron { layer_id: last.clone(), channel };
        let names = model.tap_names();
        let taps: Vec<&str> = names.iter().map(String::as_str).filter(|t| *t != last).collect();
        let maps = lrp_relevance(&model, &image, &target, &taps).unwrap();
        for tap in &taps {
            let sum: f64 = maps[*tap].values.sum();
            assert!((sum - score).abs() <= 0.01 * score, "trial {trial} {tap}: sum {sum} vs score {score}");
        }
    }
}

#[test]
fn lrp_is_homogeneous_in_the_initial_relevance() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for trial in 0..50u64 {
        let model = random_model(random_arch(&mut rng), 12, trial);
        let image = random_image(3, 12, 12, trial + 7);
        let last = model.last_tap().layer_id.clone();
        let (channel, _) = strongest_channel(&model, &image, &last);
        let target = AttributionTarget::Neuron { layer_id: last.clone(), channel };
        let fwd = model.forward_taps(&image, &[last.as_str()], false).unwrap();
        let s = rng.gen_range(0.1..10.0);
        let one = lrp_from_forward(&model, &fwd, &target, &["block1"], LrpOptions::default()).unwrap();
        let scaled = lrp_from_forward(&model, &fwd, &target, &["block1"], LrpOptions { init_scale: s, ..Default::default() }).unwrap();
        let zero = lrp_from_forward(&model, &fwd, &target, &["block1"], LrpOptions { init_scale: 0.0, ..Default::default() }).unwrap();
        let a = &one["block1"].values;
        let b = &scaled["block1"].values;
        let norm = a.iter().map(|v| v.abs()).fold(0.0, f64::max);
        for (x, y) in a.iter().zip(b) {
            assert!((y - s * x).abs() <= 1e-6 * s * norm, "trial {trial}");
        }
        assert!(zero["block1"].values.iter().all(|v| *v == 0.0));
    }
}

#[test]
fn lrp_rejects_taps_at_or_below_the_target() {
    let model = random_model(ArchSpec::desk_plain(), 16, 0);
    let image = random_image(3, 16, 16, 0);
    let target = AttributionTarget::Neuron { layer_id: "block2".into(), channel: 0 };
    for tap in ["block2", "block3"] {
        assert!(matches!(lrp_relevance(&model, &image, &target, &[tap]), Err(fvis::Error::Config(_))));
    }
}

/// `conv^T g` by direct loops over output positions.
fn conv_transpose(conv: &Conv2d, g: &Array3<f64>, h: usize, w: usize) -> Array3<f64> {
    let k = conv.kernel;
    let mut out = Array3::zeros((conv.in_channels, h, w));
    let (oc, oh, ow) = g.dim();
    for o in 0..oc {
        for y in 0..oh {
            for x in 0..ow {
                for i in 0..conv.in_channels {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (y * conv.stride + ky) as isize - conv.padding as isize;
                            let ix = (x * conv.stride + kx) as isize - conv.padding as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            out[[i, iy as usize, ix as usize]] += conv.weight[[o, (i * k + ky) * k + kx]] * g[[o, y, x]];
                        }
                    }
                }
            }
        }
    }
    out
}

fn plain_conv(model: &ModelHandle, block: usize) -> &Conv2d {
    match &model.network.blocks[block].layers[0] {
        Layer::Conv(c) => c,
        _ => panic!("plain blocks start with a convolution"),
    }
}

fn to_map(a: &Array2<f64>, c: usize, h: usize, w: usize) -> Array3<f64> {
    a.clone().into_shape_with_order((c, h, w)).unwrap()
}

#[test]
fn guided_backprop_matches_masked_transpose_oracle() {
    for seed in 0..10u64 {
        let model = random_model(ArchSpec::Plain { widths: vec![3, 4, 5] }, 12, seed);
        let image = random_image(3, 12, 12, seed + 50);
        let fwd = model.forward_taps(&image, &["block1", "block2", "block3"], false).unwrap();
        let (channel, _) = strongest_channel(&model, &image, "block3");
        let target = AttributionTarget::Neuron { layer_id: "block3".into(), channel };
        let maps = guided_backprop_relevance(&model, &image, &target, &["block1", "block2"]).unwrap();

        let t3 = model.tap("block3").unwrap();
        let a3 = to_map(&fwd.activations["block3"].values, t3.channel_count, t3.height, t3.width);
        let mut seed_grad = Array3::zeros(a3.raw_dim());
        let d = (t3.height * t3.width) as f64;
        // rectifier at block3: forward mask, and the seed is positive
        for y in 0..t3.height {
            for x in 0..t3.width {
                if a3[[channel, y, x]] > 0.0 {
                    seed_grad[[channel, y, x]] = 1.0 / d;
                }
            }
        }
        let t2 = model.tap("block2").unwrap();
        let g2 = conv_transpose(plain_conv(&model, 2), &seed_grad, t2.height, t2.width);
        let got2 = to_map(&maps["block2"].values, t2.channel_count, t2.height, t2.width);
        assert!((&got2 - &g2).iter().all(|v| v.abs() < 1e-12), "seed {seed} block2");

        let a2 = to_map(&fwd.activations["block2"].values, t2.channel_count, t2.height, t2.width);
        let masked = ndarray::Zip::from(&g2).and(&a2).map_collect(|&g, &a| if a > 0.0 && g > 0.0 { g } else { 0.0 });
        let t1 = model.tap("block1").unwrap();
        let g1 = conv_transpose(plain_conv(&model, 1), &masked, t1.height, t1.width);
        let got1 = to_map(&maps["block1"].values, t1.channel_count, t1.height, t1.width);
        assert!((&got1 - &g1).iter().all(|v| v.abs() < 1e-12), "seed {seed} block1");
    }
}

#[test]
fn plan_relevance_at_the_target_layer_is_the_starting_map() {
    let model = random_model(ArchSpec::desk_resnet(), 16, 3);
    let image = random_image(3, 16, 16, 3);
    let target = AttributionTarget::Neuron { layer_id: "block3".into(), channel: 2 };
    let fwd = model.forward_taps(&image, &["block2", "block3"], false).unwrap();
    let maps = plan_relevance(&model, &fwd, &target, &["block2", "block3"], RelevanceMode::Lrp).unwrap().unwrap();
    let tap = model.tap("block3").unwrap();
    let gap = fwd.activations["block3"].values.row(2).mean().unwrap();
    let own = &maps["block3"].values;
    for c in 0..tap.channel_count {
        for p in 0..tap.spatial_size() {
            let expect = if c == 2 { gap / tap.spatial_size() as f64 } else { 0.0 };
            assert!((own[[c, p]] - expect).abs() < 1e-15);
        }
    }
    let direct = lrp_from_forward(&model, &fwd, &target, &["block2"], LrpOptions::default()).unwrap();
    assert_eq!(maps["block2"], direct["block2"]);
    assert!(plan_relevance(&model, &fwd, &target, &["block3"], RelevanceMode::None).unwrap().is_none());
    assert!(plan_relevance(&model, &fwd, &target, &["block4"], RelevanceMode::Lrp).is_err());
}

#[test]
fn basis_concept_reduces_to_a_neuron() {
    let concept = AttributionTarget::Concept { layer_id: "block4".into(), direction: vec![0.0, 2.0, 0.0] };
    assert_eq!(concept.equivalent_neuron(), Some(AttributionTarget::Neuron { layer_id: "block4".into(), channel: 1 }));
    let mixed = AttributionTarget::Concept { layer_id: "block4".into(), direction: vec![1.0, 1.0, 0.0] };
    assert_eq!(mixed.equivalent_neuron(), None);
    let negative = AttributionTarget::Concept { layer_id: "block4".into(), direction: vec![0.0, -1.0, 0.0] };
    assert_eq!(negative.equivalent_neuron(), None);
}
