mod common;

use fvis::evaluation::*;
use ndarray::{array, Array1, Array2};
use proptest::prelude::*;

fn embeddings() -> impl Strategy<Value = (Array2<f64>, Array2<f64>)> {
    (1usize..5, 3usize..9, 3usize..9).prop_flat_map(|(d, n, m)| {
        (
            proptest::collection::vec(-3.0f64..3.0, n * d).prop_map(move |v| Array2::from_shape_vec((n, d), v).unwrap()),
            proptest::collection::vec(-3.0f64..3.0, m * d).prop_map(move |v| Array2::from_shape_vec((m, d), v).unwrap()),
        )
    })
}

/// Pairwise count, ties counted half.
fn auc_oracle(s: &[f64], c: &[f64]) -> f64 {
    let mut wins = 0.0;
    for a in s {
        for b in c {
            wins += if a > b { 1.0 } else if a == b { 0.5 } else { 0.0 };
        }
    }
    wins / (s.len() * c.len()) as f64
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn fid_axioms((a, b) in embeddings()) {
        let scale = 1.0 + a.iter().map(|v| v * v).sum::<f64>();
        prop_assert!(fid_score(&a, &a).unwrap() <= 1e-6 * scale);
        let ab = fid_score(&a, &b).unwrap();
        let ba = fid_score(&b, &a).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() <= 1e-8 * (1.0 + ab));
    }

    #[test]
    fn fid_ignores_a_common_shift((a, b) in embeddings(), t in -5.0f64..5.0) {
        let base = fid_score(&a, &b).unwrap();
        let shifted = fid_score(&(&a + t), &(&b + t)).unwrap();
        prop_assert!((base - shifted).abs() <= 1e-8 * (1.0 + base));
    }

    #[test]
    fn auc_matches_pairwise_count(
        s in proptest::collection::vec(0i32..6, 1..12),
        c in proptest::collection::vec(0i32..6, 1..12),
    ) {
        let s: Vec<f64> = s.into_iter().map(f64::from).collect();
        let c: Vec<f64> = c.into_iter().map(f64::from).collect();
        let got = auc(&s, &c).unwrap();
        prop_assert!((got - auc_oracle(&s, &c)).abs() <= 1e-12);
        prop_assert!((got + auc(&c, &s).unwrap() - 1.0).abs() <= 1e-12);
        let fwd = auc_mad_scores(&s, &c).unwrap();
        let rev = auc_mad_scores(&c, &s).unwrap();
        prop_assert!((fwd.mad + rev.mad).abs() <= 1e-12);
    }
}

/// Sets whose sample covariance is exactly diagonal: `±a·e1`, `±b·e2` around `mu`.
fn cross(mu: [f64; 2], a: f64, b: f64) -> Array2<f64> {
    array![[a, 0.0], [-a, 0.0], [0.0, b], [0.0, -b]] + &Array1::from(mu.to_vec())
}

#[test]
fn fid_diagonal_closed_form() {
    let (x, y) = (cross([0.0, 0.0], 1.0, 2.0), cross([1.0, -2.0], 3.0, 0.5));
    // sample variance with n-1 = 3: 2a^2/3
    let var = |s: f64| 2.0 * s * s / 3.0 + FID_EPS;
    let expect = 1.0 + 4.0 + (var(1.0).sqrt() - var(3.0).sqrt()).powi(2) + (var(2.0).sqrt() - var(0.5).sqrt()).powi(2);
    assert!((fid_score(&x, &y).unwrap() - expect).abs() < 1e-9);
}

#[test]
fn rotated_labels_drop_to_chance() {
    let (model, _, test) = common::small_trained(0);
    let images: Vec<_> = (0..test.len()).map(|i| test.image(i)).collect();
    let labels: Vec<usize> = test.samples.iter().map(|s| s.label).collect();
    let right = classify_visualizations(&model, &images, &labels).unwrap();
    let rotated: Vec<usize> = labels.iter().map(|l| (l + 1) % 10).collect();
    let wrong = classify_visualizations(&model, &images, &rotated).unwrap();
    assert!(right.top1() >= 0.5, "trained accuracy {}", right.top1());
    assert!(wrong.top1() <= 1.0 - right.top1() + 1e-12);
    assert!(wrong.top1() <= 0.25, "rotated accuracy {}", wrong.top1());
    assert_eq!(right.records.len(), images.len());
}

#[test]
fn judge_must_differ_from_target() {
    let model = common::random_model(fvis::model::ArchSpec::desk_plain(), 16, 0);
    let image = common::random_image(3, 16, 16, 0);
    assert!(cross_model_zeroshot(&model, &model.checkpoint_hash, &[image.clone()], &[0]).is_err());
    assert!(cross_model_zeroshot(&model, "other", &[image], &[0]).is_ok());
}
