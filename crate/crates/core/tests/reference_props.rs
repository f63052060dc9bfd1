mod common;

use std::collections::BTreeSet;

use fvis::attribution::{AttributionTarget, RelevanceMode};
use fvis::imageops::CropWindow;
use fvis::model::ArchSpec;
use fvis::reference::*;
use fvis::sortmatch::MatchPlan;
use proptest::prelude::*;

fn window(i: usize) -> CropWindow {
    CropWindow { y0: i, x0: 0, height: 4, width: 4 }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    /// Ranking follows channel means computed by hand, one patch per image.
    #[test]
    fn ranking_follows_hand_means(
        maps in proptest::collection::vec((0usize..6, proptest::collection::vec(0.0f64..4.0, 4)), 1..20),
    ) {
        let scored: Vec<PatchScore> = maps
            .iter()
            .enumerate()
            .map(|(i, (img, m))| PatchScore { id: format!("img{img}"), crop: window(i), score: m.iter().sum::<f64>() / 4.0 })
            .collect();
        let distinct: BTreeSet<&str> = scored.iter().map(|p| p.id.as_str()).collect();
        let top = top_distinct_patches(&scored, distinct.len()).unwrap();
        prop_assert_eq!(top.len(), distinct.len());
        for pair in top.windows(2) {
            prop_assert!(pair[0].score >= pair[1].score);
        }
        for p in &top {
            let best = scored.iter().filter(|q| q.id == p.id).map(|q| q.score).fold(f64::MIN, f64::max);
            prop_assert_eq!(p.score, best);
        }
        prop_assert!(top_distinct_patches(&scored, distinct.len() + 1).is_err());
    }
}

#[test]
fn hand_maps_rank_by_gap() {
    let a = PatchScore { id: "a".into(), crop: window(0), score: [1.0, 3.0, 1.0, 3.0].iter().sum::<f64>() / 4.0 };
    let b = PatchScore { id: "b".into(), crop: window(1), score: [0.0, 0.0, 0.0, 4.0].iter().sum::<f64>() / 4.0 };
    let top = top_distinct_patches(&[b, a], 2).unwrap();
    assert_eq!(top[0].id, "a");
    assert_eq!(top[1].id, "b");
}

#[test]
fn class_references_are_seeded_distinct_members() {
    let (train, _) = common::small_data();
    let a = select_class_references(&train, 3, 12, 7).unwrap();
    let b = select_class_references(&train, 3, 12, 7).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.sources, select_class_references(&train, 3, 12, 8).unwrap().sources);
    let ids: BTreeSet<&str> = a.ids().into_iter().collect();
    assert_eq!(ids.len(), 12);
    assert!(a.ids().iter().all(|id| train.label_of(id) == Some(3)));
    assert!(select_class_references(&train, 3, 61, 0).is_err());
}

#[test]
fn full_corruption_replaces_every_member() {
    let (train, _) = common::small_data();
    let refs = select_class_references(&train, 5, 10, 1).unwrap();
    let bad = corrupt_references(&refs, 10, &foreign_pool(&train, 5), 2).unwrap();
    assert_eq!(bad.corruption, 10);
    assert_eq!(bad.len(), 10);
    assert!(bad.ids().iter().all(|id| train.label_of(id) != Some(5)));
    let ids: BTreeSet<&str> = bad.ids().into_iter().collect();
    assert_eq!(ids.len(), 10);
    let partial = corrupt_references(&refs, 4, &foreign_pool(&train, 5), 2).unwrap();
    assert_eq!(partial.ids().iter().filter(|id| train.label_of(id) != Some(5)).count(), 4);
    assert!(corrupt_references(&refs, 11, &foreign_pool(&train, 5), 2).is_err());
}

#[test]
fn neuron_patches_come_from_distinct_images_in_score_order() {
    let (train, _) = common::small_data();
    let model = common::random_model(ArchSpec::Plain { widths: vec![4, 6, 8] }, 16, 0);
    let options = PatchOptions { patch_size: 12, pool: Some(40) };
    let table = score_patches(&train, &model, "block2", options, 3).unwrap();
    let images: BTreeSet<&str> = table.patches.iter().map(|(id, _)| id.as_str()).collect();
    assert_eq!(images.len(), 40);
    let refs = neuron_patches_from_table(&table, 2, 8, 0).unwrap();
    let ids: BTreeSet<&str> = refs.ids().into_iter().collect();
    assert_eq!(ids.len(), 8);
    let score_of = |s: &ImageSource| {
        let i = table.patches.iter().position(|(id, w)| *id == s.id && Some(*w) == s.crop).unwrap();
        table.scores[[i, 2]]
    };
    let scores: Vec<f64> = refs.sources.iter().map(score_of).collect();
    assert!(scores.windows(2).all(|p| p[0] >= p[1]));
    // nothing left out beats the weakest member from an unused image
    let weakest = *scores.last().unwrap();
    for (i, (id, _)) in table.patches.iter().enumerate() {
        if !ids.contains(id.as_str()) {
            assert!(table.scores[[i, 2]] <= weakest);
        }
    }
}

#[test]
fn warm_cache_returns_identical_bytes() {
    let (train, _) = common::small_data();
    let model = common::random_model(ArchSpec::Plain { widths: vec![4, 6, 8] }, 16, 1);
    let plan = MatchPlan::uniform(&model.tap_names()).unwrap();
    let refs = select_class_references(&train, 2, 5, 0).unwrap();
    let target = AttributionTarget::Class { class: 2 };
    let dir = tempfile::tempdir().unwrap();
    let cache = ReferenceCache::new(dir.path());

    let cold = build_reference_distribution(&refs, &train, &model, &plan, RelevanceMode::Lrp, Some(&target), Some(&cache)).unwrap();
    assert_eq!((cache.hits(), cache.misses()), (0, 1));
    let entry = cache.entry(&cold.provenance.fingerprint);
    let snapshot = |dir: &std::path::Path| {
        let mut files: Vec<_> = std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
        files.sort();
        files.into_iter().map(|p| (p.clone(), std::fs::read(&p).unwrap())).collect::<Vec<_>>()
    };
    let before = snapshot(&entry);
    let warm = build_reference_distribution(&refs, &train, &model, &plan, RelevanceMode::Lrp, Some(&target), Some(&cache)).unwrap();
    assert_eq!((cache.hits(), cache.misses()), (1, 1));
    assert_eq!(warm, cold);
    assert_eq!(snapshot(&entry), before);
    let uncached = build_reference_distribution(&refs, &train, &model, &plan, RelevanceMode::Lrp, Some(&target), None).unwrap();
    assert_eq!(uncached, cold);
}

#[test]
fn fingerprint_separates_mode_checkpoint_and_sources() {
    let (train, _) = common::small_data();
    let mut model = common::random_model(ArchSpec::Plain { widths: vec![4, 6, 8] }, 16, 2);
    let plan = MatchPlan::uniform(&model.tap_names()).unwrap();
    let refs = select_class_references(&train, 1, 5, 0).unwrap();
    let target = AttributionTarget::Class { class: 1 };
    let none = fingerprint(&model, &refs, &plan, RelevanceMode::None, Some(&target)).unwrap();
    let lrp = fingerprint(&model, &refs, &plan, RelevanceMode::Lrp, Some(&target)).unwrap();
    let guided = fingerprint(&model, &refs, &plan, RelevanceMode::Guided, Some(&target)).unwrap();
    assert_eq!(BTreeSet::from([&none, &lrp, &guided]).len(), 3);
    let other = select_class_references(&train, 1, 5, 1).unwrap();
    assert_ne!(fingerprint(&model, &other, &plan, RelevanceMode::Lrp, Some(&target)).unwrap(), lrp);
    // member order does not matter
    let mut shuffled = refs.clone();
    shuffled.sources.reverse();
    assert_eq!(fingerprint(&model, &shuffled, &plan, RelevanceMode::Lrp, Some(&target)).unwrap(), lrp);
    model.checkpoint_hash = "different".into();
    assert_ne!(fingerprint(&model, &refs, &plan, RelevanceMode::Lrp, Some(&target)).unwrap(), lrp);
}

#[test]
fn relevance_without_target_is_a_config_error() {
    let (train, _) = common::small_data();
    let model = common::random_model(ArchSpec::desk_plain(), 16, 0);
    let plan = MatchPlan::uniform(&model.tap_names()).unwrap();
    let refs = select_class_references(&train, 0, 3, 0).unwrap();
    let err = build_reference_distribution(&refs, &train, &model, &plan, RelevanceMode::Lrp, None, None);
    assert!(matches!(err, Err(fvis::Error::Config(_))));
}
