//! Reference-set selection and cached reference distributions.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::archive::sha256_hex;
use crate::attribution::{plan_relevance, relevance_weighted_activation, AttributionTarget, RelevanceMode};
use crate::error::{ensure, Error, Result};
use crate::imageops::{crop_resize, sliding_windows, CropWindow};
use crate::model::data::Dataset;
use crate::model::{ActivationTensor, ModelHandle};
use crate::sortmatch::{sorted_reference, MatchPlan, Provenance, ReferenceDistribution, PROFILES_FILE};

/// One reference image, optionally a crop resized to the model input.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ImageSource {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub crop: Option<CropWindow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceSet {
    pub target: AttributionTarget,
    pub sources: Vec<ImageSource>,
    pub seed: u64,
    /// Number of members replaced by foreign-class images.
    #[serde(default)]
    pub corruption: usize,
}

impl ReferenceSet {
    pub fn len(&self) -> usize {
        self.sources.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sources.is_empty()
    }

    pub fn ids(&self) -> Vec<&str> {
        self.sources.iter().map(|s| s.id.as_str()).collect()
    }

    fn check_unique(&self) -> Result<()> {
        ensure!(!self.sources.is_empty(), Validation, "reference set is empty");
        let unique: BTreeSet<&str> = self.ids().into_iter().collect();
        ensure!(unique.len() == self.sources.len(), Validation, "reference set repeats a source image");
        Ok(())
    }

    /// Loads every member as a model-sized image.
    pub fn images(&self, dataset: &Dataset, model: &ModelHandle) -> Result<Vec<Array3<f64>>> {
        let g = model.geometry;
        let mut out = Vec::with_capacity(self.sources.len());
        for source in &self.sources {
            let image = dataset.image_by_id(&source.id)?;
            let (_, h, w) = image.dim();
            let image = match source.crop {
                Some(win) => {
                    ensure!(win.fits(h, w), Validation, "crop {win:?} lies outside image {}", source.id);
                    crop_resize(&image, win, g.height, g.width)
                }
                None => image,
            };
            ensure!(image.dim() == g.dim(), Validation, "reference {} has shape {:?}, model expects {:?}", source.id, image.dim(), g.dim());
            out.push(image);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchScore {
    pub id: String,
    pub crop: CropWindow,
    pub score: f64,
}

/// `n` distinct images of `class`, a seeded random choice.
pub fn select_class_references(dataset: &Dataset, class: usize, n: usize, seed: u64) -> Result<ReferenceSet> {
    ensure!(n >= 1, Validation, "reference count must be at least 1");
    ensure!(class < dataset.class_count(), Validation, "class {class} out of range for {}", dataset.name);
    let mut pool = dataset.class_indices(class);
    ensure!(
        pool.len() >= n,
        Validation,
        "class {class} ({}) has {} images, {n} requested",
        dataset.class_names[class],
        pool.len()
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pool.shuffle(&mut rng);
    pool.truncate(n);
    pool.sort_unstable();
    Ok(ReferenceSet {
        target: AttributionTarget::Class { class },
        sources: pool.into_iter().map(|i| ImageSource { id: dataset.samples[i].id.clone(), crop: None }).collect(),
        seed,
        corruption: 0,
    })
}

/// Patch geometry for neuron references: half-overlapping sliding windows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchOptions {
    pub patch_size: usize,
    /// Source images scanned: a seeded subset of this size, or the whole dataset.
    pub pool: Option<usize>,
}

impl PatchOptions {
    /// 64 px patches at full resolution, three quarters of the side for small inputs.
    pub fn for_side(side: usize) -> Self {
        Self { patch_size: 64.min(side * 3 / 4).max(1), pool: None }
    }
}

/// Per-channel GAP for every patch of a seeded pool of images at `layer_id`.
#[derive(Debug, Clone)]
pub struct PatchTable {
    pub layer_id: String,
    pub patches: Vec<(String, CropWindow)>,
    /// `patches × channels`.
    pub scores: Array2<f64>,
}

pub fn score_patches(
    dataset: &Dataset,
    model: &ModelHandle,
    layer_id: &str,
    options: PatchOptions,
    seed: u64,
) -> Result<PatchTable> {
    let tap = model.tap(layer_id)?.clone();
    let g = model.geometry;
    ensure!(options.patch_size >= 1, Validation, "patch size must be positive");
    ensure!(
        options.patch_size <= g.height.min(g.width),
        Validation,
        "patch size {} exceeds the model input {}x{}",
        options.patch_size,
        g.height,
        g.width
    );
    let mut pool: Vec<usize> = (0..dataset.len()).collect();
    if let Some(n) = options.pool.filter(|&n| n < pool.len()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        pool.shuffle(&mut rng);
        pool.truncate(n);
        pool.sort_unstable();
    }
    let mut patches = Vec::new();
    let mut rows = Vec::new();
    for i in pool {
        let image = dataset.image(i);
        let (_, h, w) = image.dim();
        for win in sliding_windows(h, w, options.patch_size, (options.patch_size / 2).max(1)) {
            let patch = crop_resize(&image, win, g.height, g.width);
            let fwd = model.forward_taps(&patch, &[layer_id], false)?;
            let pooled = fwd.activations[layer_id].values.mean_axis(ndarray::Axis(1)).expect("nonempty positions");
            patches.push((dataset.samples[i].id.clone(), win));
            rows.extend(pooled.iter().copied());
        }
    }
    let scores = Array2::from_shape_vec((patches.len(), tap.channel_count), rows).expect("row per patch");
    Ok(PatchTable { layer_id: layer_id.to_string(), patches, scores })
}

/// Ranks scored patches descending and keeps the best patch per source image.
pub fn top_distinct_patches(scored: &[PatchScore], k: usize) -> Result<Vec<PatchScore>> {
    ensure!(k >= 1, Validation, "k must be at least 1");
    ensure!(scored.iter().all(|p| p.score.is_finite()), Validation, "patch scores must be finite");
    let mut order: Vec<&PatchScore> = scored.iter().collect();
    order.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.id.cmp(&b.id)).then_with(|| a.crop.cmp(&b.crop)));
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(k);
    for p in order {
        if seen.insert(p.id.as_str()) {
            out.push(p.clone());
            if out.len() == k {
                return Ok(out);
            }
        }
    }
    Err(Error::Validation(format!("only {} distinct source images available, {k} patches requested", out.len())))
}

/// Top-`k` patches for one channel from a precomputed table.
pub fn neuron_patches_from_table(table: &PatchTable, channel: usize, k: usize, seed: u64) -> Result<ReferenceSet> {
    ensure!(channel < table.scores.ncols(), Validation, "channel {channel} out of range for {}", table.layer_id);
    let scored: Vec<PatchScore> = table
        .patches
        .iter()
        .zip(table.scores.column(channel))
        .map(|((id, crop), &score)| PatchScore { id: id.clone(), crop: *crop, score })
        .collect();
    let top = top_distinct_patches(&scored, k)?;
    Ok(ReferenceSet {
        target: AttributionTarget::Neuron { layer_id: table.layer_id.clone(), channel },
        sources: top.into_iter().map(|p| ImageSource { id: p.id, crop: Some(p.crop) }).collect(),
        seed,
        corruption: 0,
    })
}

pub fn select_neuron_patches(
    dataset: &Dataset,
    model: &ModelHandle,
    layer_id: &str,
    channel: usize,
    k: usize,
    options: PatchOptions,
    seed: u64,
) -> Result<ReferenceSet> {
    let tap = model.tap(layer_id)?;
    ensure!(channel < tap.channel_count, Validation, "channel {channel} out of range for {layer_id}");
    let table = score_patches(dataset, model, layer_id, options, seed)?;
    neuron_patches_from_table(&table, channel, k, seed)
}

/// Replaces `m` seeded members with `m` seeded images from `foreign`.
pub fn corrupt_references(refset: &ReferenceSet, m: usize, foreign: &[ImageSource], seed: u64) -> Result<ReferenceSet> {
    ensure!(m <= refset.len(), Validation, "cannot corrupt {m} of {} references", refset.len());
    if m == 0 {
        return Ok(refset.clone());
    }
    let members: BTreeSet<&str> = refset.ids().into_iter().collect();
    let mut pool: Vec<&ImageSource> = foreign.iter().filter(|s| !members.contains(s.id.as_str())).collect();
    pool.sort();
    pool.dedup_by(|a, b| a.id == b.id);
    ensure!(pool.len() >= m, Validation, "foreign pool has {} usable images, {m} needed", pool.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pool.shuffle(&mut rng);
    let mut slots: Vec<usize> = (0..refset.len()).collect();
    slots.shuffle(&mut rng);
    let mut out = refset.clone();
    for (&slot, replacement) in slots.iter().zip(pool.into_iter().take(m)) {
        out.sources[slot] = replacement.clone();
    }
    out.corruption = refset.corruption + m;
    Ok(out)
}

/// Every image of `dataset` not labeled `class`, as corruption candidates.
pub fn foreign_pool(dataset: &Dataset, class: usize) -> Vec<ImageSource> {
    dataset
        .samples
        .iter()
        .filter(|s| s.label != class)
        .map(|s| ImageSource { id: s.id.clone(), crop: None })
        .collect()
}

/// Content address of a reference distribution.
pub fn fingerprint(
    model: &ModelHandle,
    refset: &ReferenceSet,
    plan: &MatchPlan,
    mode: RelevanceMode,
    target: Option<&AttributionTarget>,
) -> Result<String> {
    let mut sources = refset.sources.clone();
    sources.sort();
    let doc = serde_json::json!({
        "checkpoint": model.checkpoint_hash,
        "sources": sources,
        "plan": plan,
        "relevance_mode": mode,
        "target": target,
    });
    Ok(sha256_hex(serde_json::to_string(&doc)?.as_bytes()))
}

/// Directory of cached reference distributions, `<root>/<fingerprint>/`.
#[derive(Debug)]
pub struct ReferenceCache {
    root: PathBuf,
    hits: AtomicUsize,
    misses: AtomicUsize,
}

impl ReferenceCache {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into(), hits: AtomicUsize::new(0), misses: AtomicUsize::new(0) }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn entry(&self, fingerprint: &str) -> PathBuf {
        self.root.join(fingerprint)
    }

    pub fn hits(&self) -> usize {
        self.hits.load(Ordering::Relaxed)
    }

    pub fn misses(&self) -> usize {
        self.misses.load(Ordering::Relaxed)
    }
}

/// Activations (or activation times relevance) of every reference at the plan layers.
pub fn reference_activations(
    images: &[Array3<f64>],
    model: &ModelHandle,
    plan: &MatchPlan,
    mode: RelevanceMode,
    target: Option<&AttributionTarget>,
) -> Result<BTreeMap<String, Vec<ActivationTensor>>> {
    let layers = plan.layer_ids();
    let target = match (mode, target) {
        (RelevanceMode::None, t) => t,
        (_, Some(t)) => Some(t),
        (_, None) => {
            return Err(Error::Config(format!("relevance mode {} needs an attribution target", mode.as_str())));
        }
    };
    if mode != RelevanceMode::None {
        let t = target.expect("checked above");
        t.validate(model)?;
        let matchable = t.matchable_taps(model)?;
        for layer in &layers {
            ensure!(matchable.iter().any(|r| r == layer), Config, "plan layer {layer} is deeper than the target");
        }
    }
    let mut out: BTreeMap<String, Vec<ActivationTensor>> = layers.iter().map(|l| (l.to_string(), Vec::new())).collect();
    for image in images {
        let fwd = match (mode, target) {
            (RelevanceMode::None, _) => model.forward_taps(image, &layers, false)?,
            (_, Some(AttributionTarget::Class { .. })) => model.forward_taps(image, &layers, true)?,
            (_, Some(AttributionTarget::Neuron { layer_id, .. } | AttributionTarget::Concept { layer_id, .. })) => {
                let mut taps = layers.clone();
                if !taps.contains(&layer_id.as_str()) {
                    taps.push(layer_id.as_str());
                }
                model.forward_taps(image, &taps, false)?
            }
            (_, None) => unreachable!("checked above"),
        };
        let relevance = match target {
            Some(t) => plan_relevance(model, &fwd, t, &layers, mode)?,
            None => None,
        };
        for layer in &layers {
            let a = &fwd.activations[*layer];
            let v = match &relevance {
                Some(maps) => relevance_weighted_activation(a, &maps[*layer])?,
                None => a.clone(),
            };
            out.get_mut(*layer).expect("plan layer").push(v);
        }
    }
    Ok(out)
}

/// Builds (or loads from `cache`) the sorted profiles of `refset` at the plan layers.
pub fn build_reference_distribution(
    refset: &ReferenceSet,
    dataset: &Dataset,
    model: &ModelHandle,
    plan: &MatchPlan,
    mode: RelevanceMode,
    target: Option<&AttributionTarget>,
    cache: Option<&ReferenceCache>,
) -> Result<ReferenceDistribution> {
    refset.check_unique()?;
    if mode != RelevanceMode::None && target.is_none() {
        return Err(Error::Config(format!("relevance mode {} needs an attribution target", mode.as_str())));
    }
    for (layer, _) in &plan.layers {
        model.tap(layer)?;
    }
    let fp = fingerprint(model, refset, plan, mode, target)?;
    let provenance = Provenance { fingerprint: fp.clone(), relevance_mode: mode, reference_count: refset.len(), corruption: refset.corruption };
    if let Some(cache) = cache {
        let dir = cache.entry(&fp);
        if dir.join(PROFILES_FILE).is_file() {
            let cached = ReferenceDistribution::load(&dir, model)?;
            ensure!(
                cached.provenance == provenance,
                CacheIntegrity,
                "cache entry {fp} holds metadata {:?}, expected {:?}",
                cached.provenance,
                provenance
            );
            let expected: BTreeSet<&str> = plan.layer_ids().into_iter().collect();
            let found: BTreeSet<&str> = cached.profiles.keys().map(String::as_str).collect();
            ensure!(expected == found, CacheIntegrity, "cache entry {fp} holds layers {found:?}, expected {expected:?}");
            cache.hits.fetch_add(1, Ordering::Relaxed);
            log::debug!("reference cache hit {fp}");
            return Ok(cached);
        }
    }
    let images = refset.images(dataset, model)?;
    let acts = reference_activations(&images, model, plan, mode, target)?;
    let mut profiles = BTreeMap::new();
    for (layer, list) in acts {
        profiles.insert(layer, sorted_reference(&list)?);
    }
    let dist = ReferenceDistribution { profiles, provenance };
    if let Some(cache) = cache {
        cache.misses.fetch_add(1, Ordering::Relaxed);
        let dir = cache.entry(&fp);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        dist.save(&dir)?;
    }
    Ok(dist)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::data::{shapes10, Split};

    #[test]
    fn class_selection_is_seeded_and_labeled() {
        let data = shapes10(8, 0, 16, Split::Train).unwrap();
        let a = select_class_references(&data, 3, 5, 7).unwrap();
        assert_eq!(a, select_class_references(&data, 3, 5, 7).unwrap());
        assert_eq!(a.len(), 5);
        assert!(a.ids().iter().all(|id| data.label_of(id) == Some(3)));
        let all = select_class_references(&data, 3, 8, 1).unwrap();
        let all2 = select_class_references(&data, 3, 8, 99).unwrap();
        assert_eq!(all.sources, all2.sources);
        let err = select_class_references(&data, 3, 9, 0).unwrap_err().to_string();
        assert!(err.contains("class 3") && err.contains("8 images"), "{err}");
    }

    fn score(id: &str, y0: usize, score: f64) -> PatchScore {
        PatchScore { id: id.into(), crop: CropWindow { y0, x0: 0, height: 2, width: 2 }, score }
    }

    #[test]
    fn top_patches_rank_by_gap_and_dedupe_images() {
        let a = Array2::from_shape_vec((2, 2), vec![1.0, 3.0, 1.0, 3.0]).unwrap().mean().unwrap();
        let b = Array2::from_shape_vec((2, 2), vec![0.0, 0.0, 0.0, 4.0]).unwrap().mean().unwrap();
        let top = top_distinct_patches(&[score("b", 0, b), score("a", 0, a)], 2).unwrap();
        assert_eq!(top[0].id, "a");

        let scored = [score("x", 0, 5.0), score("x", 2, 4.0), score("y", 0, 3.0)];
        let top = top_distinct_patches(&scored, 2).unwrap();
        assert_eq!(top.iter().map(|p| (p.id.as_str(), p.crop.y0)).collect::<Vec<_>>(), vec![("x", 0), ("y", 0)]);
        assert_eq!(top_distinct_patches(&scored, 1).unwrap()[0].score, 5.0);
        assert!(top_distinct_patches(&scored, 3).is_err());
    }

    #[test]
    fn corruption_replaces_members() {
        let data = shapes10(12, 0, 16, Split::Train).unwrap();
        let refs = select_class_references(&data, 2, 10, 0).unwrap();
        let foreign = foreign_pool(&data, 2);
        assert_eq!(corrupt_references(&refs, 0, &foreign, 1).unwrap(), refs);
        let c = corrupt_references(&refs, 4, &foreign, 1).unwrap();
        assert_eq!(c.len(), 10);
        assert_eq!(c.corruption, 4);
        let kept = c.ids().iter().filter(|id| refs.ids().contains(id)).count();
        assert_eq!(kept, 6);
        assert_eq!(c.ids().iter().filter(|id| data.label_of(id) != Some(2)).count(), 4);
        let full = corrupt_references(&refs, 10, &foreign, 1).unwrap();
        assert!(full.ids().iter().all(|id| data.label_of(id) != Some(2)));
        assert_eq!(full.corruption, 10);
        assert!(corrupt_references(&refs, 11, &foreign, 1).is_err());
    }
}
