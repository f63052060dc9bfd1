//! Run orchestration and on-disk artifacts.
//!
//! Outputs live at `<out>/<method>/<target>/<seed>.png` with a JSON
//! `<seed>.manifest` and a `<seed>.losses.csv` beside it. Failed runs go to
//! `<out>/failed/<method>/<target>/<seed>.manifest`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

use image::{ImageBuffer, ImageEncoder, Rgba};
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::archive::{atomic_write, sha256_hex};
use crate::attribution::{AttributionTarget, RelevanceMode};
use crate::baselines::{activation_max_synthesize, BaselineConfig};
use crate::error::{ensure, Error, Result};
use crate::evaluation::{
    auc_mad, classify_visualizations, comparison_csv, cross_model_zeroshot, export_embeddings, fid_score, ClassRow,
    EvalReport, NeuronRow,
};
use crate::model::data::Dataset;
use crate::model::ModelHandle;
use crate::reference::{
    build_reference_distribution, corrupt_references, foreign_pool, neuron_patches_from_table, score_patches,
    select_class_references, PatchOptions, PatchTable, ReferenceCache, ReferenceSet,
};
use crate::sortmatch::MatchPlan;
use crate::synthesis::{synthesize, MethodConfig, SynthesisConfig, SynthesisResult, TraceEntry};

pub const VITAL: &str = "vital";
pub const FOURIER_AM: &str = "fourier-am";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceInfo {
    pub fingerprint: String,
    pub reference_count: usize,
    pub corruption: usize,
    pub relevance_mode: RelevanceMode,
    pub sources_sha256: String,
}

impl ReferenceInfo {
    fn new(refset: &ReferenceSet, fingerprint: &str, mode: RelevanceMode) -> Result<Self> {
        Ok(Self {
            fingerprint: fingerprint.to_string(),
            reference_count: refset.len(),
            corruption: refset.corruption,
            relevance_mode: mode,
            sources_sha256: sha256_hex(serde_json::to_string(&refset.sources)?.as_bytes()),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub method: String,
    pub target: AttributionTarget,
    pub seed: u64,
    pub config: MethodConfig,
    pub checkpoint: String,
    pub dataset: String,
    pub references: Option<ReferenceInfo>,
    /// Neuron target a basis-vector concept is equivalent to.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub equivalent: Option<AttributionTarget>,
    pub final_losses: TraceEntry,
    pub image_sha256: String,
}

#[derive(Debug, Clone)]
pub struct Artifact {
    pub png: PathBuf,
    pub manifest_path: PathBuf,
    pub manifest: Manifest,
}

pub fn artifact_dir(out: &Path, method: &str, target: &AttributionTarget) -> PathBuf {
    out.join(method).join(target.label())
}

pub fn manifest_path(out: &Path, method: &str, target: &AttributionTarget, seed: u64) -> PathBuf {
    artifact_dir(out, method, target).join(format!("{seed}.manifest"))
}

/// PNG bytes with RGB from the image and alpha from the transparency map.
pub fn encode_rgba(image: &Array3<f64>, alpha: &Array2<f64>) -> Result<Vec<u8>> {
    let (c, h, w) = image.dim();
    ensure!(c == 1 || c == 3, Validation, "cannot write a {c}-channel image as RGBA");
    ensure!(alpha.dim() == (h, w), Validation, "alpha shape {:?} does not match image {h}x{w}", alpha.dim());
    let q = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let buf = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        let px = |ch: usize| q(image[[if c == 1 { 0 } else { ch }, y, x]]);
        Rgba([px(0), px(1), px(2), q(alpha[[y, x]])])
    });
    let mut bytes = Vec::new();
    image::codecs::png::PngEncoder::new(Cursor::new(&mut bytes)).write_image(
        buf.as_raw(),
        w as u32,
        h as u32,
        image::ExtendedColorType::Rgba8,
    )?;
    Ok(bytes)
}

/// Color channels of a written visualization, in `[0,1]`.
pub fn decode_rgb(bytes: &[u8], channels: usize) -> Result<Array3<f64>> {
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)?.to_rgba8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok(Array3::from_shape_fn((channels, h, w), |(c, y, x)| f64::from(img.get_pixel(x as u32, y as u32)[c]) / 255.0))
}

pub fn loss_trace_csv(result: &SynthesisResult) -> String {
    let layers: Vec<String> = match &result.config {
        MethodConfig::Vital(c) => c.plan.layers.iter().map(|(l, _)| l.clone()).collect(),
        MethodConfig::FourierAm(_) => Vec::new(),
    };
    let mut out = String::from("step,total");
    for l in &layers {
        let _ = write!(out, ",sm_{l}");
    }
    out.push_str(",tv,l2\n");
    for e in &result.trace {
        let _ = write!(out, "{},{:.17e}", e.step, e.total);
        for v in &e.sm {
            let _ = write!(out, ",{v:.17e}");
        }
        let _ = writeln!(out, ",{:.17e},{:.17e}", e.tv, e.l2);
    }
    out
}

pub fn write_result(
    out: &Path,
    result: &SynthesisResult,
    model: &ModelHandle,
    dataset: &str,
    references: Option<ReferenceInfo>,
) -> Result<Artifact> {
    let seed = result.config.seed();
    let dir = artifact_dir(out, &result.method, &result.target);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let png_bytes = encode_rgba(&result.image, &result.transparency)?;
    let png = dir.join(format!("{seed}.png"));
    atomic_write(&png, &png_bytes)?;
    atomic_write(&dir.join(format!("{seed}.losses.csv")), loss_trace_csv(result).as_bytes())?;
    let manifest = Manifest {
        method: result.method.clone(),
        target: result.target.clone(),
        seed,
        config: result.config.clone(),
        checkpoint: model.checkpoint_hash.clone(),
        dataset: dataset.to_string(),
        references,
        equivalent: result.target.equivalent_neuron(),
        final_losses: result.final_entry().clone(),
        image_sha256: sha256_hex(&png_bytes),
    };
    let manifest_path = dir.join(format!("{seed}.manifest"));
    atomic_write(&manifest_path, serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    Ok(Artifact { png, manifest_path, manifest })
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Manifest plus the color channels of its PNG, checked against the recorded hash.
pub fn load_artifact(manifest_path: &Path, channels: usize) -> Result<(Manifest, Array3<f64>)> {
    let manifest = read_manifest(manifest_path)?;
    let png = manifest_path.with_extension("png");
    let bytes = fs::read(&png).map_err(|e| Error::io(&png, e))?;
    ensure!(sha256_hex(&bytes) == manifest.image_sha256, CacheIntegrity, "{} does not match its manifest", png.display());
    Ok((manifest, decode_rgb(&bytes, channels)?))
}

/// All manifests under `<out>/<method>/`, sorted by path.
pub fn discover(out: &Path, method: &str) -> Result<Vec<PathBuf>> {
    let root = out.join(method);
    let mut found = Vec::new();
    if !root.is_dir() {
        return Ok(found);
    }
    for target in fs::read_dir(&root).map_err(|e| Error::io(&root, e))? {
        let target = target.map_err(|e| Error::io(&root, e))?.path();
        if !target.is_dir() {
            continue;
        }
        for entry in fs::read_dir(&target).map_err(|e| Error::io(&target, e))? {
            let p = entry.map_err(|e| Error::io(&target, e))?.path();
            if p.extension().is_some_and(|e| e == "manifest") {
                found.push(p);
            }
        }
    }
    found.sort();
    Ok(found)
}

#[derive(Debug, Serialize)]
struct FailureRecord<'a> {
    method: &'a str,
    target: &'a AttributionTarget,
    seed: u64,
    error: String,
    trace: &'a [TraceEntry],
}

/// Records a failed run under `failed/` and removes any partial outputs.
pub fn quarantine(out: &Path, method: &str, target: &AttributionTarget, seed: u64, error: &Error) -> Result<PathBuf> {
    let trace: &[TraceEntry] = match error {
        Error::Divergence { trace, .. } => trace,
        _ => &[],
    };
    let dir = out.join("failed").join(method).join(target.label());
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let record = FailureRecord { method, target, seed, error: error.to_string(), trace };
    let path = dir.join(format!("{seed}.manifest"));
    atomic_write(&path, serde_json::to_string_pretty(&record)?.as_bytes())?;
    let live = artifact_dir(out, method, target);
    for ext in ["png", "manifest", "losses.csv"] {
        let _ = fs::remove_file(live.join(format!("{seed}.{ext}")));
    }
    Ok(path)
}

/// Reference-set parameters shared by the visualization commands.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceParams {
    /// References per class (`N`) or patches per neuron (`k`).
    pub count: usize,
    pub corruption: usize,
    pub seed: u64,
    pub patch: PatchOptions,
}

impl ReferenceParams {
    pub fn new(side: usize) -> Self {
        Self { count: 50, corruption: 0, seed: 0, patch: PatchOptions::for_side(side) }
    }
}

/// Read-only inputs of a batch of runs.
pub struct Session<'a> {
    pub model: &'a ModelHandle,
    pub dataset: &'a Dataset,
    pub cache: Option<&'a ReferenceCache>,
    pub out: PathBuf,
    /// Skip jobs whose manifest already exists with the same configuration.
    pub resume: bool,
    patch_tables: Mutex<BTreeMap<(String, usize, Option<usize>, u64), PatchTable>>,
}

impl<'a> Session<'a> {
    pub fn new(model: &'a ModelHandle, dataset: &'a Dataset, cache: Option<&'a ReferenceCache>, out: impl Into<PathBuf>) -> Self {
        Self { model, dataset, cache, out: out.into(), resume: false, patch_tables: Mutex::new(BTreeMap::new()) }
    }

    pub fn with_out(&self, out: impl Into<PathBuf>) -> Session<'a> {
        Session::new(self.model, self.dataset, self.cache, out).resuming(self.resume)
    }

    pub fn resuming(mut self, resume: bool) -> Self {
        self.resume = resume;
        self
    }

    fn patch_table(&self, layer_id: &str, options: PatchOptions, seed: u64) -> Result<PatchTable> {
        let key = (layer_id.to_string(), options.patch_size, options.pool, seed);
        if let Some(t) = self.patch_tables.lock().expect("patch table lock").get(&key) {
            return Ok(t.clone());
        }
        let table = score_patches(self.dataset, self.model, layer_id, options, seed)?;
        self.patch_tables.lock().expect("patch table lock").insert(key, table.clone());
        Ok(table)
    }

    fn existing(&self, method: &str, target: &AttributionTarget, config: &MethodConfig) -> Option<Artifact> {
        if !self.resume {
            return None;
        }
        let path = manifest_path(&self.out, method, target, config.seed());
        let manifest = read_manifest(&path).ok()?;
        (manifest.config == *config && manifest.checkpoint == self.model.checkpoint_hash).then(|| Artifact {
            png: path.with_extension("png"),
            manifest_path: path,
            manifest,
        })
    }

    fn synthesize_and_write(
        &self,
        target: &AttributionTarget,
        refset: &ReferenceSet,
        config: &SynthesisConfig,
    ) -> Result<Artifact> {
        let method_config = MethodConfig::Vital(config.clone());
        if let Some(a) = self.existing(VITAL, target, &method_config) {
            log::info!("skipping {} seed {} (manifest present)", target.label(), config.seed);
            return Ok(a);
        }
        let started = Instant::now();
        let relevance_target = (config.relevance_mode != RelevanceMode::None).then_some(target);
        let refdist = build_reference_distribution(
            refset,
            self.dataset,
            self.model,
            &config.plan,
            config.relevance_mode,
            relevance_target,
            self.cache,
        )?;
        let info = ReferenceInfo::new(refset, &refdist.provenance.fingerprint, config.relevance_mode)?;
        let result = match synthesize(target, &refdist, self.model, config) {
            Ok(r) => r,
            Err(e) => {
                quarantine(&self.out, VITAL, target, config.seed, &e)?;
                return Err(e);
            }
        };
        let artifact = write_result(&self.out, &result, self.model, &self.dataset.name, Some(info))?;
        log::info!("{} {} seed {} in {:.1}s", VITAL, target.label(), config.seed, started.elapsed().as_secs_f64());
        Ok(artifact)
    }

    pub fn class_references(&self, class: usize, params: &ReferenceParams) -> Result<ReferenceSet> {
        let refs = select_class_references(self.dataset, class, params.count, params.seed)?;
        corrupt_references(&refs, params.corruption, &foreign_pool(self.dataset, class), params.seed)
    }

    pub fn run_class(&self, class: usize, params: &ReferenceParams, config: &SynthesisConfig) -> Result<Artifact> {
        let refs = self.class_references(class, params)?;
        self.synthesize_and_write(&AttributionTarget::Class { class }, &refs, config)
    }

    /// Top patches by the target's score (channel GAP or concept projection).
    pub fn patch_references(&self, target: &AttributionTarget, params: &ReferenceParams) -> Result<ReferenceSet> {
        target.validate(self.model)?;
        let (layer_id, channel) = match target {
            AttributionTarget::Neuron { layer_id, channel } => (layer_id, Some(*channel)),
            AttributionTarget::Concept { layer_id, .. } => (layer_id, None),
            AttributionTarget::Class { .. } => {
                return Err(Error::Config("patch references need a neuron or concept target".into()));
            }
        };
        let table = self.patch_table(layer_id, params.patch, params.seed)?;
        match (channel, target) {
            (Some(c), _) => neuron_patches_from_table(&table, c, params.count, params.seed),
            (None, AttributionTarget::Concept { direction, .. }) => {
                let projected = PatchTable {
                    layer_id: table.layer_id.clone(),
                    patches: table.patches.clone(),
                    scores: table.scores.dot(&ndarray::Array1::from(direction.clone())).insert_axis(ndarray::Axis(1)),
                };
                let mut refs = neuron_patches_from_table(&projected, 0, params.count, params.seed)?;
                refs.target = target.clone();
                Ok(refs)
            }
            _ => unreachable!("matched above"),
        }
    }

    pub fn run_patch_target(&self, target: &AttributionTarget, params: &ReferenceParams, config: &SynthesisConfig) -> Result<Artifact> {
        let refs = self.patch_references(target, params)?;
        self.synthesize_and_write(target, &refs, config)
    }

    pub fn run_baseline(&self, target: &AttributionTarget, config: &BaselineConfig) -> Result<Artifact> {
        let method_config = MethodConfig::FourierAm(config.clone());
        if let Some(a) = self.existing(FOURIER_AM, target, &method_config) {
            return Ok(a);
        }
        let started = Instant::now();
        let result = match activation_max_synthesize(target, self.model, config) {
            Ok(r) => r,
            Err(e) => {
                quarantine(&self.out, FOURIER_AM, target, config.seed, &e)?;
                return Err(e);
            }
        };
        let artifact = write_result(&self.out, &result, self.model, &self.dataset.name, None)?;
        log::info!("{} {} seed {} in {:.1}s", FOURIER_AM, target.label(), config.seed, started.elapsed().as_secs_f64());
        Ok(artifact)
    }
}

/// Unit weights over every tap the target can use; neuron and concept plans
/// scale the first tap down to 0.1.
pub fn default_plan(model: &ModelHandle, target: &AttributionTarget) -> Result<MatchPlan> {
    let taps = target.matchable_taps(model)?;
    let patch_target = !matches!(target, AttributionTarget::Class { .. });
    MatchPlan::new(
        taps.into_iter()
            .enumerate()
            .map(|(i, t)| (t, if patch_target && i == 0 { 0.1 } else { 1.0 }))
            .collect(),
    )
}

/// Inputs to [`evaluate_method`].
pub struct EvalInputs<'a> {
    pub model: &'a ModelHandle,
    pub judge: Option<&'a ModelHandle>,
    /// Held-out images for FID.
    pub real: &'a Dataset,
    pub real_per_class: usize,
    /// Source of the top-activating control images for AUC/MAD.
    pub control: &'a Dataset,
    pub control_count: usize,
    pub control_pool: Option<usize>,
}

fn control_images(inputs: &EvalInputs<'_>, layer_id: &str, channel: usize, memo: &mut BTreeMap<String, PatchTable>) -> Result<Vec<Array3<f64>>> {
    let g = inputs.model.geometry;
    if !memo.contains_key(layer_id) {
        let options = PatchOptions { patch_size: g.height.min(g.width), pool: inputs.control_pool };
        memo.insert(layer_id.to_string(), score_patches(inputs.control, inputs.model, layer_id, options, 0)?);
    }
    let refs = neuron_patches_from_table(&memo[layer_id], channel, inputs.control_count, 0)?;
    refs.sources.iter().map(|s| inputs.control.image_by_id(&s.id)).collect()
}

/// Scores every visualization of `method` found under `out`.
pub fn evaluate_method(out: &Path, method: &str, inputs: &EvalInputs<'_>) -> Result<EvalReport> {
    let manifests = discover(out, method)?;
    if manifests.is_empty() {
        return Err(Error::MissingInput(vec![out.join(method)]));
    }
    let channels = inputs.model.geometry.channels;
    let mut report = EvalReport::new(method, &inputs.model.checkpoint_hash);
    let mut class_images = Vec::new();
    let mut class_labels = Vec::new();
    let mut class_seeds = Vec::new();
    let mut neurons = Vec::new();
    let mut memo = BTreeMap::new();
    for path in &manifests {
        let (manifest, image) = load_artifact(path, channels)?;
        ensure!(
            manifest.checkpoint == inputs.model.checkpoint_hash,
            Config,
            "{} was produced by checkpoint {}, evaluating with {}",
            path.display(),
            manifest.checkpoint,
            inputs.model.checkpoint_hash
        );
        report.manifests.push(path.strip_prefix(out).unwrap_or(path).display().to_string());
        match &manifest.target {
            AttributionTarget::Class { class } => {
                class_images.push(image);
                class_labels.push(*class);
                class_seeds.push(manifest.seed);
            }
            AttributionTarget::Neuron { layer_id, channel } => {
                let control = control_images(inputs, layer_id, *channel, &mut memo)?;
                let r = auc_mad(inputs.model, layer_id, *channel, std::slice::from_ref(&image), &control)?;
                neurons.push(NeuronRow { layer_id: layer_id.clone(), channel: *channel, seed: manifest.seed, auc: r.auc, mad: r.mad });
            }
            AttributionTarget::Concept { .. } => {}
        }
    }
    report.set_neurons(neurons);
    if !class_images.is_empty() {
        let cls = classify_visualizations(inputs.model, &class_images, &class_labels)?;
        report.top1 = Some(cls.top1());
        report.top5 = Some(cls.top5());
        report.classes = cls
            .records
            .iter()
            .zip(&class_seeds)
            .map(|(r, &seed)| ClassRow { label: r.label, seed, predicted: r.predicted, correct: r.predicted == r.label })
            .collect();
        let mut classes = class_labels.clone();
        classes.sort_unstable();
        classes.dedup();
        let mut real = Vec::new();
        for &c in &classes {
            let idx = inputs.real.class_indices(c);
            real.extend(idx.iter().take(inputs.real_per_class).map(|&i| inputs.real.image(i)));
        }
        let synth_emb = inputs.model.penultimate_embedding(&class_images)?;
        let real_emb = inputs.model.penultimate_embedding(&real)?;
        report.fid = Some(fid_score(&synth_emb, &real_emb)?);
        if let Some(judge) = inputs.judge {
            let z = cross_model_zeroshot(judge, &inputs.model.checkpoint_hash, &class_images, &class_labels)?;
            report.judge_checkpoint = Some(judge.checkpoint_hash.clone());
            report.zeroshot_top1 = Some(z.top1());
            report.zeroshot_top5 = Some(z.top5());
        }
    }
    Ok(report)
}

/// Evaluates each method, writes `reports/<method>-<hash>.{json,csv}`,
/// `reports/comparison.csv` and per-method embedding tables.
pub fn evaluate(out: &Path, methods: &[&str], inputs: &EvalInputs<'_>) -> Result<Vec<EvalReport>> {
    let missing: Vec<PathBuf> = methods
        .iter()
        .map(|m| out.join(m))
        .filter(|p| discover(out, p.file_name().and_then(|s| s.to_str()).unwrap_or_default()).map(|v| v.is_empty()).unwrap_or(true))
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingInput(missing));
    }
    let dir = out.join("reports");
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut reports = Vec::new();
    for method in methods {
        let report = evaluate_method(out, method, inputs)?;
        report.write(&dir)?;
        export_method_embeddings(out, method, inputs.model, &dir.join(format!("{}-embeddings.csv", report.file_stem())))?;
        reports.push(report);
    }
    atomic_write(&dir.join("comparison.csv"), comparison_csv(&reports).as_bytes())?;
    Ok(reports)
}

fn export_method_embeddings(out: &Path, method: &str, model: &ModelHandle, path: &Path) -> Result<()> {
    let mut ids = Vec::new();
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for manifest_path in discover(out, method)? {
        let (manifest, image) = load_artifact(&manifest_path, model.geometry.channels)?;
        if let AttributionTarget::Class { class } = manifest.target {
            ids.push(format!("{}/{}", manifest.target.label(), manifest.seed));
            images.push(image);
            labels.push(class);
        }
    }
    if images.is_empty() {
        return Ok(());
    }
    export_embeddings(model, &ids, &images, &labels, method, path)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepAxis {
    ReferenceSize,
    Corruption,
}

impl SweepAxis {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepAxis::ReferenceSize => "reference-size",
            SweepAxis::Corruption => "corruption",
        }
    }
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reference-size" => Ok(SweepAxis::ReferenceSize),
            "corruption" => Ok(SweepAxis::Corruption),
            other => Err(Error::Config(format!("unknown sweep axis {other} (expected reference-size or corruption)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub value: usize,
    pub report: EvalReport,
}

/// Class visualizations and evaluation for every axis value; trend table at
/// `<out>/<axis>/trend.csv`. Completed runs are skipped on rerun.
pub fn sweep(
    session: &Session<'_>,
    axis: SweepAxis,
    values: &[usize],
    classes: &[usize],
    seeds: &[u64],
    params: &ReferenceParams,
    config: &SynthesisConfig,
    inputs: &EvalInputs<'_>,
) -> Result<Vec<SweepPoint>> {
    ensure!(!values.is_empty(), Validation, "sweep axis has no values");
    let root = session.out.join(axis.as_str());
    let mut points = Vec::new();
    for &value in values {
        let point_out = root.join(value.to_string());
        let point = session.with_out(&point_out).resuming(true);
        let mut p = params.clone();
        match axis {
            SweepAxis::ReferenceSize => p.count = value,
            SweepAxis::Corruption => p.corruption = value,
        }
        for &class in classes {
            for &seed in seeds {
                let cfg = SynthesisConfig { seed, ..config.clone() };
                point
                    .run_class(class, &p, &cfg)
                    .map_err(|e| Error::Validation(format!("{} = {value}, class {class}, seed {seed}: {e}", axis.as_str())))?;
            }
        }
        let report = evaluate_method(&point_out, VITAL, inputs)?;
        report.write(&point_out)?;
        points.push(SweepPoint { value, report });
    }
    let mut trend = format!("{},top1,top5,fid,zeroshot_top1,zeroshot_top5\n", axis.as_str());
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_else(|| "n/a".into());
    for p in &points {
        let r = &p.report;
        let _ = writeln!(trend, "{},{},{},{},{},{}", p.value, opt(r.top1), opt(r.top5), opt(r.fid), opt(r.zeroshot_top1), opt(r.zeroshot_top5));
    }
    fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
    atomic_write(&root.join("trend.csv"), trend.as_bytes())?;
    Ok(points)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rgba_round_trip() {
        let image = Array3::from_shape_fn((3, 4, 5), |(c, y, x)| (c * 20 + y * 5 + x) as f64 / 60.0);
        let alpha = Array2::from_elem((4, 5), 0.5);
        let bytes = encode_rgba(&image, &alpha).unwrap();
        assert_eq!(bytes, encode_rgba(&image, &alpha).unwrap());
        let back = decode_rgb(&bytes, 3).unwrap();
        assert!((&back - &image).iter().all(|d| d.abs() <= 0.5 / 255.0 + 1e-12));
        let rgba = image::load_from_memory(&bytes).unwrap().to_rgba8();
        assert_eq!(rgba.get_pixel(0, 0)[3], 128);
    }

    #[test]
    fn sweep_axis_parses() {
        assert_eq!("corruption".parse::<SweepAxis>().unwrap(), SweepAxis::Corruption);
        assert!("size".parse::<SweepAxis>().is_err());
    }
}
