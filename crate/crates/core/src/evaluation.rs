//! Quantitative evaluation of visualizations.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::archive::atomic_write;
use crate::error::{ensure, Error, Result};
use crate::model::ModelHandle;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub label: usize,
    pub predicted: usize,
    pub top5: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Classification {
    pub total: usize,
    pub top1_correct: usize,
    pub top5_correct: usize,
    pub records: Vec<PredictionRecord>,
}

impl Classification {
    pub fn top1(&self) -> f64 {
        self.top1_correct as f64 / self.total as f64
    }

    pub fn top5(&self) -> f64 {
        self.top5_correct as f64 / self.total as f64
    }
}

/// Indices of the `k` largest logits, descending; ties keep the lower index first.
pub fn top_k(logits: &Array1<f64>, k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..logits.len()).collect();
    idx.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

pub fn classify_visualizations(model: &ModelHandle, images: &[Array3<f64>], labels: &[usize]) -> Result<Classification> {
    ensure!(!images.is_empty(), Validation, "no images to classify");
    ensure!(images.len() == labels.len(), Validation, "{} images but {} labels", images.len(), labels.len());
    let mut out = Classification { total: images.len(), top1_correct: 0, top5_correct: 0, records: Vec::new() };
    for (image, &label) in images.iter().zip(labels) {
        let logits = model.logits(image)?;
        let top5 = top_k(&logits, 5);
        out.top1_correct += usize::from(top5[0] == label);
        out.top5_correct += usize::from(top5.contains(&label));
        out.records.push(PredictionRecord { label, predicted: top5[0], top5 });
    }
    Ok(out)
}

fn mean_cov(x: &Array2<f64>) -> (Array1<f64>, Array2<f64>) {
    let n = x.nrows() as f64;
    let mu = x.mean_axis(Axis(0)).expect("nonempty");
    let centered = x - &mu;
    let cov = centered.t().dot(&centered) / (n - 1.0);
    (mu, cov)
}

fn to_matrix(a: &Array2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
}

/// Square root of a symmetric PSD matrix, negative eigenvalues clipped to 0.
fn sqrtm_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|v| v.max(0.0).sqrt()));
    &eig.eigenvectors * d * eig.eigenvectors.transpose()
}

/// Fréchet distance between two Gaussians, with `eps·I` added to both covariances.
pub fn frechet_gaussian(mu_a: &Array1<f64>, cov_a: &Array2<f64>, mu_b: &Array1<f64>, cov_b: &Array2<f64>, eps: f64) -> Result<f64> {
    let d = mu_a.len();
    ensure!(mu_b.len() == d && cov_a.dim() == (d, d) && cov_b.dim() == (d, d), Validation, "Gaussian dimensions disagree");
    let eye = DMatrix::<f64>::identity(d, d) * eps;
    let a = to_matrix(cov_a) + &eye;
    let b = to_matrix(cov_b) + &eye;
    let sa = sqrtm_psd(&a);
    let inner = &sa * &b * &sa;
    let inner = (&inner + inner.transpose()) * 0.5;
    let tr_sqrt: f64 = SymmetricEigen::new(inner).eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    let diff = mu_a - mu_b;
    let value = diff.dot(&diff) + a.trace() + b.trace() - 2.0 * tr_sqrt;
    ensure!(value.is_finite(), DegenerateInput, "Frechet distance is not finite");
    Ok(value.max(0.0))
}

pub const FID_EPS: f64 = 1e-6;

/// FID between two embedding sets (rows are samples).
pub fn fid_score(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64> {
    ensure!(a.nrows() >= 2 && b.nrows() >= 2, Validation, "FID needs at least 2 samples per set ({} and {})", a.nrows(), b.nrows());
    ensure!(a.ncols() == b.ncols(), Validation, "embedding widths differ: {} vs {}", a.ncols(), b.ncols());
    ensure!(a.iter().chain(b.iter()).all(|v| v.is_finite()), Validation, "embeddings contain non-finite values");
    let (ma, ca) = mean_cov(a);
    let (mb, cb) = mean_cov(b);
    frechet_gaussian(&ma, &ca, &mb, &cb, FID_EPS)
}

/// Classification by a second, independently trained model.
pub fn cross_model_zeroshot(
    judge: &ModelHandle,
    target_checkpoint: &str,
    images: &[Array3<f64>],
    labels: &[usize],
) -> Result<Classification> {
    ensure!(
        judge.checkpoint_hash != target_checkpoint,
        Config,
        "judge checkpoint {} is the target model",
        judge.checkpoint_hash
    );
    classify_visualizations(judge, images, labels)
}

/// Mann–Whitney AUC that a synthetic score exceeds a control score, ties counted half.
pub fn auc(synth: &[f64], control: &[f64]) -> Result<f64> {
    ensure!(!synth.is_empty() && !control.is_empty(), Validation, "AUC needs nonempty score sets");
    let mut all: Vec<(f64, bool)> = synth.iter().map(|&s| (s, true)).chain(control.iter().map(|&s| (s, false))).collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    // midranks over tie groups
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += all[i..=j].iter().filter(|e| e.1).count() as f64 * mid;
        i = j + 1;
    }
    let (n, m) = (synth.len() as f64, control.len() as f64);
    Ok((rank_sum - n * (n + 1.0) / 2.0) / (n * m))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AucMad {
    pub auc: f64,
    pub mad: f64,
}

pub fn auc_mad_scores(synth: &[f64], control: &[f64]) -> Result<AucMad> {
    let auc = auc(synth, control)?;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(AucMad { auc, mad: mean(synth) - mean(control) })
}

/// GAP of one channel per image.
pub fn channel_scores(model: &ModelHandle, layer_id: &str, channel: usize, images: &[Array3<f64>]) -> Result<Vec<f64>> {
    let tap = model.tap(layer_id)?;
    ensure!(channel < tap.channel_count, Validation, "channel {channel} out of range for {layer_id}");
    images
        .iter()
        .map(|image| {
            let fwd = model.forward_taps(image, &[layer_id], false)?;
            Ok(fwd.activations[layer_id].values.row(channel).mean().expect("nonempty positions"))
        })
        .collect()
}

pub fn auc_mad(
    model: &ModelHandle,
    layer_id: &str,
    channel: usize,
    synth: &[Array3<f64>],
    control: &[Array3<f64>],
) -> Result<AucMad> {
    ensure!(!synth.is_empty() && !control.is_empty(), Validation, "AUC/MAD needs nonempty image sets");
    let s = channel_scores(model, layer_id, channel, synth)?;
    let c = channel_scores(model, layer_id, channel, control)?;
    auc_mad_scores(&s, &c)
}

/// Writes `image_id,label,method,e_1..e_d` rows of penultimate embeddings.
pub fn export_embeddings(
    model: &ModelHandle,
    ids: &[String],
    images: &[Array3<f64>],
    labels: &[usize],
    method: &str,
    path: &Path,
) -> Result<()> {
    ensure!(!images.is_empty(), Validation, "no images to embed");
    ensure!(ids.len() == images.len() && labels.len() == images.len(), Validation, "ids, images and labels differ in length");
    let emb = model.penultimate_embedding(images)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["image_id".to_string(), "label".into(), "method".into()];
    header.extend((1..=emb.ncols()).map(|i| format!("e_{i}")));
    w.write_record(&header)?;
    for ((id, label), row) in ids.iter().zip(labels).zip(emb.axis_iter(Axis(0))) {
        let mut rec = vec![id.clone(), label.to_string(), method.to_string()];
        rec.extend(row.iter().map(|v| format!("{v:.17e}")));
        w.write_record(&rec)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Validation(format!("csv buffer: {e}")))?;
    atomic_write(path, &bytes)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuronRow {
    pub layer_id: String,
    pub channel: usize,
    pub seed: u64,
    pub auc: f64,
    pub mad: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassRow {
    pub label: usize,
    pub seed: u64,
    pub predicted: usize,
    pub correct: bool,
}

/// Per-method evaluation; `None` fields were not applicable to the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub checkpoint: String,
    pub judge_checkpoint: Option<String>,
    pub classes: Vec<ClassRow>,
    pub top1: Option<f64>,
    pub top5: Option<f64>,
    pub fid: Option<f64>,
    pub zeroshot_top1: Option<f64>,
    pub zeroshot_top5: Option<f64>,
    pub neurons: Vec<NeuronRow>,
    pub mean_auc: Option<f64>,
    pub mean_mad: Option<f64>,
    pub manifests: Vec<String>,
}

impl EvalReport {
    pub fn new(method: &str, checkpoint: &str) -> Self {
        Self {
            method: method.to_string(),
            checkpoint: checkpoint.to_string(),
            judge_checkpoint: None,
            classes: Vec::new(),
            top1: None,
            top5: None,
            fid: None,
            zeroshot_top1: None,
            zeroshot_top5: None,
            neurons: Vec::new(),
            mean_auc: None,
            mean_mad: None,
            manifests: Vec::new(),
        }
    }

    pub fn set_neurons(&mut self, rows: Vec<NeuronRow>) {
        if !rows.is_empty() {
            let n = rows.len() as f64;
            self.mean_auc = Some(rows.iter().map(|r| r.auc).sum::<f64>() / n);
            self.mean_mad = Some(rows.iter().map(|r| r.mad).sum::<f64>() / n);
        }
        self.neurons = rows;
    }

    /// File stem `<method>-<first 12 hex of checkpoint>`.
    pub fn file_stem(&self) -> String {
        format!("{}-{}", self.method, &self.checkpoint[..self.checkpoint.len().min(12)])
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let stem = self.file_stem();
        atomic_write(&dir.join(format!("{stem}.json")), serde_json::to_string_pretty(self)?.as_bytes())?;
        atomic_write(&dir.join(format!("{stem}.csv")), comparison_csv(std::slice::from_ref(self)).as_bytes())
    }
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_else(|| "n/a".into())
}

/// One summary row per report.
pub fn comparison_csv(reports: &[EvalReport]) -> String {
    let mut out = String::from("method,checkpoint,top1,top5,fid,zeroshot_top1,zeroshot_top5,mean_auc,mean_mad\n");
    for r in reports {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.method,
            r.checkpoint,
            cell(r.top1),
            cell(r.top5),
            cell(r.fid),
            cell(r.zeroshot_top1),
            cell(r.zeroshot_top5),
            cell(r.mean_auc),
            cell(r.mean_mad)
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn auc_mad_hand_example() {
        let r = auc_mad_scores(&[2.0, 4.0], &[1.0, 3.0]).unwrap();
        assert_eq!(r.auc, 0.75);
        assert_eq!(r.mad, 1.0);
        assert_eq!(auc(&[5.0, 6.0], &[1.0, 2.0]).unwrap(), 1.0);
        let same = auc_mad_scores(&[1.0, 2.0, 2.0], &[1.0, 2.0, 2.0]).unwrap();
        assert_eq!(same.auc, 0.5);
        assert_eq!(same.mad, 0.0);
        assert!(auc(&[], &[1.0]).is_err());
    }

    #[test]
    fn fid_one_dimensional_closed_form() {
        let mu_a = array![0.0];
        let mu_b = array![3.0];
        let cov = array![[1.0]];
        let v = frechet_gaussian(&mu_a, &cov, &mu_b, &cov, 0.0).unwrap();
        assert!((v - 9.0).abs() < 1e-12);
    }

    #[test]
    fn fid_identity_and_errors() {
        let a = array![[0.0, 1.0], [2.0, 0.5], [1.0, 1.5], [0.3, 0.2]];
        assert!(fid_score(&a, &a).unwrap() < 1e-6);
        assert!(fid_score(&a.slice(ndarray::s![..1, ..]).to_owned(), &a).is_err());
    }

    #[test]
    fn top_k_ties_prefer_low_index() {
        assert_eq!(top_k(&array![1.0, 3.0, 3.0, 0.0], 3), vec![1, 2, 0]);
    }

    #[test]
    fn comparison_marks_missing_fields() {
        let mut r = EvalReport::new("vital", "abc");
        r.top1 = Some(1.0);
        let csv = comparison_csv(&[r]);
        assert!(csv.lines().nth(1).unwrap().starts_with("vital,abc,1.000000,n/a"));
    }
}
