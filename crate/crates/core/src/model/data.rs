//! Labeled image corpora: a procedural built-in, CIFAR-10, and class folders.

use std::collections::HashMap;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use md5::{Digest, Md5};
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::Geometry;
use crate::error::{ensure, Error, Result};

#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    pub label: usize,
    /// `C×H×W` row-major bytes.
    pub pixels: Vec<u8>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub name: String,
    pub geometry: Geometry,
    pub class_names: Vec<String>,
    pub samples: Vec<Sample>,
    index: HashMap<String, usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

pub fn bytes_to_image(pixels: &[u8], geometry: Geometry) -> Array3<f64> {
    Array3::from_shape_vec(geometry.dim(), pixels.iter().map(|&b| f64::from(b) / 255.0).collect())
        .expect("pixel buffer matches geometry")
}

pub fn image_to_bytes(image: &Array3<f64>) -> Vec<u8> {
    image.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
}

impl Dataset {
    pub fn new(name: impl Into<String>, geometry: Geometry, class_names: Vec<String>, samples: Vec<Sample>) -> Result<Self> {
        ensure!(class_names.len() >= 2, Validation, "dataset needs at least 2 classes, got {}", class_names.len());
        let mut index = HashMap::with_capacity(samples.len());
        for (i, s) in samples.iter().enumerate() {
            ensure!(s.pixels.len() == geometry.len(), Validation, "sample {} has wrong pixel count", s.id);
            ensure!(s.label < class_names.len(), Validation, "sample {} has label {} out of range", s.id, s.label);
            if index.insert(s.id.clone(), i).is_some() {
                return Err(Error::Validation(format!("duplicate sample id {}", s.id)));
            }
        }
        Ok(Self { name: name.into(), geometry, class_names, samples, index })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn class_count(&self) -> usize {
        self.class_names.len()
    }

    pub fn image(&self, i: usize) -> Array3<f64> {
        bytes_to_image(&self.samples[i].pixels, self.geometry)
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn image_by_id(&self, id: &str) -> Result<Array3<f64>> {
        self.position(id)
            .map(|i| self.image(i))
            .ok_or_else(|| Error::Dataset(format!("unknown image id {id}")))
    }

    pub fn label_of(&self, id: &str) -> Option<usize> {
        self.position(id).map(|i| self.samples[i].label)
    }

    /// Sample indices of one class, in dataset order.
    pub fn class_indices(&self, class: usize) -> Vec<usize> {
        self.samples.iter().enumerate().filter(|(_, s)| s.label == class).map(|(i, _)| i).collect()
    }

    /// Keeps the first `per_class` samples of every class.
    pub fn take_per_class(&self, per_class: usize) -> Result<Self> {
        let mut counts = vec![0usize; self.class_count()];
        let samples = self
            .samples
            .iter()
            .filter(|s| {
                counts[s.label] += 1;
                counts[s.label] <= per_class
            })
            .cloned()
            .collect();
        Self::new(self.name.clone(), self.geometry, self.class_names.clone(), samples)
    }
}

/// Where a corpus comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DatasetSpec {
    /// Procedurally rendered 10-class shapes and textures.
    Shapes10 { train_per_class: usize, test_per_class: usize, seed: u64, size: usize },
    /// CIFAR-10 binary batches under `root`, fetched on demand when `download` is set.
    Cifar10 { root: PathBuf, download: bool },
    /// `root/<split>/<class>/<image>` or, without split folders, `root/<class>/<image>` for both splits.
    Folder { root: PathBuf, size: usize },
}

impl DatasetSpec {
    pub fn shapes10() -> Self {
        DatasetSpec::Shapes10 { train_per_class: 600, test_per_class: 100, seed: 0, size: 32 }
    }

    /// `shapes10[:<train>:<test>]` (images per class), `cifar10[:<root>]`, or a directory path.
    pub fn parse(s: &str, data_root: Option<&Path>) -> Self {
        let default_root = || data_root.map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("data"));
        if let Some((train, test)) = s.strip_prefix("shapes10:").and_then(|r| r.split_once(':')) {
            if let (Ok(train_per_class), Ok(test_per_class)) = (train.parse(), test.parse()) {
                return DatasetSpec::Shapes10 { train_per_class, test_per_class, seed: 0, size: 32 };
            }
        }
        match s {
            "shapes10" => Self::shapes10(),
            "cifar10" => DatasetSpec::Cifar10 { root: default_root().join("cifar10"), download: true },
            _ => match s.strip_prefix("cifar10:") {
                Some(root) => DatasetSpec::Cifar10 { root: PathBuf::from(root), download: true },
                None => DatasetSpec::Folder { root: PathBuf::from(s), size: 32 },
            },
        }
    }

    pub fn load(&self, split: Split) -> Result<Dataset> {
        match self {
            DatasetSpec::Shapes10 { train_per_class, test_per_class, seed, size } => {
                let per_class = match split {
                    Split::Train => *train_per_class,
                    Split::Test => *test_per_class,
                };
                shapes10(per_class, *seed, *size, split)
            }
            DatasetSpec::Cifar10 { root, download } => load_cifar10(root, split, *download),
            DatasetSpec::Folder { root, size } => load_folder(root, split, *size),
        }
    }
}

pub const SHAPES10_CLASSES: [&str; 10] =
    ["hstripes", "vstripes", "diagonal", "checker", "disc", "ring", "cross", "frame", "dots", "triangle"];

/// Renders the built-in dataset. Every image is a function of `(seed, split, index)` only.
pub fn shapes10(per_class: usize, seed: u64, size: usize, split: Split) -> Result<Dataset> {
    ensure!(per_class >= 1, Validation, "shapes10 needs at least one image per class");
    ensure!(size >= 8, Validation, "shapes10 size must be at least 8");
    let geometry = Geometry { channels: 3, height: size, width: size };
    let split_salt = match split {
        Split::Train => 0x5eed_0000u64,
        Split::Test => 0x7e57_0000u64,
    };
    let mut samples = Vec::with_capacity(per_class * 10);
    for i in 0..per_class {
        for class in 0..10 {
            let n = i * 10 + class;
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ split_salt ^ ((n as u64) << 20));
            let image = render_shape(class, size, &mut rng);
            samples.push(Sample {
                id: format!("shapes10/{}/{n:06}", split.as_str()),
                label: class,
                pixels: image_to_bytes(&image),
            });
        }
    }
    Dataset::new("shapes10", geometry, SHAPES10_CLASSES.iter().map(|s| s.to_string()).collect(), samples)
}

fn random_color<R: Rng>(rng: &mut R) -> [f64; 3] {
    [rng.gen(), rng.gen(), rng.gen()]
}

fn render_shape<R: Rng>(class: usize, size: usize, rng: &mut R) -> Array3<f64> {
    let bg = random_color(rng);
    let fg = loop {
        let c = random_color(rng);
        let d: f64 = c.iter().zip(&bg).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        if d > 0.45 {
            break c;
        }
    };
    let s = size as f64 / 32.0;
    let cx = rng.gen_range(11.0..21.0) * s;
    let cy = rng.gen_range(11.0..21.0) * s;
    let phase: f64 = rng.gen_range(0.0..16.0);
    let mask: Box<dyn Fn(f64, f64) -> bool> = match class {
        0 | 1 | 2 => {
            let period = rng.gen_range(4.0..8.0) * s;
            Box::new(move |y, x| {
                let t = match class {
                    0 => y,
                    1 => x,
                    _ => (x + y) / std::f64::consts::SQRT_2,
                };
                (t + phase).rem_euclid(period) < period / 2.0
            })
        }
        3 => {
            let cell = rng.gen_range(3.0..6.0) * s;
            Box::new(move |y, x| (((x + phase) / cell).floor() + ((y + phase) / cell).floor()) as i64 % 2 == 0)
        }
        4 => {
            let r = rng.gen_range(6.0..10.0) * s;
            Box::new(move |y, x| (x - cx).hypot(y - cy) < r)
        }
        5 => {
            let r = rng.gen_range(7.0..11.0) * s;
            let t = rng.gen_range(2.0..3.5) * s;
            Box::new(move |y, x| ((x - cx).hypot(y - cy) - r).abs() < t / 2.0)
        }
        6 => {
            let arm = rng.gen_range(7.0..11.0) * s;
            let t = rng.gen_range(1.5..2.5) * s;
            Box::new(move |y, x| {
                let (dx, dy) = ((x - cx).abs(), (y - cy).abs());
                (dx < t && dy < arm) || (dy < t && dx < arm)
            })
        }
        7 => {
            let half = rng.gen_range(6.0..10.0) * s;
            let t = rng.gen_range(2.0..3.0) * s;
            Box::new(move |y, x| {
                let m = (x - cx).abs().max((y - cy).abs());
                m < half && m > half - t
            })
        }
        8 => {
            let n = rng.gen_range(6..12);
            let dots: Vec<(f64, f64, f64)> = (0..n)
                .map(|_| {
                    (
                        rng.gen_range(2.0..30.0) * s,
                        rng.gen_range(2.0..30.0) * s,
                        rng.gen_range(1.5..2.5) * s,
                    )
                })
                .collect();
            Box::new(move |y, x| dots.iter().any(|&(dy, dx, r)| (x - dx).hypot(y - dy) < r))
        }
        _ => {
            let r = rng.gen_range(8.0..12.0) * s;
            let flip = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            let verts: Vec<(f64, f64)> = (0..3)
                .map(|k| {
                    let a = std::f64::consts::FRAC_PI_2 * flip + k as f64 * 2.0 * std::f64::consts::PI / 3.0;
                    (cx + r * a.cos(), cy - r * a.sin())
                })
                .collect();
            Box::new(move |y, x| {
                let side = |(ax, ay): (f64, f64), (bx, by): (f64, f64)| (bx - ax) * (y - ay) - (by - ay) * (x - ax);
                let d = [side(verts[0], verts[1]), side(verts[1], verts[2]), side(verts[2], verts[0])];
                d.iter().all(|v| *v >= 0.0) || d.iter().all(|v| *v <= 0.0)
            })
        }
    };
    let noise = Normal::new(0.0, 0.04).expect("valid std");
    let mut img = Array3::zeros((3, size, size));
    for y in 0..size {
        for x in 0..size {
            let on = mask(y as f64 + 0.5, x as f64 + 0.5);
            for c in 0..3 {
                let base = if on { fg[c] } else { bg[c] };
                img[[c, y, x]] = (base + noise.sample(rng)).clamp(0.0, 1.0);
            }
        }
    }
    img
}

pub const CIFAR10_URL: &str = "https://www.cs.toronto.edu/~kriz/cifar-10-binary.tar.gz";
pub const CIFAR10_MD5: &str = "c32a1d4ab5d03f1284b67883e8d87530";
const CIFAR10_CLASSES: [&str; 10] =
    ["airplane", "automobile", "bird", "cat", "deer", "dog", "frog", "horse", "ship", "truck"];
const CIFAR10_RECORD: usize = 1 + 3 * 32 * 32;

pub fn md5_hex(bytes: &[u8]) -> String {
    hex::encode(Md5::digest(bytes))
}

/// Verifies the archive checksum and unpacks it into `root`.
pub fn unpack_cifar10_archive(archive: &[u8], root: &Path) -> Result<()> {
    let digest = md5_hex(archive);
    ensure!(digest == CIFAR10_MD5, Dataset, "CIFAR-10 archive checksum mismatch: {digest}");
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    tar::Archive::new(flate2::read::GzDecoder::new(archive))
        .unpack(root)
        .map_err(|e| Error::io(root, e))
}

fn download_cifar10(root: &Path) -> Result<()> {
    log::info!("downloading CIFAR-10 from {CIFAR10_URL}");
    let response = ureq::get(CIFAR10_URL).call().map_err(|e| Error::Dataset(format!("download failed: {e}")))?;
    let mut bytes = Vec::new();
    response
        .into_reader()
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(CIFAR10_URL, e))?;
    unpack_cifar10_archive(&bytes, root)
}

pub fn parse_cifar10_batch(bytes: &[u8], split: Split, offset: usize) -> Result<Vec<Sample>> {
    ensure!(
        bytes.len() % CIFAR10_RECORD == 0,
        Dataset,
        "CIFAR-10 batch length {} is not a multiple of {CIFAR10_RECORD}",
        bytes.len()
    );
    bytes
        .chunks_exact(CIFAR10_RECORD)
        .enumerate()
        .map(|(i, rec)| {
            ensure!(rec[0] < 10, Dataset, "CIFAR-10 label {} out of range", rec[0]);
            Ok(Sample {
                id: format!("cifar10/{}/{:05}", split.as_str(), offset + i),
                label: usize::from(rec[0]),
                pixels: rec[1..].to_vec(),
            })
        })
        .collect()
}

fn load_cifar10(root: &Path, split: Split, download: bool) -> Result<Dataset> {
    let dir = root.join("cifar-10-batches-bin");
    if !dir.join("test_batch.bin").exists() {
        ensure!(download, Dataset, "CIFAR-10 not found under {} and download disabled", root.display());
        download_cifar10(root)?;
    }
    let files: Vec<String> = match split {
        Split::Train => (1..=5).map(|i| format!("data_batch_{i}.bin")).collect(),
        Split::Test => vec!["test_batch.bin".to_string()],
    };
    let mut samples = Vec::new();
    for f in files {
        let path = dir.join(&f);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let offset = samples.len();
        samples.extend(parse_cifar10_batch(&bytes, split, offset)?);
    }
    Dataset::new(
        "cifar10",
        Geometry { channels: 3, height: 32, width: 32 },
        CIFAR10_CLASSES.iter().map(|s| s.to_string()).collect(),
        samples,
    )
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    entries.sort();
    Ok(entries)
}

fn load_folder(root: &Path, split: Split, size: usize) -> Result<Dataset> {
    let split_dir = root.join(split.as_str());
    let base = if split_dir.is_dir() { split_dir } else { root.to_path_buf() };
    let class_dirs: Vec<PathBuf> = sorted_entries(&base)?.into_iter().filter(|p| p.is_dir()).collect();
    let class_names: Vec<String> = class_dirs
        .iter()
        .map(|p| p.file_name().unwrap_or_default().to_string_lossy().into_owned())
        .collect();
    let geometry = Geometry { channels: 3, height: size, width: size };
    let mut samples = Vec::new();
    for (label, dir) in class_dirs.iter().enumerate() {
        for path in sorted_entries(dir)? {
            if !path.is_file() {
                continue;
            }
            let img = image::open(&path)?
                .resize_exact(size as u32, size as u32, image::imageops::FilterType::Triangle)
                .to_rgb8();
            let mut pixels = vec![0u8; geometry.len()];
            for (x, y, p) in img.enumerate_pixels() {
                for c in 0..3 {
                    pixels[(c * size + y as usize) * size + x as usize] = p[c];
                }
            }
            let rel = path.strip_prefix(root).unwrap_or(&path).to_string_lossy().replace('\\', "/");
            samples.push(Sample { id: rel, label, pixels });
        }
    }
    ensure!(!samples.is_empty(), Validation, "no images found under {}", base.display());
    Dataset::new(root.to_string_lossy(), geometry, class_names, samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes10_is_deterministic_and_balanced() {
        let a = shapes10(3, 4, 32, Split::Train).unwrap();
        let b = shapes10(3, 4, 32, Split::Train).unwrap();
        assert_eq!(a.len(), 30);
        for c in 0..10 {
            assert_eq!(a.class_indices(c).len(), 3);
        }
        assert!(a.samples.iter().zip(&b.samples).all(|(x, y)| x.pixels == y.pixels && x.id == y.id));
        let t = shapes10(3, 4, 32, Split::Test).unwrap();
        assert_ne!(a.samples[0].pixels, t.samples[0].pixels);
        assert_ne!(a.samples[0].id, t.samples[0].id);
    }

    #[test]
    fn cifar_batch_parses_records() {
        let mut bytes = vec![0u8; 2 * CIFAR10_RECORD];
        bytes[0] = 3;
        bytes[1] = 255;
        bytes[CIFAR10_RECORD] = 9;
        let samples = parse_cifar10_batch(&bytes, Split::Test, 0).unwrap();
        assert_eq!(samples.len(), 2);
        assert_eq!((samples[0].label, samples[1].label), (3, 9));
        assert_eq!(samples[0].pixels[0], 255);
        assert_eq!(samples[1].id, "cifar10/test/00001");
        assert!(parse_cifar10_batch(&bytes[..10], Split::Test, 0).is_err());
    }

    #[test]
    fn cifar_archive_checksum_is_enforced() {
        let dir = tempfile::tempdir().unwrap();
        let err = unpack_cifar10_archive(b"not the archive", dir.path()).unwrap_err();
        assert!(err.to_string().contains("checksum"));
    }

    #[test]
    fn folder_layout_loads_classes_in_order() {
        let dir = tempfile::tempdir().unwrap();
        for (class, shade) in [("cat", 10u8), ("dog", 200u8)] {
            let d = dir.path().join(class);
            fs::create_dir_all(&d).unwrap();
            for i in 0..2 {
                image::RgbImage::from_pixel(8, 8, image::Rgb([shade, shade, shade]))
                    .save(d.join(format!("{i}.png")))
                    .unwrap();
            }
        }
        let ds = load_folder(dir.path(), Split::Train, 8).unwrap();
        assert_eq!(ds.class_names, vec!["cat", "dog"]);
        assert_eq!(ds.len(), 4);
        assert_eq!(ds.label_of("dog/1.png"), Some(1));
        assert_eq!(ds.samples[0].pixels[0], 10);
    }

    #[test]
    fn single_class_dataset_is_rejected() {
        let err = Dataset::new("x", Geometry { channels: 1, height: 1, width: 1 }, vec!["a".into()], vec![]);
        assert!(err.is_err());
    }
}
