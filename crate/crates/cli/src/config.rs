//! Run settings: command-line flags over a TOML file over built-in defaults.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use serde::Deserialize;

/// Every knob a command may read. Flags and file keys share names
/// (`--learning-rate` / `learning-rate = 0.05`).
#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct Settings {
    /// Model checkpoint directory.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// `shapes10`, `shapes10:<train>:<test>`, `cifar10`, `cifar10:<root>` or an image folder.
    #[arg(long)]
    pub dataset: Option<String>,
    /// Output directory (checkpoint directory for `train`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,

    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub alpha_tv: Option<f64>,
    #[arg(long)]
    pub alpha_l2: Option<f64>,
    #[arg(long)]
    pub jitter: Option<usize>,
    /// `none`, `lrp` or `guided`.
    #[arg(long)]
    pub relevance: Option<String>,
    /// Plan as `layer=weight` pairs; defaults to every usable tap.
    #[arg(long, value_delimiter = ',')]
    pub plan: Option<Vec<String>>,

    /// Reference images per class, or patches per neuron.
    #[arg(long)]
    pub refs: Option<usize>,
    #[arg(long)]
    pub corruption: Option<usize>,
    #[arg(long)]
    pub ref_seed: Option<u64>,
    #[arg(long)]
    pub patch_size: Option<usize>,
    /// Source images scanned for patches (whole split when unset).
    #[arg(long)]
    pub pool: Option<usize>,

    #[arg(long, value_delimiter = ',')]
    pub classes: Option<Vec<usize>>,
    #[arg(long)]
    pub layer: Option<String>,
    #[arg(long, value_delimiter = ',')]
    pub channels: Option<Vec<usize>>,
    /// Text file of direction components separated by whitespace or commas.
    #[arg(long)]
    pub direction: Option<PathBuf>,

    /// Baseline spectrum decay exponent.
    #[arg(long)]
    pub decay: Option<f64>,
    #[arg(long)]
    pub init_sd: Option<f64>,
    /// Baseline augmentation noise amplitude; 0 with `--no-crop` gives plain ascent.
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub no_crop: Option<bool>,

    #[arg(long, value_delimiter = ',')]
    pub methods: Option<Vec<String>>,
    /// Judge checkpoint for zero-shot scoring.
    #[arg(long)]
    pub judge: Option<PathBuf>,
    #[arg(long)]
    pub real_per_class: Option<usize>,
    #[arg(long)]
    pub control_count: Option<usize>,

    /// `reference-size` or `corruption`.
    #[arg(long)]
    pub axis: Option<String>,
    #[arg(long, value_delimiter = ',')]
    pub values: Option<Vec<usize>>,
    /// Skip runs whose manifest already matches.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub resume: Option<bool>,

    #[arg(long)]
    pub epochs: Option<usize>,
    /// `resnet` or `plain`.
    #[arg(long)]
    pub arch: Option<String>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub train_seed: Option<u64>,
}

macro_rules! overlay {
    ($top:ident, $base:ident; $($field:ident),+ $(,)?) => {
        Settings { $($field: $top.$field.or($base.$field)),+ }
    };
}

impl Settings {
    /// `self` wins wherever it is set.
    pub fn over(self, base: Settings) -> Settings {
        let top = self;
        overlay!(top, base;
            checkpoint, dataset, out, seeds, steps, learning_rate, alpha_tv, alpha_l2, jitter, relevance, plan,
            refs, corruption, ref_seed, patch_size, pool, classes, layer, channels, direction, decay, init_sd,
            noise, no_crop, methods, judge, real_per_class, control_count, axis, values, resume, epochs, arch,
            batch_size, train_seed,
        )
    }

    pub fn from_file(path: &Path) -> Result<Settings> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn require<'a, T>(value: &'a Option<T>, name: &str) -> Result<&'a T> {
        match value {
            Some(v) => Ok(v),
            None => bail!("missing setting `{name}` (flag --{name} or config key)"),
        }
    }
}

pub fn parse_direction(text: &str) -> Result<Vec<f64>> {
    text.split(|c: char| c.is_whitespace() || c == ',')
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<f64>().with_context(|| format!("direction component {t:?} is not a number")))
        .collect()
}

pub fn parse_plan(entries: &[String]) -> Result<Vec<(String, f64)>> {
    entries
        .iter()
        .map(|e| {
            let (layer, weight) = e.split_once('=').with_context(|| format!("plan entry {e:?} is not layer=weight"))?;
            let weight = weight.parse::<f64>().with_context(|| format!("plan weight in {e:?} is not a number"))?;
            Ok((layer.to_string(), weight))
        })
        .collect()
}
