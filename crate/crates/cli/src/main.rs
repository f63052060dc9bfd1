mod config;

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};
use fvis::attribution::{AttributionTarget, RelevanceMode};
use fvis::baselines::BaselineConfig;
use fvis::model::checkpoint;
use fvis::model::data::{Dataset, DatasetSpec, Split};
use fvis::model::train::{train_desk_model, TrainConfig};
use fvis::model::{ArchSpec, ModelHandle};
use fvis::pipeline::{self, default_plan, EvalInputs, ReferenceParams, Session, SweepAxis, FOURIER_AM, VITAL};
use fvis::reference::ReferenceCache;
use fvis::sortmatch::MatchPlan;
use fvis::synthesis::SynthesisConfig;

use config::{parse_direction, parse_plan, Settings};

#[derive(Parser)]
#[command(name = "fvis", version, about = "Feature visualizations by matching activation distributions")]
struct Cli {
    /// TOML file with defaults for any flag.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Reference-distribution cache root (default `<out>/cache`).
    #[arg(long, global = true, env = "FVIS_CACHE_DIR")]
    cache_dir: Option<PathBuf>,
    /// Root for downloaded datasets.
    #[arg(long, global = true, env = "FVIS_DATA_ROOT")]
    data_root: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a desk-scale classifier and save a checkpoint to `--out`.
    Train(Settings),
    /// Visualize class logits from random class references.
    VisualizeClass(Settings),
    /// Visualize channels of an intermediate layer from top patches.
    VisualizeNeuron(Settings),
    /// Visualize a direction in the penultimate feature space.
    VisualizeConcept(Settings),
    /// Fourier-parameterized activation maximization for classes or channels.
    Baseline(Settings),
    /// Score every method's outputs under `--out`.
    Evaluate(Settings),
    /// Class visualizations and evaluation across reference sizes or corruption levels.
    Sweep(Settings),
}

/// Rejected before any computation starts; exit status 2.
#[derive(Debug)]
struct Usage(String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow!(Usage(msg.into()))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<Usage>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let file = match &cli.config {
        Some(path) => Settings::from_file(path).map_err(|e| usage(format!("{e:#}")))?,
        None => Settings::default(),
    };
    let ctx = |flags: Settings| Run { s: flags.over(file.clone()), cache_dir: cli.cache_dir.clone(), data_root: cli.data_root.clone() };
    match cli.command {
        Command::Train(f) => train(&ctx(f)),
        Command::VisualizeClass(f) => visualize_class(&ctx(f)),
        Command::VisualizeNeuron(f) => visualize_neuron(&ctx(f)),
        Command::VisualizeConcept(f) => visualize_concept(&ctx(f)),
        Command::Baseline(f) => baseline(&ctx(f)),
        Command::Evaluate(f) => evaluate(&ctx(f)),
        Command::Sweep(f) => sweep(&ctx(f)),
    }
}

struct Run {
    s: Settings,
    cache_dir: Option<PathBuf>,
    data_root: Option<PathBuf>,
}

impl Run {
    fn out(&self) -> Result<PathBuf> {
        Settings::require(&self.s.out, "out").map(Clone::clone).map_err(|e| usage(e.to_string()))
    }

    fn dataset_spec(&self) -> DatasetSpec {
        DatasetSpec::parse(self.s.dataset.as_deref().unwrap_or("shapes10"), self.data_root.as_deref())
    }

    fn dataset(&self, split: Split) -> Result<Dataset> {
        let spec = self.dataset_spec();
        spec.load(split).with_context(|| format!("loading {split:?} split of {spec:?}"))
    }

    fn load_model(&self, path: &Path) -> Result<ModelHandle> {
        if !path.join(checkpoint::META_FILE).is_file() {
            return Err(usage(format!("no checkpoint at {}", path.display())));
        }
        Ok(checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?.0)
    }

    fn model(&self) -> Result<ModelHandle> {
        let path = Settings::require(&self.s.checkpoint, "checkpoint").map_err(|e| usage(e.to_string()))?;
        self.load_model(path)
    }

    fn cache(&self, out: &Path) -> ReferenceCache {
        ReferenceCache::new(self.cache_dir.clone().unwrap_or_else(|| out.join("cache")))
    }

    fn seeds(&self) -> Vec<u64> {
        self.s.seeds.clone().unwrap_or_else(|| vec![0])
    }

    fn relevance(&self, default: RelevanceMode) -> Result<RelevanceMode> {
        match &self.s.relevance {
            Some(r) => r.parse().map_err(|e: fvis::Error| usage(e.to_string())),
            None => Ok(default),
        }
    }

    fn reference_params(&self, model: &ModelHandle) -> ReferenceParams {
        let mut p = ReferenceParams::new(model.geometry.height.min(model.geometry.width));
        if let Some(n) = self.s.refs {
            p.count = n;
        }
        if let Some(m) = self.s.corruption {
            p.corruption = m;
        }
        if let Some(seed) = self.s.ref_seed {
            p.seed = seed;
        }
        if let Some(size) = self.s.patch_size {
            p.patch.patch_size = size;
        }
        if self.s.pool.is_some() {
            p.patch.pool = self.s.pool;
        }
        p
    }

    /// Synthesis settings for `target`; `alpha` is the regularizer default.
    fn synthesis(&self, model: &ModelHandle, target: &AttributionTarget, mode: RelevanceMode, alpha: f64) -> Result<SynthesisConfig> {
        let plan = match &self.s.plan {
            Some(entries) => MatchPlan::new(parse_plan(entries).map_err(|e| usage(format!("{e:#}")))?),
            None => default_plan(model, target),
        }
        .map_err(|e| usage(e.to_string()))?;
        let mut c = SynthesisConfig::new(plan, model.geometry.height.min(model.geometry.width));
        c.relevance_mode = mode;
        c.alpha_tv = self.s.alpha_tv.unwrap_or(alpha);
        c.alpha_l2 = self.s.alpha_l2.unwrap_or(alpha);
        if let Some(v) = self.s.steps {
            c.steps = v;
        }
        if let Some(v) = self.s.learning_rate {
            c.learning_rate = v;
        }
        if let Some(v) = self.s.jitter {
            c.jitter = v;
        }
        c.validate().map_err(|e| usage(e.to_string()))?;
        Ok(c)
    }

    fn baseline(&self, model: &ModelHandle) -> Result<BaselineConfig> {
        let mut c = BaselineConfig::new(model.geometry.height.min(model.geometry.width));
        if let Some(v) = self.s.steps {
            c.steps = v;
        }
        if let Some(v) = self.s.learning_rate {
            c.learning_rate = v;
        }
        if let Some(v) = self.s.jitter {
            c.jitter = v;
        }
        if let Some(v) = self.s.decay {
            c.decay = v;
        }
        if let Some(v) = self.s.init_sd {
            c.init_sd = v;
        }
        if let Some(v) = self.s.noise {
            c.noise = v;
        }
        if self.s.no_crop == Some(true) {
            c.crop = None;
        }
        c.validate().map_err(|e| usage(e.to_string()))?;
        Ok(c)
    }

    fn classes(&self, model: &ModelHandle) -> Result<Vec<usize>> {
        let classes = self.s.classes.clone().unwrap_or_else(|| (0..model.class_count).collect());
        for &c in &classes {
            AttributionTarget::Class { class: c }.validate(model).map_err(|e| usage(e.to_string()))?;
        }
        Ok(classes)
    }

    fn neurons(&self, model: &ModelHandle) -> Result<Vec<AttributionTarget>> {
        let layer = Settings::require(&self.s.layer, "layer").map_err(|e| usage(e.to_string()))?;
        let channels = Settings::require(&self.s.channels, "channels").map_err(|e| usage(e.to_string()))?;
        channels
            .iter()
            .map(|&channel| {
                let t = AttributionTarget::Neuron { layer_id: layer.clone(), channel };
                t.validate(model).map_err(|e| usage(e.to_string()))?;
                Ok(t)
            })
            .collect()
    }

    fn eval_inputs<'a>(&self, model: &'a ModelHandle, judge: Option<&'a ModelHandle>, test: &'a Dataset) -> EvalInputs<'a> {
        EvalInputs {
            model,
            judge,
            real: test,
            real_per_class: self.s.real_per_class.unwrap_or(50),
            control: test,
            control_count: self.s.control_count.unwrap_or(50),
            control_pool: None,
        }
    }

    fn judge(&self) -> Result<Option<ModelHandle>> {
        self.s.judge.as_deref().map(|p| self.load_model(p)).transpose()
    }
}

/// Runs every job, logging failures with their context; fails if any did.
fn run_jobs<T>(jobs: impl IntoIterator<Item = (String, T)>, mut f: impl FnMut(T) -> fvis::Result<()>) -> Result<()> {
    let mut failed = Vec::new();
    for (label, job) in jobs {
        if let Err(e) = f(job) {
            log::error!("{label}: {e}");
            failed.push(label);
        }
    }
    if !failed.is_empty() {
        bail!("{} run(s) failed: {}", failed.len(), failed.join(", "));
    }
    Ok(())
}

fn log_cache(cache: &ReferenceCache) {
    log::info!("reference cache: {} hits, {} misses", cache.hits(), cache.misses());
}

fn train(ctx: &Run) -> Result<()> {
    let out = ctx.out()?;
    let arch = match ctx.s.arch.as_deref().unwrap_or("resnet") {
        "resnet" => ArchSpec::desk_resnet(),
        "plain" => ArchSpec::desk_plain(),
        other => return Err(usage(format!("unknown arch {other:?} (expected resnet or plain)"))),
    };
    let defaults = TrainConfig::default();
    let config = TrainConfig {
        arch,
        epochs: ctx.s.epochs.unwrap_or(5),
        learning_rate: ctx.s.learning_rate.unwrap_or(defaults.learning_rate),
        batch_size: ctx.s.batch_size.unwrap_or(defaults.batch_size),
        seed: ctx.s.train_seed.unwrap_or(defaults.seed),
        ..defaults
    };
    let train = ctx.dataset(Split::Train)?;
    let test = ctx.dataset(Split::Test)?;
    let (mut model, meta) = train_desk_model(&train, &test, &config)?;
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let hash = checkpoint::save(&mut model, &meta, &out)?;
    println!("test accuracy {:.4}, checkpoint {} ({})", meta.test_accuracy, out.display(), &hash[..12]);
    Ok(())
}

fn visualize_class(ctx: &Run) -> Result<()> {
    let model = ctx.model()?;
    let out = ctx.out()?;
    let classes = ctx.classes(&model)?;
    let config = ctx.synthesis(&model, &AttributionTarget::Class { class: 0 }, ctx.relevance(RelevanceMode::None)?, 0.0)?;
    let params = ctx.reference_params(&model);
    let train = ctx.dataset(Split::Train)?;
    let cache = ctx.cache(&out);
    let session = Session::new(&model, &train, Some(&cache), &out).resuming(ctx.s.resume.unwrap_or(false));
    let seeds = ctx.seeds();
    let jobs = classes.iter().flat_map(|&c| seeds.iter().map(move |&s| (format!("class-{c} seed {s}"), (c, s))));
    let result = run_jobs(jobs, |(class, seed)| {
        session.run_class(class, &params, &SynthesisConfig { seed, ..config.clone() }).map(drop)
    });
    log_cache(&cache);
    result
}

fn visualize_targets(ctx: &Run, model: &ModelHandle, targets: Vec<AttributionTarget>) -> Result<()> {
    let out = ctx.out()?;
    let mode = ctx.relevance(RelevanceMode::Lrp)?;
    let configs = targets
        .iter()
        .map(|t| ctx.synthesis(model, t, mode, 3e-6))
        .collect::<Result<Vec<_>>>()?;
    let params = ctx.reference_params(model);
    let train = ctx.dataset(Split::Train)?;
    let cache = ctx.cache(&out);
    let session = Session::new(model, &train, Some(&cache), &out).resuming(ctx.s.resume.unwrap_or(false));
    let seeds = ctx.seeds();
    let jobs = targets
        .iter()
        .zip(&configs)
        .flat_map(|(t, c)| seeds.iter().map(move |&s| (format!("{} seed {s}", t.label()), (t, c, s))));
    let result = run_jobs(jobs, |(target, config, seed)| {
        session.run_patch_target(target, &params, &SynthesisConfig { seed, ..config.clone() }).map(drop)
    });
    log_cache(&cache);
    result
}

fn visualize_neuron(ctx: &Run) -> Result<()> {
    let model = ctx.model()?;
    let targets = ctx.neurons(&model)?;
    visualize_targets(ctx, &model, targets)
}

fn visualize_concept(ctx: &Run) -> Result<()> {
    let model = ctx.model()?;
    let path = Settings::require(&ctx.s.direction, "direction").map_err(|e| usage(e.to_string()))?;
    let text = std::fs::read_to_string(path).map_err(|e| usage(format!("reading direction {}: {e}", path.display())))?;
    let direction = parse_direction(&text).map_err(|e| usage(format!("{e:#}")))?;
    let layer_id = ctx.s.layer.clone().unwrap_or_else(|| model.last_tap().layer_id.clone());
    let target = AttributionTarget::Concept { layer_id, direction };
    target.validate(&model).map_err(|e| usage(e.to_string()))?;
    visualize_targets(ctx, &model, vec![target])
}

fn baseline(ctx: &Run) -> Result<()> {
    let model = ctx.model()?;
    let out = ctx.out()?;
    let targets = if ctx.s.layer.is_some() {
        ctx.neurons(&model)?
    } else {
        ctx.classes(&model)?.into_iter().map(|class| AttributionTarget::Class { class }).collect()
    };
    let config = ctx.baseline(&model)?;
    let train = ctx.dataset(Split::Train)?;
    let session = Session::new(&model, &train, None, &out).resuming(ctx.s.resume.unwrap_or(false));
    let seeds = ctx.seeds();
    let jobs = targets.iter().flat_map(|t| seeds.iter().map(move |&s| (format!("{} seed {s}", t.label()), (t, s))));
    run_jobs(jobs, |(target, seed)| session.run_baseline(target, &BaselineConfig { seed, ..config.clone() }).map(drop))
}

fn evaluate(ctx: &Run) -> Result<()> {
    let model = ctx.model()?;
    let out = ctx.out()?;
    let judge = ctx.judge()?;
    let methods = ctx.s.methods.clone().unwrap_or_else(|| vec![VITAL.into(), FOURIER_AM.into()]);
    let methods: Vec<&str> = methods.iter().map(String::as_str).collect();
    let test = ctx.dataset(Split::Test)?;
    let inputs = ctx.eval_inputs(&model, judge.as_ref(), &test);
    let reports = pipeline::evaluate(&out, &methods, &inputs)?;
    print!("{}", fvis::evaluation::comparison_csv(&reports));
    Ok(())
}

fn sweep(ctx: &Run) -> Result<()> {
    let model = ctx.model()?;
    let out = ctx.out()?;
    let axis: SweepAxis = Settings::require(&ctx.s.axis, "axis")
        .map_err(|e| usage(e.to_string()))?
        .parse()
        .map_err(|e: fvis::Error| usage(e.to_string()))?;
    let values = Settings::require(&ctx.s.values, "values").map_err(|e| usage(e.to_string()))?;
    let classes = ctx.classes(&model)?;
    let config = ctx.synthesis(&model, &AttributionTarget::Class { class: 0 }, ctx.relevance(RelevanceMode::None)?, 0.0)?;
    let params = ctx.reference_params(&model);
    let judge = ctx.judge()?;
    let train = ctx.dataset(Split::Train)?;
    let test = ctx.dataset(Split::Test)?;
    let cache = ctx.cache(&out);
    let session = Session::new(&model, &train, Some(&cache), &out);
    let inputs = ctx.eval_inputs(&model, judge.as_ref(), &test);
    let points = pipeline::sweep(&session, axis, values, &classes, &ctx.seeds(), &params, &config, &inputs)?;
    log_cache(&cache);
    let trend = out.join(axis.as_str()).join("trend.csv");
    print!("{}", std::fs::read_to_string(&trend).with_context(|| format!("reading {}", trend.display()))?);
    log::info!("{} sweep points written under {}", points.len(), out.join(axis.as_str()).display());
    Ok(())
}
