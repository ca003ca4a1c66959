//! Command-line definitions and command implementations.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use flowlens_core::losses::LossWeights;
use flowlens_core::model::ModelConfig;
use flowlens_core::synth::{SampleRecord, Split, SplitCounts, DEFAULT_RATIO, SUPPORTED_SIZES};
use flowlens_core::training::{AdamConfig, EpochMetrics, TrainConfig, Trainer, METRICS_HEADER};
use flowlens_core::{EnhancerModel, Precision, Real};

use crate::checkpoint::{self, Checkpoint};
use crate::config::{RunConfig, Source};
use crate::dataset::{build_dataset, Dataset, DatasetSpec};
use crate::error::{CliError, Result};
use crate::eval::{self, EVAL_HEADER, SWEEP_HEADER};
use crate::{fmap, fsutil, pgm, selftest};

pub const RECOMMENDED_TAU: f64 = 0.8;
pub const METRICS_FILE: &str = "metrics.csv";
pub const FINAL_CHECKPOINT: &str = "final.fckp";

#[derive(Debug, Parser)]
#[command(
    name = "flowlens",
    version,
    about = "Conditional normalizing-flow enhancer for super-resolved MRSI maps"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic phantom dataset.
    Synth(SynthArgs),
    /// Train an enhancer on a dataset.
    Train(TrainArgs),
    /// Enhance one sample.
    Enhance(EnhanceArgs),
    /// Score the test split over a list of temperatures.
    Sweep(SweepArgs),
    /// Pixelwise mean and standard deviation over many enhancements.
    Uncertainty(UncertaintyArgs),
    /// Per-sample PSNR, SSIM and likelihood on the test split.
    Eval(EvalArgs),
    /// Run the built-in oracle checks.
    Selftest(SelftestArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_name = "N")]
    pub n_train: Option<usize>,
    #[arg(long, value_name = "N")]
    pub n_val: Option<usize>,
    #[arg(long, value_name = "N")]
    pub n_test: Option<usize>,
    /// Side length of the maps (32 or 64).
    #[arg(long)]
    pub size: Option<usize>,
    /// Side length of the low-resolution measurement (default: size / 4).
    #[arg(long)]
    pub low_size: Option<usize>,
    /// Overwrite an existing dataset directory.
    #[arg(long)]
    pub force: bool,
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Ablation {
    #[value(name = "mri_prior")]
    MriPrior,
    #[value(name = "cond_base")]
    CondBase,
    #[value(name = "guide")]
    Guide,
    #[value(name = "dc")]
    Dc,
}

impl Ablation {
    fn key(self) -> &'static str {
        match self {
            Ablation::MriPrior => "mri_prior",
            Ablation::CondBase => "cond_base",
            Ablation::Guide => "guide",
            Ablation::Dc => "dc",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    Desk,
    Full,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_name = "DIR")]
    pub data: Option<PathBuf>,
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Remove one design element; repeatable.
    #[arg(long, value_enum)]
    pub ablate: Vec<Ablation>,
    /// Architecture and schedule defaults.
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Floating-point precision in bits (32 or 64).
    #[arg(long)]
    pub precision: Option<u32>,
    #[arg(long, value_name = "EPOCHS")]
    pub checkpoint_every: Option<usize>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long, value_name = "FILE")]
    pub resume: Option<PathBuf>,
    /// Resolve and write the configuration, then stop before training.
    #[arg(long)]
    pub dry_run: bool,
}

#[derive(Debug, Args)]
pub struct EnhanceArgs {
    #[arg(long, value_name = "FILE")]
    pub ckpt: Option<PathBuf>,
    /// Sample as DATASET_DIR:INDEX (index defaults to 0).
    #[arg(long, value_name = "SAMPLE")]
    pub input: Option<String>,
    /// Sampling temperature; 0.8 is the recommended setting, 0 gives the
    /// deterministic mode.
    #[arg(long, allow_negative_numbers = true)]
    pub tau: Option<f64>,
    /// Required whenever tau > 0.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long, value_name = "FILE")]
    pub ckpt: Option<PathBuf>,
    #[arg(long, value_name = "DIR")]
    pub data: Option<PathBuf>,
    /// Comma-separated temperatures.
    #[arg(long)]
    pub taus: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output CSV.
    #[arg(long, value_name = "CSV")]
    pub out: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct UncertaintyArgs {
    #[arg(long, value_name = "FILE")]
    pub ckpt: Option<PathBuf>,
    /// Sample as DATASET_DIR:INDEX (index defaults to 0).
    #[arg(long, value_name = "SAMPLE")]
    pub input: Option<String>,
    /// Sampling temperature (recommended 0.8).
    #[arg(long, allow_negative_numbers = true)]
    pub tau: Option<f64>,
    /// Number of enhancements (default 100).
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, value_name = "FILE")]
    pub ckpt: Option<PathBuf>,
    #[arg(long, value_name = "DIR")]
    pub data: Option<PathBuf>,
    /// Sampling temperature (recommended 0.8).
    #[arg(long, allow_negative_numbers = true)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_name = "CSV")]
    pub out: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SelftestArgs {
    /// Precision of the invertibility check (32 or 64).
    #[arg(long, default_value_t = 64)]
    pub precision: u32,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Enhance(a) => enhance(a),
        Command::Sweep(a) => sweep(a),
        Command::Uncertainty(a) => uncertainty(a),
        Command::Eval(a) => evaluate(a),
        Command::Selftest(a) => selftest_cmd(a),
    }
}

fn precision_from_bits(bits: u32) -> Result<Precision> {
    match bits {
        32 => Ok(Precision::F32),
        64 => Ok(Precision::F64),
        b => Err(CliError::Usage(format!(
            "unsupported precision {b}; use 32 or 64"
        ))),
    }
}

/// Prints the resolved configuration and writes it to `dir`.
fn announce(rc: &RunConfig, dir: &Path) -> Result<()> {
    rc.finish()?;
    print!("{}", rc.render());
    rc.write(dir)?;
    Ok(())
}

fn parent_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn write_csv(path: &Path, header: &str, rows: impl IntoIterator<Item = String>) -> Result<()> {
    let mut text = format!("{header}\n");
    for r in rows {
        text.push_str(&r);
        text.push('\n');
    }
    fsutil::write_atomic(path, text.as_bytes())
}

// ---- synth -------------------------------------------------------------

fn synth(a: SynthArgs) -> Result<()> {
    let mut rc = RunConfig::new("synth", a.config.as_deref())?;
    let out = rc.path("out", a.out, "--out")?;
    let seed = rc.seed(a.seed)?.unwrap_or(0);
    if !rc.values.iter().any(|(k, _, _)| k == "seed") {
        rc.record("seed", &seed, Source::Default);
    }
    let defaults = SplitCounts::default();
    let counts = SplitCounts {
        train: rc.get("n_train", a.n_train, defaults.train)?,
        val: rc.get("n_val", a.n_val, defaults.val)?,
        test: rc.get("n_test", a.n_test, defaults.test)?,
    };
    let size = rc.get("size", a.size, 32)?;
    if !SUPPORTED_SIZES.contains(&size) {
        let list: Vec<String> = SUPPORTED_SIZES.iter().map(|s| s.to_string()).collect();
        return Err(CliError::Usage(format!(
            "unsupported --size {size}; supported sizes: {}",
            list.join(", ")
        )));
    }
    let low_size = rc.get("low_size", a.low_size, size / DEFAULT_RATIO)?;
    if counts.train == 0 || counts.val == 0 || counts.test == 0 {
        return Err(CliError::Usage(
            "every split needs at least one sample".into(),
        ));
    }
    rc.finish()?;
    if out.exists()
        && !a.force
        && std::fs::read_dir(&out)
            .map_err(|e| CliError::io(&out, e))?
            .next()
            .is_some()
    {
        return Err(CliError::Usage(format!(
            "output directory {} exists and is not empty (pass --force to overwrite)",
            out.display()
        )));
    }
    let spec = DatasetSpec {
        master_seed: seed,
        counts,
        size,
        low_size,
    };
    std::fs::create_dir_all(&out).map_err(|e| CliError::io(&out, e))?;
    announce(&rc, &out)?;
    // Emptiness was checked above; only stale dataset files remain to clear.
    let manifest = build_dataset(&out, &spec, true)?;
    println!(
        "wrote {} records to {} (train {}, val {}, test {}; {size}x{size} maps, {low_size}x{low_size} measurements)",
        manifest.entries.len(),
        out.display(),
        manifest.count(Split::Train),
        manifest.count(Split::Val),
        manifest.count(Split::Test),
    );
    Ok(())
}

// ---- train -------------------------------------------------------------

struct TrainPlan {
    config: TrainConfig,
    precision: Precision,
    data: Dataset,
    out: PathBuf,
    resume: Option<PathBuf>,
}

fn resolve_train(a: TrainArgs) -> Result<(RunConfig, TrainPlan)> {
    let mut rc = RunConfig::new("train", a.config.as_deref())?;
    let data_dir = rc.path("data", a.data, "--data")?;
    let out = rc.path("out", a.out, "--out")?;
    let data = Dataset::open(&data_dir)?;
    let resume = match rc.get_opt::<PathBuf>("resume", a.resume)? {
        Some(p) => {
            let abs = std::path::absolute(&p).map_err(|e| CliError::io(&p, e))?;
            rc.record("resume", &abs, Source::Flag);
            Some(abs)
        }
        None => None,
    };
    if let Some(path) = &resume {
        // The checkpoint fixes everything except the epoch budget.
        let precision = checkpoint::peek_precision(path)?;
        let mut config = match precision {
            Precision::F32 => Checkpoint::<f32>::load(path)?.config,
            Precision::F64 => Checkpoint::<f64>::load(path)?.config,
        };
        config.epochs = rc.get("epochs", a.epochs, config.epochs)?;
        rc.record("precision", &precision.bits().to_string(), Source::Derived);
        echo_train_config(&mut rc, &config);
        return Ok((
            rc,
            TrainPlan {
                config,
                precision,
                data,
                out,
                resume,
            },
        ));
    }
    let preset = rc.get::<String>(
        "preset",
        a.preset.map(|p| match p {
            Preset::Desk => "desk".into(),
            Preset::Full => "full".into(),
        }),
        "desk".into(),
    )?;
    let base = match preset.as_str() {
        "desk" => TrainConfig::desk(),
        "full" => TrainConfig::full(),
        other => {
            return Err(CliError::Usage(format!(
                "unknown preset `{other}`; use desk or full"
            )))
        }
    };
    let precision = precision_from_bits(rc.get("precision", a.precision, 32)?)?;
    let m = &base.model;
    let size = rc.get("size", None, data.manifest.size)?;
    let low_size = rc.get("low_size", None, data.manifest.low_size)?;
    if size != data.manifest.size || low_size != data.manifest.low_size {
        return Err(CliError::Data(format!(
            "dataset holds {}x{} maps with {}x{} measurements, config asks for {size}x{size} / {low_size}x{low_size}",
            data.manifest.size, data.manifest.size, data.manifest.low_size, data.manifest.low_size
        )));
    }
    let mut model = ModelConfig {
        size,
        scales: rc.get("scales", None, m.scales)?,
        steps: rc.get("steps", None, m.steps)?,
        flow1_steps: rc.get("flow1_steps", None, m.flow1_steps)?,
        flow1_injector: rc.get("flow1_injector", None, m.flow1_injector)?,
        hidden: rc.get("hidden", None, m.hidden)?,
        cond_width: rc.get("cond_width", None, m.cond_width)?,
        cond_features: rc.get("cond_features", None, m.cond_features)?,
        residual_blocks: rc.get("residual_blocks", None, m.residual_blocks)?,
        mri_prior: rc.get("mri_prior", None, m.mri_prior)?,
        cond_base: rc.get("cond_base", None, m.cond_base)?,
    };
    let mut guide = rc.get("guide", None, base.guide)?;
    let mut dc = rc.get("dc", None, base.dc)?;
    for ab in &a.ablate {
        match ab {
            Ablation::MriPrior => model.mri_prior = false,
            Ablation::CondBase => model.cond_base = false,
            Ablation::Guide => guide = false,
            Ablation::Dc => dc = false,
        }
        rc.record(ab.key(), &false, Source::Flag);
    }
    let seed = match rc.seed(a.seed)? {
        Some(s) => s,
        None => {
            rc.record("seed", &base.seed, Source::Default);
            base.seed
        }
    };
    let config = TrainConfig {
        model,
        low_size,
        adam: AdamConfig {
            lr: rc.get("lr", a.lr, base.adam.lr)?,
            beta1: rc.get("beta1", None, base.adam.beta1)?,
            beta2: rc.get("beta2", None, base.adam.beta2)?,
            eps: rc.get("eps", None, base.adam.eps)?,
        },
        batch_size: rc.get("batch_size", a.batch_size, base.batch_size)?,
        epochs: rc.get("epochs", a.epochs, base.epochs)?,
        weights: LossWeights {
            alpha: rc.get("alpha", None, base.weights.alpha)?,
            guide: rc.get("lambda_guide", None, base.weights.guide)?,
            dc: rc.get("lambda_dc", None, base.weights.dc)?,
        },
        guide,
        dc,
        seed,
        clip_norm: rc.get("clip_norm", None, base.clip_norm)?,
        dequantization: rc.get("dequantization", None, base.dequantization)?,
        augment: rc.get("augment", None, base.augment)?,
        lr_milestones: rc.get("lr_milestones", None, base.lr_milestones.clone())?,
        checkpoint_every: rc.get(
            "checkpoint_every",
            a.checkpoint_every,
            base.checkpoint_every,
        )?,
    };
    config
        .validate()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    Ok((
        rc,
        TrainPlan {
            config,
            precision,
            data,
            out,
            resume,
        },
    ))
}

/// Records the settings a resumed run inherits from its checkpoint.
fn echo_train_config(rc: &mut RunConfig, c: &TrainConfig) {
    let m = &c.model;
    let d = Source::Derived;
    rc.record("size", &m.size, d);
    rc.record("low_size", &c.low_size, d);
    rc.record("scales", &m.scales, d);
    rc.record("steps", &m.steps, d);
    rc.record("flow1_steps", &m.flow1_steps, d);
    rc.record("flow1_injector", &m.flow1_injector, d);
    rc.record("hidden", &m.hidden, d);
    rc.record("cond_width", &m.cond_width, d);
    rc.record("cond_features", &m.cond_features, d);
    rc.record("residual_blocks", &m.residual_blocks, d);
    rc.record("mri_prior", &m.mri_prior, d);
    rc.record("cond_base", &m.cond_base, d);
    rc.record("guide", &c.guide, d);
    rc.record("dc", &c.dc, d);
    rc.record("lr", &c.adam.lr, d);
    rc.record("batch_size", &c.batch_size, d);
    rc.record("alpha", &c.weights.alpha, d);
    rc.record("lambda_guide", &c.weights.guide, d);
    rc.record("lambda_dc", &c.weights.dc, d);
    rc.record("seed", &c.seed, d);
}

fn train(a: TrainArgs) -> Result<()> {
    let dry_run = a.dry_run;
    let (rc, plan) = resolve_train(a)?;
    std::fs::create_dir_all(&plan.out).map_err(|e| CliError::io(&plan.out, e))?;
    announce(&rc, &plan.out)?;
    if dry_run {
        println!("dry run: configuration written, no training performed");
        return Ok(());
    }
    match plan.precision {
        Precision::F32 => train_with::<f32>(plan),
        Precision::F64 => train_with::<f64>(plan),
    }
}

fn checkpoint_name(epoch: usize) -> String {
    format!("checkpoint_{epoch:04}.fckp")
}

/// Metrics rows of an earlier run up to and including `epoch`.
fn previous_rows(path: &Path, epoch: usize) -> Result<Vec<String>> {
    if !path.exists() || epoch == 0 {
        return Ok(Vec::new());
    }
    let text = fsutil::read_to_string(path)?;
    Ok(text
        .lines()
        .skip(1)
        .filter(|l| {
            l.split(',')
                .next()
                .and_then(|e| e.parse::<usize>().ok())
                .is_some_and(|e| e <= epoch)
        })
        .map(str::to_string)
        .collect())
}

fn train_with<T: Real>(plan: TrainPlan) -> Result<()> {
    let train_set: Vec<SampleRecord<T>> = plan.data.load_split(Split::Train)?;
    let mut trainer = match &plan.resume {
        Some(path) => {
            let ck = Checkpoint::<T>::load(path)?;
            let mut config = ck.config;
            config.epochs = plan.config.epochs;
            Trainer::resume(config, ck.model, ck.adam, ck.progress)?
        }
        None => Trainer::<T>::new(plan.config.clone())?,
    };
    let metrics_path = plan.out.join(METRICS_FILE);
    let mut rows = previous_rows(&metrics_path, trainer.progress.epoch)?;
    let mut last_good: Option<PathBuf> = plan.resume.clone();
    let epochs = trainer.config.epochs;
    let every = trainer.config.checkpoint_every;
    let start = Instant::now();
    while trainer.progress.epoch < epochs {
        let m: EpochMetrics = trainer.train_epoch(&train_set).map_err(|e| {
            let reference = last_good
                .as_ref()
                .map_or("none written yet".to_string(), |p| p.display().to_string());
            let msg = format!(
                "{e} in epoch {}; last good checkpoint: {reference}",
                trainer.progress.epoch + 1
            );
            if e.is_numerical() {
                CliError::Numerical(msg)
            } else {
                CliError::Data(msg)
            }
        })?;
        rows.push(m.csv_row());
        write_csv(&metrics_path, METRICS_HEADER, rows.iter().cloned())?;
        println!(
            "epoch {}/{epochs}: nll {:.4} nats/px, guide {:.4}, dc {:.5}, total {:.4}, clipped {}, skipped {} ({:.1}s)",
            m.epoch,
            m.nll,
            m.guide,
            m.dc,
            m.total,
            m.grad_clip_events,
            m.skipped_steps,
            start.elapsed().as_secs_f64()
        );
        if every > 0 && m.epoch.is_multiple_of(every) && m.epoch < epochs {
            let path = plan.out.join(checkpoint_name(m.epoch));
            snapshot(&trainer).save(&path)?;
            last_good = Some(path);
        }
    }
    let path = plan.out.join(FINAL_CHECKPOINT);
    snapshot(&trainer).save(&path)?;
    println!("final checkpoint: {}", path.display());
    Ok(())
}

fn snapshot<T: Real>(t: &Trainer<T>) -> Checkpoint<T> {
    Checkpoint {
        config: t.config.clone(),
        model: t.model.clone(),
        adam: t.adam.clone(),
        progress: t.progress,
    }
}

// ---- inference helpers -------------------------------------------------

fn load_model<T: Real>(path: &Path) -> Result<EnhancerModel<T>> {
    let model = Checkpoint::<T>::load(path)?.model;
    if !model.is_initialized() {
        return Err(CliError::Data(format!(
            "{} holds an untrained model",
            path.display()
        )));
    }
    Ok(model)
}

/// `DIR` or `DIR:INDEX`.
pub fn parse_sample(spec: &str) -> (PathBuf, usize) {
    if let Some((dir, idx)) = spec.rsplit_once(':') {
        if let Ok(i) = idx.parse() {
            return (PathBuf::from(dir), i);
        }
    }
    (PathBuf::from(spec), 0)
}

fn load_sample<T: Real>(dir: &Path, index: usize, size: usize) -> Result<SampleRecord<T>> {
    let data = Dataset::open(dir)?;
    let entry = data
        .manifest
        .entries
        .get(index)
        .ok_or_else(|| CliError::Data(format!("{} has no sample {index}", dir.display())))?;
    if data.manifest.size != size {
        return Err(CliError::Data(format!(
            "sample maps are {}x{}, the model expects {size}x{size}",
            data.manifest.size, data.manifest.size
        )));
    }
    data.load(entry)
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau >= 0.0) || !tau.is_finite() {
        return Err(CliError::Usage(format!(
            "temperature must be a finite value >= 0, got {tau}"
        )));
    }
    if tau > flowlens_core::condition::MAX_TEMPERATURE {
        return Err(CliError::Usage(format!(
            "temperature {tau} exceeds the supported maximum {}",
            flowlens_core::condition::MAX_TEMPERATURE
        )));
    }
    Ok(())
}

/// Seed contract: sampling at `tau > 0` needs an explicit seed.
fn sampling_seed(rc: &mut RunConfig, flag: Option<u64>, needs: bool) -> Result<u64> {
    match rc.seed(flag)? {
        Some(s) => Ok(s),
        None if needs => Err(CliError::Usage(format!(
            "sampling at tau > 0 requires --seed (or `seed` in the config file, or {})",
            crate::config::SEED_ENV
        ))),
        None => Ok(0),
    }
}

macro_rules! by_precision {
    ($ckpt:expr, $f:ident ( $($arg:expr),* )) => {
        match checkpoint::peek_precision($ckpt)? {
            Precision::F32 => $f::<f32>($($arg),*),
            Precision::F64 => $f::<f64>($($arg),*),
        }
    };
}

// ---- enhance -----------------------------------------------------------

struct SampleJob {
    ckpt: PathBuf,
    dir: PathBuf,
    index: usize,
    tau: f64,
    seed: u64,
    out: PathBuf,
}

fn enhance(a: EnhanceArgs) -> Result<()> {
    let mut rc = RunConfig::new("enhance", a.config.as_deref())?;
    let ckpt = rc.path("ckpt", a.ckpt, "--ckpt")?;
    let input: String = rc.require("input", a.input, "--input")?;
    let tau = rc.get("tau", a.tau, RECOMMENDED_TAU)?;
    check_tau(tau)?;
    let seed = sampling_seed(&mut rc, a.seed, tau > 0.0)?;
    let out = rc.path("out", a.out, "--out")?;
    let (dir, index) = parse_sample(&input);
    let dir = std::path::absolute(&dir).map_err(|e| CliError::io(&dir, e))?;
    rc.record(
        "input",
        &format!("{}:{index}", dir.display()),
        Source::Derived,
    );
    std::fs::create_dir_all(&out).map_err(|e| CliError::io(&out, e))?;
    announce(&rc, &out)?;
    let job = SampleJob {
        ckpt,
        dir,
        index,
        tau,
        seed,
        out,
    };
    by_precision!(&job.ckpt, enhance_with(&job))
}

fn enhance_with<T: Real>(job: &SampleJob) -> Result<()> {
    let model = load_model::<T>(&job.ckpt)?;
    let rec = load_sample::<T>(&job.dir, job.index, model.config().size)?;
    let mut rng =
        flowlens_core::Rng::stream(job.seed, flowlens_core::rng::domain::EVAL, job.index as u64);
    let x = model.enhance(&rec.condition(), job.tau, &mut rng)?;
    if let Some(i) = x.first_non_finite() {
        return Err(CliError::Numerical(format!(
            "enhanced map is non-finite at pixel {i}"
        )));
    }
    let map = job.out.join("H_enh.fmap");
    fmap::write(&map, &x)?;
    pgm::write(&job.out.join("H_enh.pgm"), &x, 0.0, 1.0)?;
    let s = eval::score(&rec, &x)?;
    println!(
        "wrote {} (psnr {:.2} dB, ssim {:.4}, dc {:.5}, hf ratio {:.5})",
        map.display(),
        s.psnr,
        s.ssim,
        s.dc,
        s.hf_ratio
    );
    Ok(())
}

// ---- uncertainty -------------------------------------------------------

fn uncertainty(a: UncertaintyArgs) -> Result<()> {
    let mut rc = RunConfig::new("uncertainty", a.config.as_deref())?;
    let ckpt = rc.path("ckpt", a.ckpt, "--ckpt")?;
    let input: String = rc.require("input", a.input, "--input")?;
    let tau = rc.get("tau", a.tau, RECOMMENDED_TAU)?;
    check_tau(tau)?;
    let n = rc.get("n", a.n, 100usize)?;
    if n < 2 {
        return Err(CliError::Usage(format!("--n must be at least 2, got {n}")));
    }
    let seed = sampling_seed(&mut rc, a.seed, tau > 0.0)?;
    let out = rc.path("out", a.out, "--out")?;
    let (dir, index) = parse_sample(&input);
    let dir = std::path::absolute(&dir).map_err(|e| CliError::io(&dir, e))?;
    rc.record(
        "input",
        &format!("{}:{index}", dir.display()),
        Source::Derived,
    );
    std::fs::create_dir_all(&out).map_err(|e| CliError::io(&out, e))?;
    announce(&rc, &out)?;
    let job = SampleJob {
        ckpt,
        dir,
        index,
        tau,
        seed,
        out,
    };
    by_precision!(&job.ckpt, uncertainty_with(&job, n))
}

fn uncertainty_with<T: Real>(job: &SampleJob, n: usize) -> Result<()> {
    let model = load_model::<T>(&job.ckpt)?;
    let rec = load_sample::<T>(&job.dir, job.index, model.config().size)?;
    let (mean, std) = model.uncertainty(&rec.condition(), job.tau, n, job.seed)?;
    fmap::write(&job.out.join("mean.fmap"), &mean)?;
    fmap::write(&job.out.join("std.fmap"), &std)?;
    pgm::write(&job.out.join("mean.pgm"), &mean, 0.0, 1.0)?;
    let peak = std.data().iter().fold(0.0f64, |m, v| m.max(v.f64()));
    pgm::write(&job.out.join("std.pgm"), &std, 0.0, peak)?;
    let avg = std.data().iter().map(|v| v.f64()).sum::<f64>() / std.len() as f64;
    println!(
        "wrote mean/std maps to {} (mean std {avg:.3e}, max std {peak:.3e})",
        job.out.display()
    );
    Ok(())
}

// ---- sweep / eval ------------------------------------------------------

struct SplitJob {
    ckpt: PathBuf,
    data: PathBuf,
    seed: u64,
    out: PathBuf,
}

fn sweep(a: SweepArgs) -> Result<()> {
    let mut rc = RunConfig::new("sweep", a.config.as_deref())?;
    let ckpt = rc.path("ckpt", a.ckpt, "--ckpt")?;
    let data = rc.path("data", a.data, "--data")?;
    let taus: Vec<f64> = match a.taus {
        Some(s) => {
            let v = crate::config::ConfigValue::parse_value(&s)
                .map_err(|e| CliError::Usage(format!("--taus {e}")))?;
            rc.get("taus", Some(v), Vec::new())?
        }
        None => rc.get("taus", None, (0..=10).map(|i| i as f64 / 10.0).collect())?,
    };
    if taus.is_empty() {
        return Err(CliError::Usage("the temperature list is empty".into()));
    }
    for &t in &taus {
        check_tau(t)?;
    }
    let seed = sampling_seed(&mut rc, a.seed, taus.iter().any(|&t| t > 0.0))?;
    let out = rc.path("out", a.out, "--out")?;
    announce(&rc, &parent_dir(&out))?;
    let job = SplitJob {
        ckpt,
        data,
        seed,
        out,
    };
    by_precision!(&job.ckpt, sweep_with(&job, &taus))
}

fn sweep_with<T: Real>(job: &SplitJob, taus: &[f64]) -> Result<()> {
    let model = load_model::<T>(&job.ckpt)?;
    let test = Dataset::open(&job.data)?.load_split::<T>(Split::Test)?;
    let rows = eval::sweep(&model, &test, taus, job.seed)?;
    for r in &rows {
        println!(
            "tau {:.2}: psnr {:.3}, ssim {:.4}, dc {:.5}, hf ratio {:.5}",
            r.tau, r.scores.psnr, r.scores.ssim, r.scores.dc, r.scores.hf_ratio
        );
    }
    write_csv(&job.out, SWEEP_HEADER, rows.iter().map(|r| r.csv_row()))
}

fn evaluate(a: EvalArgs) -> Result<()> {
    let mut rc = RunConfig::new("eval", a.config.as_deref())?;
    let ckpt = rc.path("ckpt", a.ckpt, "--ckpt")?;
    let data = rc.path("data", a.data, "--data")?;
    let tau = rc.get("tau", a.tau, RECOMMENDED_TAU)?;
    check_tau(tau)?;
    let seed = sampling_seed(&mut rc, a.seed, tau > 0.0)?;
    let out = rc.path("out", a.out, "--out")?;
    announce(&rc, &parent_dir(&out))?;
    let job = SplitJob {
        ckpt,
        data,
        seed,
        out,
    };
    by_precision!(&job.ckpt, eval_with(&job, tau))
}

fn eval_with<T: Real>(job: &SplitJob, tau: f64) -> Result<()> {
    let model = load_model::<T>(&job.ckpt)?;
    let data = Dataset::open(&job.data)?;
    let test: Vec<(usize, SampleRecord<T>)> = data
        .entries(Split::Test)
        .map(|e| Ok((e.index, data.load(e)?)))
        .collect::<Result<_>>()?;
    let (rows, mean) = eval::evaluate(&model, &test, tau, job.seed)?;
    let mut lines: Vec<String> = rows
        .iter()
        .map(|r| format!("{},{},{},{},{}", r.index, r.seed, r.psnr, r.ssim, r.nll))
        .collect();
    lines.push(format!("mean,,{},{},{}", mean.psnr, mean.ssim, mean.nll));
    write_csv(&job.out, EVAL_HEADER, lines)?;
    println!(
        "{} test samples at tau {tau}: psnr {:.3} dB, ssim {:.4}, nll {:.4} nats/px",
        rows.len(),
        mean.psnr,
        mean.ssim,
        mean.nll
    );
    Ok(())
}

// ---- selftest ----------------------------------------------------------

fn selftest_cmd(a: SelftestArgs) -> Result<()> {
    let precision = precision_from_bits(a.precision)?;
    let results = selftest::run(precision);
    for r in &results {
        println!(
            "{} {:<26} {:>7.2}s  {}",
            if r.passed { "PASS" } else { "FAIL" },
            r.name,
            r.seconds,
            r.detail
        );
    }
    let failed: Vec<&str> = results
        .iter()
        .filter(|r| !r.passed)
        .map(|r| r.name)
        .collect();
    if failed.is_empty() {
        println!("all {} checks passed", results.len());
        Ok(())
    } else {
        Err(CliError::Numerical(format!(
            "selftest failed: {}",
            failed.join(", ")
        )))
    }
}
