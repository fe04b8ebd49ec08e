//! The `hst` command line.
//!
//! Every command writes its report to the supplied writer so it can be
//! driven in-process; `main` only maps errors to exit codes.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::{generate, Dataset, SyntheticSpec};
use crate::diagnostics::{
    compare_ln_tuning, complexity_csv, cosine_similarity_per_layer, cross_attention_profile, loglog_slope,
    profile_model, self_attention_profile, TrialBudget,
};
use crate::error::{HstError, Result};
use crate::model::HstModel;
use crate::trainer::{check_hash, evaluate, grad_check, Trainer};

/// Name of the effective configuration written next to training output.
pub const CONFIG_FILE: &str = "config.toml";
pub const METRICS_FILE: &str = "metrics.log";
pub const REPORT_FILE: &str = "param_report.txt";
pub const FINAL_CHECKPOINT: &str = "final.hstc";

#[derive(Debug, Parser)]
#[command(name = "hst", version, about = "Hierarchical side-tuning on a frozen ViT")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train from a config, writing metrics, checkpoints and a parameter report to --out.
    Train(TrainArgs),
    /// Accuracy of a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Parameter manifest and report of a checkpoint.
    Inspect(InspectArgs),
    /// Diagnostics tables.
    Diag(DiagArgs),
    /// Write the synthetic train and test splits as HSTD files.
    GenerateData(GenerateArgs),
    /// Op counts, wall time and tape memory of a classification forward.
    Profile(ProfileArgs),
    /// Finite-difference check of the analytic gradient in float64.
    GradCheck(GradCheckArgs),
    /// Print the effective configuration (defaults filled in).
    PrintConfig(ConfigArg),
}

#[derive(Debug, Args)]
pub struct ConfigArg {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides train.seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// HSTD training set; the synthetic train split otherwise.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Resume from this checkpoint.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Architecture of the checkpoint; defaults to config.toml beside it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// HSTD dataset; the synthetic test split otherwise.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum DiagKind {
    /// Per-layer cosine between meta outputs and the mean patch token.
    Cosine,
    /// Cosine curves of --before and --ckpt side by side.
    LnCompare,
    /// Wall time of side-block cross-attention against full self-attention.
    Complexity,
}

#[derive(Debug, Args)]
pub struct DiagArgs {
    pub which: DiagKind,
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// Earlier checkpoint for `ln-compare`.
    #[arg(long)]
    pub before: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Images used by the cosine diagnostics.
    #[arg(long, default_value_t = 64)]
    pub batch: usize,
    /// Timing repetitions per length for `complexity`.
    #[arg(long, default_value_t = 100)]
    pub trials: usize,
    /// Query lengths for `complexity`, comma-separated.
    #[arg(long, value_delimiter = ',', default_values_t = [256usize, 1024, 4096, 16384, 65536])]
    pub lengths: Vec<usize>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    /// Output directory for train.hstd and test.hstd.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct ProfileArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    #[arg(long, default_value_t = 100)]
    pub trials: usize,
    #[arg(long, default_value_t = 1)]
    pub batch: usize,
}

#[derive(Debug, Args)]
pub struct GradCheckArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    /// Number of trainable scalars to check.
    #[arg(long, default_value_t = 200)]
    pub subset: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Images in the checked batch.
    #[arg(long, default_value_t = 2)]
    pub batch: usize,
}

/// Relative error above which `grad-check` fails.
pub const GRAD_CHECK_TOLERANCE: f64 = 1e-3;

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

/// Config given explicitly, else the one saved beside the checkpoint.
fn config_for_checkpoint(config: Option<&Path>, ckpt: &Path) -> Result<RunConfig> {
    if let Some(p) = config {
        return RunConfig::load(p);
    }
    let beside = ckpt.parent().unwrap_or(Path::new(".")).join(CONFIG_FILE);
    if beside.exists() {
        return RunConfig::load(&beside);
    }
    Err(HstError::config(format!(
        "no --config given and no {CONFIG_FILE} beside {}",
        ckpt.display()
    )))
}

fn synthetic(cfg: &RunConfig, per_class: usize, seed: u64) -> Result<Dataset> {
    generate(&SyntheticSpec {
        num_classes: cfg.data.num_classes,
        samples_per_class: per_class,
        image_size: cfg.backbone.image_size,
        patch_size: cfg.backbone.patch_size,
        noise_std: cfg.data.noise_std,
        seed,
    })
}

/// Training split: `train.seed` drives generation.
pub fn train_split(cfg: &RunConfig) -> Result<Dataset> {
    if !cfg.data.train_path.is_empty() {
        return Dataset::read(Path::new(&cfg.data.train_path));
    }
    synthetic(cfg, cfg.data.train_per_class, cfg.train.seed)
}

/// Test split: generated from `train.seed + 1`.
pub fn test_split(cfg: &RunConfig) -> Result<Dataset> {
    if !cfg.data.test_path.is_empty() {
        return Dataset::read(Path::new(&cfg.data.test_path));
    }
    synthetic(cfg, cfg.data.test_per_class, cfg.train.seed.wrapping_add(1))
}

fn check_image_shape(cfg: &RunConfig, data: &Dataset) -> Result<()> {
    let s = cfg.backbone.image_size;
    if data.image_shape() != [3, s, s] {
        return Err(HstError::dimension(format!(
            "dataset images are {:?}, the model expects [3, {s}, {s}]",
            data.image_shape()
        )));
    }
    Ok(())
}

fn load_model(cfg: &RunConfig, ckpt: &Checkpoint) -> Result<HstModel<f32>> {
    let model_cfg = cfg.model();
    check_hash(&model_cfg, ckpt)?;
    let mut model = HstModel::new(&model_cfg, cfg.train.seed)?;
    ckpt.load_into(model.params_mut())?;
    model.apply_freeze_policy();
    Ok(model)
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::Train(a) => cmd_train(&a, out),
        Command::Eval(a) => cmd_eval(&a, out).map(|_| ()),
        Command::Inspect(a) => cmd_inspect(&a, out),
        Command::Diag(a) => cmd_diag(&a, out),
        Command::GenerateData(a) => cmd_generate(&a, out),
        Command::Profile(a) => cmd_profile(&a, out),
        Command::GradCheck(a) => cmd_grad_check(&a, out),
        Command::PrintConfig(a) => {
            write!(out, "{}", load_config(a.config.as_deref())?.to_toml())?;
            Ok(())
        }
    }
}

pub fn cmd_train(args: &TrainArgs, out: &mut dyn Write) -> Result<()> {
    let mut cfg = load_config(args.config.config.as_deref())?;
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    let data = match &args.dataset {
        Some(p) => Dataset::read(p)?,
        None => train_split(&cfg)?,
    };
    check_image_shape(&cfg, &data)?;
    fs::create_dir_all(&args.out)?;
    fs::write(args.out.join(CONFIG_FILE), cfg.to_toml())?;

    let model = HstModel::<f32>::new(&cfg.model(), cfg.train.seed)?;
    let mut trainer = Trainer::new(model, &cfg.train)?;
    let mut metrics = BufWriter::new(if args.ckpt.is_some() {
        fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(args.out.join(METRICS_FILE))?
    } else {
        fs::File::create(args.out.join(METRICS_FILE))?
    });
    if let Some(path) = &args.ckpt {
        let ck = Checkpoint::read(path)?;
        trainer.restore(&ck)?;
        writeln!(out, "resumed from {} at step {}", path.display(), ck.step)?;
    }
    let report = trainer.model.param_report();
    writeln!(out, "{report}")?;

    let every = cfg.train.checkpoint_every as u64;
    let dir = args.out.clone();
    trainer.fit(&data, cfg.train.epochs, |t, rec| {
        writeln!(metrics, "{rec}")?;
        metrics.flush()?;
        if every > 0 && rec.step % every == 0 {
            t.checkpoint().write(&dir.join(format!("ckpt-{:08}.hstc", rec.step)))?;
        }
        Ok(())
    })?;
    trainer.checkpoint().write(&args.out.join(FINAL_CHECKPOINT))?;
    fs::write(args.out.join(REPORT_FILE), format!("{report}\n"))?;
    let acc = evaluate(&trainer.model, &data, 200)?;
    writeln!(out, "step={} train_accuracy={acc:.6}", trainer.step_count())?;
    Ok(())
}

/// Prints and returns the accuracy of `--ckpt` on the chosen dataset.
pub fn cmd_eval(args: &EvalArgs, out: &mut dyn Write) -> Result<f64> {
    let cfg = config_for_checkpoint(args.config.as_deref(), &args.ckpt)?;
    let ck = Checkpoint::read(&args.ckpt)?;
    let model = load_model(&cfg, &ck)?;
    let data = match &args.dataset {
        Some(p) => Dataset::read(p)?,
        None => test_split(&cfg)?,
    };
    check_image_shape(&cfg, &data)?;
    let acc = evaluate(&model, &data, 200)?;
    let correct = (acc * data.len() as f64).round() as usize;
    writeln!(out, "accuracy={acc:.6} correct={correct} total={}", data.len())?;
    Ok(acc)
}

pub fn cmd_inspect(args: &InspectArgs, out: &mut dyn Write) -> Result<()> {
    let ck = Checkpoint::read(&args.ckpt)?;
    let cfg = config_for_checkpoint(args.config.as_deref(), &args.ckpt)?;
    let model = load_model(&cfg, &ck)?;
    writeln!(out, "config_hash={:016x}", ck.config_hash)?;
    writeln!(out, "step={}", ck.step)?;
    writeln!(out, "name,dtype,shape,numel,trainable")?;
    for (name, t) in ck.params() {
        let p = model
            .params()
            .by_name(name)
            .expect("loaded checkpoint matches the model");
        let shape: Vec<String> = t.shape().iter().map(|e| e.to_string()).collect();
        writeln!(
            out,
            "{name},{},{},{},{}",
            t.dtype(),
            shape.join("x"),
            t.numel(),
            p.trainable()
        )?;
    }
    writeln!(out, "{}", model.param_report())?;
    Ok(())
}

fn diag_images(cfg: &RunConfig, dataset: Option<&Path>, batch: usize) -> Result<crate::Tensor<f32>> {
    let data = match dataset {
        Some(p) => Dataset::read(p)?,
        None => test_split(cfg)?,
    };
    check_image_shape(cfg, &data)?;
    let idx: Vec<usize> = (0..batch.clamp(1, data.len())).collect();
    Ok(data.batch::<f32>(&idx).0)
}

fn require<'a>(p: &'a Option<PathBuf>, flag: &str, which: &str) -> Result<&'a Path> {
    p.as_deref()
        .ok_or_else(|| HstError::config(format!("diag {which} needs {flag}")))
}

pub fn cmd_diag(args: &DiagArgs, out: &mut dyn Write) -> Result<()> {
    match args.which {
        DiagKind::Cosine => {
            let path = require(&args.ckpt, "--ckpt", "cosine")?;
            let cfg = config_for_checkpoint(args.config.as_deref(), path)?;
            let model = load_model(&cfg, &Checkpoint::read(path)?)?;
            let images = diag_images(&cfg, args.dataset.as_deref(), args.batch)?;
            let curve = cosine_similarity_per_layer(&model, &images)?;
            writeln!(out, "layer,cosine")?;
            for (i, c) in curve.iter().enumerate() {
                writeln!(out, "{i},{c:.9}")?;
            }
        }
        DiagKind::LnCompare => {
            let after = require(&args.ckpt, "--ckpt", "ln-compare")?;
            let before = require(&args.before, "--before", "ln-compare")?;
            let cfg = config_for_checkpoint(args.config.as_deref(), after)?;
            let after_model = load_model(&cfg, &Checkpoint::read(after)?)?;
            let before_ck = Checkpoint::read(before)?;
            let before_cfg = config_for_checkpoint(None, before).unwrap_or_else(|_| cfg.clone());
            let before_model = load_model(&before_cfg, &before_ck)?;
            let images = diag_images(&cfg, args.dataset.as_deref(), args.batch)?;
            write!(
                out,
                "{}",
                compare_ln_tuning(&before_model, &after_model, &images)?.to_csv()
            )?;
        }
        DiagKind::Complexity => {
            let cfg = load_config(args.config.as_deref())?;
            let d = cfg.hsn.stage_dims[0];
            let m = cfg.model().meta_global_len().max(1);
            let budget = TrialBudget {
                trials: args.trials,
                max_secs: 5.0,
            };
            let linear = cross_attention_profile(&args.lengths, d, m, budget)?;
            let naive = self_attention_profile(&args.lengths, d, budget)?;
            writeln!(out, "# side-block cross-attention, d={d}, M={m}")?;
            write!(out, "{}", complexity_csv(&linear))?;
            writeln!(out, "# full self-attention, d={d}")?;
            write!(out, "{}", complexity_csv(&naive))?;
            writeln!(out, "cross_attention_slope={:.4}", loglog_slope(&linear))?;
            writeln!(out, "self_attention_slope={:.4}", loglog_slope(&naive))?;
        }
    }
    Ok(())
}

pub fn cmd_generate(args: &GenerateArgs, out: &mut dyn Write) -> Result<()> {
    let mut cfg = load_config(args.config.config.as_deref())?;
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    cfg.data.train_path.clear();
    cfg.data.test_path.clear();
    fs::create_dir_all(&args.out)?;
    for (name, data) in [("train.hstd", train_split(&cfg)?), ("test.hstd", test_split(&cfg)?)] {
        let path = args.out.join(name);
        data.write(&path)?;
        writeln!(out, "wrote {} ({} images)", path.display(), data.len())?;
    }
    Ok(())
}

pub fn cmd_profile(args: &ProfileArgs, out: &mut dyn Write) -> Result<()> {
    let cfg = load_config(args.config.config.as_deref())?;
    let model = HstModel::<f32>::new(&cfg.model(), cfg.train.seed)?;
    let report = profile_model(&model, args.batch, args.trials)?;
    writeln!(out, "{report}")?;
    write!(out, "{}", report.to_csv())?;
    Ok(())
}

pub fn cmd_grad_check(args: &GradCheckArgs, out: &mut dyn Write) -> Result<()> {
    let mut cfg = load_config(args.config.config.as_deref())?;
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    let mut model = HstModel::<f64>::new(&cfg.model(), cfg.train.seed)?;
    model.apply_freeze_policy();
    let data = train_split(&cfg)?;
    let idx: Vec<usize> = (0..args.batch.clamp(1, data.len())).collect();
    let (images, labels) = data.batch::<f64>(&idx);
    let report = grad_check(&model, &images, &labels, args.subset, cfg.train.seed)?;
    let worst = report.max_rel_err();
    writeln!(
        out,
        "checked={} no_gradient={}",
        report.checked(),
        report.entries.len() - report.checked()
    )?;
    writeln!(out, "max_rel_err={worst:.3e}")?;
    if !(worst < GRAD_CHECK_TOLERANCE) {
        return Err(HstError::Audit(format!(
            "gradient check failed: max relative error {worst:.3e} >= {GRAD_CHECK_TOLERANCE:e}"
        )));
    }
    Ok(())
}
