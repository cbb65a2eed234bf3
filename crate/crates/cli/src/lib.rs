//! Command implementations behind the `cva` binary.
//!
//! Every command writes its report to the given writer and returns a
//! [`CliError`] whose [`exit_code`](CliError::exit_code) the binary uses.

use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use cva_core::attention::{SpatialTanh, Variant};
use cva_core::data::{
    generate_toy_dataset, write_dataset_dir, DatasetBundle, SynthConfig, Task, DEFAULT_AMPLITUDE,
    DEFAULT_ANSWER_CAP,
};
use cva_core::gradcheck::{check_model, group_errors, DEFAULT_TOLERANCE};
use cva_core::metrics::{evaluate, EvalReport, Taxonomy};
use cva_core::model::{CvaModel, ModelConfig};
use cva_core::tape::OpKind;
use cva_core::train::{
    load_checkpoint, samples, save_checkpoint, steps_per_epoch, train_steps, EpochStats,
    TrainConfig,
};

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
/// Default parent directory for `synth` output when `--out` is absent.
pub const OUTPUT_ROOT_ENV: &str = "CVA_OUTPUT_ROOT";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] cva_core::Error),
    #[error("{0}")]
    Check(String),
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl CliError {
    /// 1 usage, 2 I/O or file format, 3 validation or numeric failure.
    pub fn exit_code(&self) -> i32 {
        use cva_core::Error as E;
        match self {
            CliError::Usage(_) => 1,
            CliError::Check(_) => 3,
            CliError::Core(e) => match e {
                E::InvalidArgument(_) => 1,
                E::Io(_) | E::Format { .. } | E::Version { .. } | E::Parse { .. } => 2,
                _ => 3,
            },
        }
    }
}

pub type CliResult<T = ()> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(
    name = "cva",
    version,
    about = "Channel and region attention for visual question answering"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset directory.
    Synth(SynthArgs),
    /// Train one attention variant.
    Train(TrainArgs),
    /// Evaluate a checkpoint.
    Eval(EvalArgs),
    /// Train every variant over several seeds and tabulate test accuracy.
    Ablate(AblateArgs),
    /// Compare analytic and finite-difference gradients on a small model.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value = "spatial")]
    pub task: Task,
    /// Output directory; defaults to a folder under $CVA_OUTPUT_ROOT.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Training examples.
    #[arg(long, default_value_t = 2000)]
    pub size: usize,
    /// Test examples; defaults to a quarter of --size.
    #[arg(long)]
    pub test_size: Option<usize>,
    #[arg(long, default_value_t = 6)]
    pub k: usize,
    #[arg(long, default_value_t = 32)]
    pub d: usize,
    #[arg(long, default_value_t = 5)]
    pub colors: usize,
    /// Scale of the signal codes.
    #[arg(long, default_value_t = DEFAULT_AMPLITUDE)]
    pub amplitude: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Options shared by commands that train.
#[derive(Debug, Args, Default, Clone)]
pub struct ConfigArgs {
    /// `key = value` config file (a run manifest also works).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub spatial_tanh: Option<SpatialTanh>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long)]
    pub variant: Option<Variant>,
    /// Dataset directory; defaults to the `data` entry of --config.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Continue from this checkpoint instead of initializing.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Stop after this many optimizer steps in total (for interrupted runs).
    #[arg(long)]
    pub max_steps: Option<u64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub taxonomy: Option<PathBuf>,
    /// `test` or `train`.
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Architecture source when the checkpoint has no sibling manifest.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub variant: Option<Variant>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// Dataset directory; repeat for several tasks.
    #[arg(long, required = true)]
    pub data: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub seeds: usize,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Variant to check; all four when omitted.
    #[arg(long)]
    pub variant: Option<Variant>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Number of consecutive seeds starting at --seed.
    #[arg(long, default_value_t = 1)]
    pub seeds: u64,
    #[arg(long, default_value = "joint")]
    pub spatial_tanh: SpatialTanh,
    #[arg(long, hide = true)]
    pub inject_fault: Option<String>,
}

pub fn run(cli: Cli, out: &mut dyn Write) -> CliResult {
    match cli.command {
        Command::Synth(a) => cmd_synth(&a, out),
        Command::Train(a) => cmd_train(&a, out).map(|_| ()),
        Command::Eval(a) => cmd_eval(&a, out).map(|_| ()),
        Command::Ablate(a) => cmd_ablate(&a, out).map(|_| ()),
        Command::Gradcheck(a) => cmd_gradcheck(&a, out),
    }
}

pub fn cmd_synth(a: &SynthArgs, out: &mut dyn Write) -> CliResult {
    let dir = match &a.out {
        Some(d) => d.clone(),
        None => match std::env::var_os(OUTPUT_ROOT_ENV) {
            Some(root) => PathBuf::from(root).join(format!("{}-seed{}", a.task, a.seed)),
            None => {
                return Err(CliError::Usage(format!(
                    "--out is required when ${OUTPUT_ROOT_ENV} is unset"
                )))
            }
        },
    };
    let cfg = SynthConfig {
        task: a.task,
        train: a.size,
        test: a.test_size.unwrap_or(a.size / 4),
        regions: a.k,
        channels: a.d,
        colors: a.colors,
        amplitude: a.amplitude,
        seed: a.seed,
    };
    let data = generate_toy_dataset(&cfg)?;
    write_dataset_dir(&dir, &data, DEFAULT_ANSWER_CAP)?;
    writeln!(
        out,
        "wrote {} task to {}: {} train, {} test, K={}, D={}, C={}",
        cfg.task,
        dir.display(),
        cfg.train,
        cfg.test,
        cfg.regions,
        cfg.channels,
        cfg.colors
    )?;
    Ok(())
}

/// Keys a manifest carries besides the training config.
const MANIFEST_EXTRA_KEYS: [&str; 11] = [
    "data",
    "checkpoint",
    "started",
    "finished",
    "vocab",
    "channels",
    "answers",
    "steps",
    "final_loss",
    "train_accuracy",
    "test_accuracy",
];

fn is_extra(key: &str) -> bool {
    MANIFEST_EXTRA_KEYS.contains(&key)
}

fn read_kv(path: &Path) -> CliResult<Vec<(String, String)>> {
    let text = fs::read_to_string(path)?;
    Ok(text
        .lines()
        .filter_map(|l| {
            let l = l.split('#').next()?.trim();
            let (k, v) = l.split_once('=')?;
            Some((k.trim().to_string(), v.trim().to_string()))
        })
        .collect())
}

/// Config file, then convenience flags, then `--set` overrides.
pub fn resolve_config(a: &ConfigArgs) -> CliResult<TrainConfig> {
    let mut cfg = TrainConfig::default();
    if let Some(path) = &a.config {
        cfg.apply_kv(&fs::read_to_string(path)?, is_extra)?;
    }
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(lr) = a.lr {
        cfg.lr = lr;
    }
    if let Some(b) = a.batch_size {
        cfg.batch_size = b;
    }
    if let Some(t) = a.spatial_tanh {
        cfg.spatial_tanh = t;
    }
    for o in &a.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got `{o}`")))?;
        cfg.set(k.trim(), v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn model_config(cfg: &TrainConfig, data: &DatasetBundle) -> CliResult<ModelConfig> {
    let channels = data
        .features
        .channels()
        .ok_or_else(|| cva_core::Error::Validation("feature container is empty".into()))?;
    let dims = cfg.dims(data.questions.len(), channels, data.answers.len());
    let mut m = ModelConfig::new(dims, cfg.variant);
    m.spatial_tanh = cfg.spatial_tanh;
    m.max_question_len = cfg.max_question_len;
    Ok(m)
}

fn now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn write_atomic(path: &Path, contents: &str) -> CliResult {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    fs::write(&tmp, contents)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Result of one training run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub epochs: Vec<EpochStats>,
    pub test: Option<EvalReport>,
    pub checkpoint: PathBuf,
    pub manifest: PathBuf,
}

fn train_with(
    cfg: &TrainConfig,
    data: &DatasetBundle,
    out_dir: &Path,
    resume: Option<&Path>,
    max_steps: Option<u64>,
    out: &mut dyn Write,
) -> CliResult<TrainOutcome> {
    let started = now();
    let mconf = model_config(cfg, data)?;
    let mut model = CvaModel::new(mconf, cfg.seed)?;
    if let Some(path) = resume {
        model.load_store(load_checkpoint(path)?)?;
    }
    let train_set = samples(&data.train, &data.features)?;
    let total = steps_per_epoch(train_set.len(), cfg.batch_size) * cfg.epochs as u64;
    let limit = max_steps.map_or(total, |m| m.min(total));
    let mut stats = Vec::new();
    while model.store.step < limit {
        let s = train_steps(&mut model, &train_set, cfg, limit)?;
        print_epoch(out, &s)?;
        stats.push(s);
    }
    finish(cfg, data, out_dir, &model, stats, started, out)
}

fn print_epoch(out: &mut dyn Write, s: &EpochStats) -> CliResult {
    writeln!(
        out,
        "epoch {:>3}  steps {:>5}  loss {:.6}  train_acc {:.4}",
        s.epoch + 1,
        s.steps,
        s.mean_loss,
        s.accuracy
    )?;
    Ok(())
}

fn finish(
    cfg: &TrainConfig,
    data: &DatasetBundle,
    out_dir: &Path,
    model: &CvaModel,
    stats: Vec<EpochStats>,
    started: u64,
    out: &mut dyn Write,
) -> CliResult<TrainOutcome> {
    fs::create_dir_all(out_dir)?;
    let checkpoint = out_dir.join(CHECKPOINT_FILE);
    save_checkpoint(&model.store, &checkpoint)?;
    let test = if data.test.is_empty() {
        None
    } else {
        Some(evaluate(
            model,
            &data.test,
            &data.features,
            &data.answers,
            None,
        )?)
    };
    let d = model.config.dims;
    let mut m = cfg.to_kv();
    let mut kv = |k: &str, v: String| writeln!(m, "{k} = {v}").unwrap();
    kv("data", data.dir.display().to_string());
    kv("checkpoint", checkpoint.display().to_string());
    kv("vocab", d.vocab.to_string());
    kv("channels", d.channels.to_string());
    kv("answers", d.answers.to_string());
    kv("steps", model.store.step.to_string());
    if let Some(last) = stats.last() {
        kv("final_loss", format!("{:?}", last.mean_loss));
        kv("train_accuracy", format!("{:?}", last.accuracy));
    }
    if let Some(r) = &test {
        kv("test_accuracy", format!("{:?}", r.accuracy));
    }
    kv("started", started.to_string());
    kv("finished", now().to_string());
    let manifest = out_dir.join(MANIFEST_FILE);
    write_atomic(&manifest, &m)?;
    if let Some(r) = &test {
        writeln!(out, "test accuracy {:.4}", r.accuracy)?;
    }
    writeln!(out, "checkpoint {}", checkpoint.display())?;
    Ok(TrainOutcome {
        epochs: stats,
        test,
        checkpoint,
        manifest,
    })
}

pub fn cmd_train(a: &TrainArgs, out: &mut dyn Write) -> CliResult<TrainOutcome> {
    let mut cfg = resolve_config(&a.cfg)?;
    if let Some(v) = a.variant {
        cfg.variant = v;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let data_dir = match &a.data {
        Some(d) => d.clone(),
        None => {
            let from_config = match &a.cfg.config {
                Some(path) => read_kv(path)?
                    .into_iter()
                    .find(|(k, _)| k == "data")
                    .map(|(_, v)| v),
                None => None,
            };
            PathBuf::from(from_config.ok_or_else(|| CliError::Usage("--data is required".into()))?)
        }
    };
    let data = DatasetBundle::load(&data_dir, cfg.max_question_len)?;
    train_with(&cfg, &data, &a.out, a.resume.as_deref(), a.max_steps, out)
}

pub fn cmd_eval(a: &EvalArgs, out: &mut dyn Write) -> CliResult<EvalReport> {
    let mut cfg = TrainConfig::default();
    let sibling = a.checkpoint.parent().map(|p| p.join(MANIFEST_FILE));
    let source = a.config.clone().or(sibling.filter(|p| p.exists()));
    if let Some(path) = &source {
        cfg.apply_kv(&fs::read_to_string(path)?, is_extra)?;
    }
    if let Some(v) = a.variant {
        cfg.variant = v;
    }
    let data = DatasetBundle::load(&a.data, cfg.max_question_len)?;
    let examples = match a.split.as_str() {
        "test" => &data.test,
        "train" => &data.train,
        other => {
            return Err(CliError::Usage(format!(
                "unknown split `{other}` (valid: test, train)"
            )))
        }
    };
    let mut model = CvaModel::new(model_config(&cfg, &data)?, 0)?;
    model.load_store(load_checkpoint(&a.checkpoint)?)?;
    let taxonomy = a.taxonomy.as_deref().map(Taxonomy::load).transpose()?;
    let report = evaluate(
        &model,
        examples,
        &data.features,
        &data.answers,
        taxonomy.as_ref(),
    )?;
    write!(out, "{}", report.to_text())?;
    writeln!(out)?;
    write!(out, "{}", report.to_csv())?;
    Ok(report)
}

/// Per-variant, per-dataset test accuracies, one entry per seed.
#[derive(Clone, Debug)]
pub struct AblationTable {
    pub datasets: Vec<String>,
    pub rows: Vec<(Variant, Vec<Vec<f64>>)>,
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl AblationTable {
    /// Mean accuracy of `variant` on the dataset in column `dataset`.
    pub fn mean(&self, variant: Variant, dataset: usize) -> Option<f64> {
        let (_, cols) = self.rows.iter().find(|(v, _)| *v == variant)?;
        cols.get(dataset).map(|c| mean_std(c).0)
    }

    pub fn to_text(&self) -> String {
        let mut header = vec!["variant".to_string()];
        header.extend(self.datasets.iter().cloned());
        let mut lines = vec![header];
        for (v, cols) in &self.rows {
            let mut line = vec![v.label().to_string()];
            for c in cols {
                let (m, s) = mean_std(c);
                line.push(format!("{m:.4} ± {s:.4}"));
            }
            lines.push(line);
        }
        let ncol = lines[0].len();
        let widths: Vec<usize> = (0..ncol)
            .map(|i| {
                lines
                    .iter()
                    .map(|l| l[i].chars().count())
                    .max()
                    .unwrap_or(0)
            })
            .collect();
        let mut s = String::new();
        for l in lines {
            let cells: Vec<String> = l
                .iter()
                .zip(&widths)
                .map(|(c, w)| format!("{c}{}", " ".repeat(w - c.chars().count())))
                .collect();
            writeln!(s, "{}", cells.join("  ").trim_end()).unwrap();
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,name,value\n");
        for (v, cols) in &self.rows {
            for (d, c) in self.datasets.iter().zip(cols) {
                let (m, sd) = mean_std(c);
                writeln!(s, "mean,{}/{},{m}", v.label(), d).unwrap();
                writeln!(s, "stdev,{}/{},{sd}", v.label(), d).unwrap();
            }
        }
        s
    }
}

pub fn cmd_ablate(a: &AblateArgs, out: &mut dyn Write) -> CliResult<AblationTable> {
    if a.seeds == 0 {
        return Err(CliError::Usage("--seeds must be at least 1".into()));
    }
    let base = resolve_config(&a.cfg)?;
    let mut datasets = Vec::new();
    for dir in &a.data {
        let name = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| dir.display().to_string());
        datasets.push((name, DatasetBundle::load(dir, base.max_question_len)?));
    }
    let table = ablate(&datasets, &Variant::ALL, a.seeds, &base, &a.out, out)?;
    fs::create_dir_all(&a.out)?;
    fs::write(a.out.join("ablation.txt"), table.to_text())?;
    fs::write(a.out.join("ablation.csv"), table.to_csv())?;
    writeln!(out)?;
    write!(out, "{}", table.to_text())?;
    writeln!(out)?;
    write!(out, "{}", table.to_csv())?;
    Ok(table)
}

/// Trains every `variant` on every named dataset with seeds `base.seed ..
/// base.seed + seeds`, each cell in its own directory under `out_dir`, and
/// collects test accuracies.
pub fn ablate(
    datasets: &[(String, DatasetBundle)],
    variants: &[Variant],
    seeds: usize,
    base: &TrainConfig,
    out_dir: &Path,
    out: &mut dyn Write,
) -> CliResult<AblationTable> {
    let mut rows = Vec::new();
    for &variant in variants {
        let mut cols = Vec::new();
        for (name, data) in datasets {
            let mut accs = Vec::new();
            for i in 0..seeds {
                let mut cfg = base.clone();
                cfg.variant = variant;
                cfg.seed = base.seed + i as u64;
                let cell = out_dir.join(format!("{name}-{}-seed{}", variant.name(), cfg.seed));
                let res = train_with(&cfg, data, &cell, None, None, &mut std::io::sink())?;
                let acc = res.test.map(|r| r.accuracy).ok_or_else(|| {
                    cva_core::Error::Validation(format!("dataset `{name}` has no test split"))
                })?;
                writeln!(
                    out,
                    "{:<6} {name:<12} seed {:<3} test accuracy {acc:.4}",
                    variant.label(),
                    cfg.seed
                )?;
                accs.push(acc);
            }
            cols.push(accs);
        }
        rows.push((variant, cols));
    }
    Ok(AblationTable {
        datasets: datasets.iter().map(|(n, _)| n.clone()).collect(),
        rows,
    })
}

pub fn cmd_gradcheck(a: &GradcheckArgs, out: &mut dyn Write) -> CliResult {
    let fault = match &a.inject_fault {
        Some(name) => Some(
            OpKind::parse(name).ok_or_else(|| CliError::Usage(format!("unknown op `{name}`")))?,
        ),
        None => None,
    };
    if a.seeds == 0 {
        return Err(CliError::Usage("--seeds must be at least 1".into()));
    }
    let variants: Vec<Variant> = a.variant.map_or(Variant::ALL.to_vec(), |v| vec![v]);
    let mut worst: Option<(f64, String)> = None;
    for v in variants {
        for seed in a.seed..a.seed + a.seeds {
            let report = check_model(v, a.spatial_tanh, seed, fault)?;
            let groups = group_errors(&report);
            let cells: Vec<String> = groups.iter().map(|(g, e)| format!("{g} {e:.3e}")).collect();
            writeln!(out, "{:<6} seed {seed:<4} {}", v.name(), cells.join("  "))?;
            if let Some(p) = report.worst() {
                if worst
                    .as_ref()
                    .is_none_or(|(e, _)| p.max_relative_error > *e)
                {
                    worst = Some((
                        p.max_relative_error,
                        format!("{} (variant {v}, seed {seed})", p.name),
                    ));
                }
            }
        }
    }
    let (err, who) = worst.unwrap_or((0.0, "none".into()));
    if err >= DEFAULT_TOLERANCE {
        return Err(CliError::Check(format!(
            "gradient check failed: max relative error {err:.3e} at {who} exceeds {DEFAULT_TOLERANCE:e}"
        )));
    }
    writeln!(
        out,
        "max relative error {err:.3e} ({who}) below {DEFAULT_TOLERANCE:e}"
    )?;
    Ok(())
}
