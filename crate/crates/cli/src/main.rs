use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::bail;
use clap::{Args, Parser, Subcommand, ValueEnum};
use multiattn::train::FINAL_CHECKPOINT;
use multiattn::{
    evaluate_model, generate_synthetic, gradcheck, train, Checkpoint, Dataset, Error, LstmMode, ModelConfig,
    OptimizerKind, Profile, RunConfig, Sample, Split, SynthParams, TrainConfig,
};

/// Multi-attention CNN + bidirectional LSTM multi-label scene classifier.
#[derive(Parser)]
#[command(name = "multiattn", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic multi-resolution dataset.
    GenerateData(GenerateArgs),
    /// Train a model and report validation metrics.
    Train(TrainArgs),
    /// Score a checkpoint on one split.
    Evaluate(EvalArgs),
    /// Print predicted class names per sample.
    Predict(EvalArgs),
    /// Print the T x R attention scores per sample.
    AttnDump(DumpArgs),
    /// Finite-difference gradient check at 64-bit.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value = "tiny")]
    profile: String,
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
    /// Number of classes (profile default when omitted).
    #[arg(long)]
    classes: Option<usize>,
    /// Train/val/test weights.
    #[arg(long, default_value = "60,20,20")]
    split: String,
}

#[derive(Clone, Copy, ValueEnum)]
enum OptimizerArg {
    Adam,
    Sgd,
}

#[derive(Clone, Copy, ValueEnum)]
enum LstmArg {
    Shared,
    PerPosition,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// TOML run config; may be partial.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long, value_enum)]
    optimizer: Option<OptimizerArg>,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    #[arg(long, value_enum)]
    lstm_mode: Option<LstmArg>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    /// Overrides the threshold stored in the checkpoint.
    #[arg(long)]
    threshold: Option<f64>,
}

#[derive(Args)]
struct DumpArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    /// Dump at most this many samples.
    #[arg(long)]
    limit: Option<usize>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, value_enum, default_value = "shared")]
    lstm_mode: LstmArg,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e.downcast_ref::<Error>() {
                Some(Error::Divergence { .. } | Error::Internal(_)) => ExitCode::from(1),
                _ => ExitCode::from(2),
            }
        }
    }
}

fn run(cmd: Command) -> anyhow::Result<ExitCode> {
    match cmd {
        Command::GenerateData(a) => generate(a)?,
        Command::Train(a) => train_cmd(a)?,
        Command::Evaluate(a) => evaluate(a)?,
        Command::Predict(a) => predict(a)?,
        Command::AttnDump(a) => attn_dump(a)?,
        Command::Gradcheck(a) => return gradcheck_cmd(a),
    }
    Ok(ExitCode::SUCCESS)
}

fn parse_split_weights(s: &str) -> anyhow::Result<[u32; 3]> {
    let parts: Vec<u32> = s
        .split(',')
        .map(|p| p.trim().parse::<u32>())
        .collect::<Result<_, _>>()
        .map_err(|_| Error::Usage(format!("--split {s:?}: expected three integers like 60,20,20")))?;
    match parts[..] {
        [a, b, c] => Ok([a, b, c]),
        _ => Err(Error::Usage(format!("--split {s:?}: expected three weights")).into()),
    }
}

fn generate(a: GenerateArgs) -> anyhow::Result<()> {
    let profile: Profile = a.profile.parse()?;
    let mut params = SynthParams::new(a.seed, a.n, profile);
    params.noise = a.noise;
    params.split = parse_split_weights(&a.split)?;
    if let Some(c) = a.classes {
        params.classes = c;
    }
    let ds = generate_synthetic(&a.out, &params)?;
    let counts: Vec<String> = Split::ALL.iter().map(|&s| format!("{}={}", s.name(), ds.ids(s).len())).collect();
    println!("wrote {} samples to {} ({})", a.n, a.out.display(), counts.join(" "));
    Ok(())
}

fn open_dataset(path: &Path) -> anyhow::Result<Dataset> {
    if !path.is_dir() {
        return Err(Error::Usage(format!("dataset directory {} does not exist", path.display())).into());
    }
    Ok(Dataset::open(path)?)
}

fn load(ds: &Dataset, split: Split) -> anyhow::Result<Vec<Sample>> {
    Ok(ds.load_split(split).collect::<Result<_, _>>()?)
}

fn resolve_config(ds: &Dataset, a: &TrainArgs) -> anyhow::Result<RunConfig> {
    let m = ds.manifest();
    let mut cfg = RunConfig {
        model: ModelConfig::for_geometry(&m.subsets, m.class_count()),
        train: TrainConfig::default(),
    };
    if let Some(path) = &a.config {
        let text = fs::read_to_string(path).map_err(|e| Error::Io { path: path.clone(), source: e })?;
        cfg = cfg.overlay_toml(&text)?;
    }
    let t = &mut cfg.train;
    if let Some(v) = a.seed {
        t.seed = v;
    }
    if let Some(v) = a.epochs {
        t.epochs = v;
    }
    if let Some(v) = a.lr {
        t.learning_rate = v;
    }
    if let Some(v) = a.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = a.checkpoint_every {
        t.checkpoint_every = v;
    }
    if let Some(v) = a.optimizer {
        t.optimizer = match v {
            OptimizerArg::Adam => OptimizerKind::Adam,
            OptimizerArg::Sgd => OptimizerKind::Sgd,
        };
    }
    if let Some(v) = a.threshold {
        cfg.model.threshold = v;
    }
    if let Some(v) = a.lstm_mode {
        cfg.model.lstm_mode = lstm_mode(v);
    }
    cfg.model.validate()?;
    cfg.train.validate()?;
    cfg.model.check_against(&m.subsets, m.class_count())?;
    Ok(cfg)
}

fn lstm_mode(a: LstmArg) -> LstmMode {
    match a {
        LstmArg::Shared => LstmMode::Shared,
        LstmArg::PerPosition => LstmMode::PerPosition,
    }
}

/// Metrics text, a blank line, the key=value block and the config echo.
fn metrics_report(
    title: &str,
    samples: &[Sample],
    model: &multiattn::Model<f32>,
    cfg: &RunConfig,
) -> anyhow::Result<String> {
    let mut out = String::new();
    writeln!(out, "{title}")?;
    if samples.is_empty() {
        writeln!(out, "no samples in split\n\nn_samples=0")?;
    } else {
        let eval = evaluate_model(model, samples, cfg.model.threshold)?;
        writeln!(out, "{}\n{}", eval.report.to_text(), eval.report.to_key_values().trim_end())?;
    }
    writeln!(out, "\n# run config")?;
    out.push_str(&cfg.to_toml());
    Ok(out)
}

fn train_cmd(a: TrainArgs) -> anyhow::Result<()> {
    let ds = open_dataset(&a.data)?;
    let cfg = resolve_config(&ds, &a)?;
    let samples = load(&ds, Split::Train)?;
    if samples.is_empty() {
        bail!(Error::Usage("training split is empty".into()));
    }
    fs::create_dir_all(&a.out).map_err(|e| Error::Io { path: a.out.clone(), source: e })?;
    let model = multiattn::Model::init(cfg.model.clone(), cfg.train.seed)?;
    let outcome = train(model, &samples, &cfg, Some(&a.out), |epoch, loss| {
        eprintln!("epoch {epoch:>4}  loss {loss:.6}");
    })?;
    let val = load(&ds, Split::Val)?;
    let report = metrics_report("validation", &val, &outcome.model, &cfg)?;
    let path = a.out.join("val_report.txt");
    fs::write(&path, &report).map_err(|e| Error::Io { path: path.clone(), source: e })?;
    print!("{report}");
    eprintln!("final checkpoint: {}", a.out.join(FINAL_CHECKPOINT).display());
    Ok(())
}

/// Loads a checkpoint and checks it against the dataset geometry.
fn load_checked(data: &Path, checkpoint: &Path) -> anyhow::Result<(Dataset, Checkpoint)> {
    let ds = open_dataset(data)?;
    let ck = Checkpoint::load(checkpoint)?;
    let m = ds.manifest();
    ck.config.model.check_against(&m.subsets, m.class_count())?;
    Ok((ds, ck))
}

fn evaluate(a: EvalArgs) -> anyhow::Result<()> {
    let split: Split = a.split.parse()?;
    let (ds, ck) = load_checked(&a.data, &a.checkpoint)?;
    let mut cfg = ck.config.clone();
    if let Some(t) = a.threshold {
        cfg.model.threshold = t;
        cfg.model.validate()?;
    }
    let model = ck.model()?;
    let samples = load(&ds, split)?;
    print!("{}", metrics_report(split.name(), &samples, &model, &cfg)?);
    Ok(())
}

fn config_comment(cfg: &RunConfig) -> String {
    cfg.to_toml().lines().map(|l| format!("# {l}\n")).collect()
}

fn predict(a: EvalArgs) -> anyhow::Result<()> {
    let split: Split = a.split.parse()?;
    let (ds, ck) = load_checked(&a.data, &a.checkpoint)?;
    let mut cfg = ck.config.clone();
    if let Some(t) = a.threshold {
        cfg.model.threshold = t;
        cfg.model.validate()?;
    }
    let model = ck.model()?;
    let classes = &ds.manifest().classes;
    let mut out = config_comment(&cfg);
    for id in ds.ids(split) {
        let s = ds.read(id)?;
        let inf = model.infer(&s.subsets)?;
        let labels = multiattn::head::predict(&inf.probabilities, cfg.model.threshold)?;
        let names: Vec<&str> =
            labels.iter().zip(classes).filter(|(&y, _)| y == 1).map(|(_, c)| c.as_str()).collect();
        let labels = if names.is_empty() { "<none>".to_string() } else { names.join(",") };
        writeln!(out, "{id}\t{labels}")?;
    }
    print!("{out}");
    Ok(())
}

fn attn_dump(a: DumpArgs) -> anyhow::Result<()> {
    let split: Split = a.split.parse()?;
    let (ds, ck) = load_checked(&a.data, &a.checkpoint)?;
    let model = ck.model()?;
    let ids = ds.ids(split);
    let ids = &ids[..a.limit.unwrap_or(ids.len()).min(ids.len())];
    let mut out = config_comment(&ck.config);
    for id in ids {
        let s = ds.read(id)?;
        let inf = model.infer(&s.subsets)?;
        let r = inf.attention.shape()[1];
        writeln!(out, "sample {id}")?;
        for row in inf.attention.data().chunks(r) {
            let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            writeln!(out, "{}", cells.join("\t"))?;
        }
    }
    print!("{out}");
    Ok(())
}

fn gradcheck_cmd(a: GradcheckArgs) -> anyhow::Result<ExitCode> {
    let mut cfg = ModelConfig::shrunken();
    cfg.lstm_mode = lstm_mode(a.lstm_mode);
    let report = gradcheck(cfg.clone(), a.seed)?;
    print!("{}", report.to_text());
    let echo = RunConfig { model: cfg, train: TrainConfig { seed: a.seed, ..TrainConfig::default() } };
    print!("\n{}", config_comment(&echo));
    Ok(if report.passed() { ExitCode::SUCCESS } else { ExitCode::from(1) })
}
