//! Subcommand definitions and their implementations.

use std::io::BufRead;
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::time::Duration;

use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};
use stagewise::data::{gen_synthetic, load_manifest, Dataset, SynthConfig};
use stagewise::metrics::{evaluate, EvalReport};
use stagewise::nn::build_resnet;
use stagewise::optim::{lr_range_test, GradientDescent, LrCurve, LrFinderConfig, QuadraticTarget};
use stagewise::trainer::{
    load_checkpoint, Checkpoint, EventLog, LrMode, Observer, ProtocolConfig, RunState, RunStatus, Trainer,
};

use crate::plot::lr_curve_svg;
use crate::{manifest_path, resolve_config, CliError, Preset};

#[derive(Debug, Parser)]
#[command(name = "stagewise", version, about = "Staged progressive-resizing fine-tuning of residual networks")]
pub struct Cli {
    /// Protocol config (JSON). Overrides --preset.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Built-in protocol used when no config file is given.
    #[arg(long, global = true, value_enum, default_value = "desk")]
    pub preset: Preset,
    /// Run seed; overrides the config's.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic 4-class image set and its manifest.
    Synth(SynthArgs),
    /// Run the learning-rate range test and print the curve as JSON.
    LrFind(LrFindArgs),
    /// Run the staged training protocol.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a manifest's test split.
    Eval(EvalArgs),
    /// Serve the HTTP API.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Square image side.
    #[arg(long, default_value_t = 64)]
    pub image_size: usize,
    /// Train images per class, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub train: Option<Vec<usize>>,
    /// Test images per class, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub test: Option<Vec<usize>>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SelfTest {
    Quadratic,
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("source").args(["checkpoint", "fresh", "selftest"]).required(true)))]
pub struct LrFindArgs {
    /// Probe the model stored in this checkpoint.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Probe a freshly initialized model.
    #[arg(long)]
    pub fresh: bool,
    /// Sweep a built-in target instead of a network.
    #[arg(long, value_enum)]
    pub selftest: Option<SelfTest>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Stage whose image size and index seed the sweep.
    #[arg(long, default_value_t = 0)]
    pub stage: usize,
    #[arg(long, default_value_t = 1)]
    pub step: usize,
    /// Write an SVG plot of smoothed loss against learning rate.
    #[arg(long)]
    pub plot: Option<PathBuf>,
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("mode").args(["interactive", "auto"])))]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Output directory for the event log, checkpoints and report.
    #[arg(long, default_value = "run")]
    pub out: PathBuf,
    /// Read a learning rate from stdin at each range-test step.
    #[arg(long)]
    pub interactive: bool,
    /// Take the range test's suggestion (default).
    #[arg(long)]
    pub auto: bool,
    /// Seconds to wait for an interactive choice; overrides the config.
    #[arg(long)]
    pub lr_timeout: Option<f64>,
    /// Initialize the body from a checkpoint's parameters.
    #[arg(long, conflicts_with = "resume")]
    pub init: Option<PathBuf>,
    /// Continue a run from one of its checkpoints.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Image side; defaults to the last stage's.
    #[arg(long)]
    pub size: Option<usize>,
    /// Where to write the JSON report.
    #[arg(long, default_value = "report.json")]
    pub json: PathBuf,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    /// Directory for per-run event logs and checkpoints.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let config = || resolve_config(cli.config.as_deref(), cli.preset, cli.seed);
    match &cli.command {
        Command::Synth(a) => synth(a, cli.seed.unwrap_or(0)),
        Command::LrFind(a) => match a.selftest {
            Some(SelfTest::Quadratic) => lr_find_selftest(a, cli.seed.unwrap_or(0)),
            None => lr_find(a, config()?),
        },
        Command::Train(a) => train(a, config()?, cli.config.is_some()),
        Command::Eval(a) => eval(a, config()?, cli.config.is_some()),
        Command::Serve(a) => crate::server::serve(a, config()?),
    }
}

fn write_file(path: &Path, contents: &[u8]) -> Result<(), CliError> {
    std::fs::write(path, contents).map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(path).map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))
}

fn open_dataset(path: &Path) -> Result<Dataset, CliError> {
    let manifest = load_manifest(path).map_err(|e| CliError::input(e.to_string()))?;
    Ok(Dataset::new(manifest))
}

fn read_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    load_checkpoint(path).map_err(|e| CliError::input(format!("{}: {e}", path.display())))
}

fn synth(a: &SynthArgs, seed: u64) -> Result<(), CliError> {
    let mut cfg = SynthConfig { image_size: a.image_size, seed, ..SynthConfig::default() };
    let four = |flag: &str, v: &[usize]| {
        v.try_into().map_err(|_| CliError::input(format!("--{flag} takes four counts, got {}", v.len())))
    };
    if let Some(t) = &a.train {
        cfg.train = four("train", t)?;
    }
    if let Some(t) = &a.test {
        cfg.test = four("test", t)?;
    }
    let manifest = gen_synthetic(&a.out, &cfg).map_err(|e| CliError::input(e.to_string()))?;
    println!("{}", manifest.summary());
    Ok(())
}

fn emit_curve(curve: &LrCurve, plot: Option<&PathBuf>) -> Result<(), CliError> {
    println!("{}", serde_json::to_string_pretty(curve).expect("curve serializes"));
    if let Some(path) = plot {
        write_file(path, lr_curve_svg(curve).as_bytes())?;
    }
    Ok(())
}

/// Gradient descent on L = ½(θ − x)² with noisy x, where the stable step
/// bound is lr < 2.
fn lr_find_selftest(a: &LrFindArgs, seed: u64) -> Result<(), CliError> {
    let target = QuadraticTarget::standard(seed);
    let curve = lr_range_test(&target, &GradientDescent, &LrFinderConfig::default())
        .map_err(|e| CliError::runtime(e.to_string()))?;
    emit_curve(&curve, a.plot.as_ref())
}

fn lr_find(a: &LrFindArgs, config: ProtocolConfig) -> Result<(), CliError> {
    let data = open_dataset(&manifest_path(a.manifest.as_ref(), &config)?)?;
    let stage = config
        .stages
        .get(a.stage)
        .ok_or_else(|| CliError::input(format!("stage {} not in the protocol ({} stages)", a.stage, config.stages.len())))?;
    let size = stage.image_size;
    let mut trainer = match &a.checkpoint {
        Some(path) => {
            let model = read_checkpoint(path)?.restore_model().map_err(|e| CliError::input(e.to_string()))?;
            Trainer::continuing(config, model, data)?
        }
        None => Trainer::new(config, data)?,
    };
    let curve = trainer.lr_curve(a.stage, a.step, size)?;
    emit_curve(&curve, a.plot.as_ref())
}

/// Prints the range-test result and relays stdin lines as rate choices.
struct Prompt;

impl Observer for Prompt {
    fn on_state(&mut self, state: &RunState) {
        if state.status == RunStatus::AwaitingLr {
            if let Some(curve) = &state.lr_curve {
                eprintln!(
                    "stage {} step {}: suggested learning rate {:.3e}; enter a rate or press return to accept",
                    state.position.stage, state.position.step, curve.suggested_lr
                );
            }
        }
    }
}

fn stdin_choices(suggestions: std::sync::Arc<std::sync::Mutex<f64>>) -> mpsc::Receiver<f64> {
    let (tx, rx) = mpsc::channel();
    std::thread::spawn(move || {
        for line in std::io::stdin().lock().lines() {
            let Ok(line) = line else { break };
            let line = line.trim();
            let lr = if line.is_empty() { *suggestions.lock().expect("lock") } else {
                match line.parse::<f64>() {
                    Ok(v) => v,
                    Err(_) => {
                        eprintln!("not a number: {line}");
                        continue;
                    }
                }
            };
            if tx.send(lr).is_err() {
                break;
            }
        }
    });
    rx
}

struct Suggestion(std::sync::Arc<std::sync::Mutex<f64>>);

impl Observer for Suggestion {
    fn on_state(&mut self, state: &RunState) {
        if let Some(c) = &state.lr_curve {
            *self.0.lock().expect("lock") = c.suggested_lr;
        }
    }
}

fn train(a: &TrainArgs, mut config: ProtocolConfig, from_file: bool) -> Result<(), CliError> {
    if let Some(t) = a.lr_timeout {
        config.lr_timeout_secs = t;
    }
    config.validate()?;
    create_dir(&a.out)?;
    if config.checkpoint_dir.is_none() {
        config.checkpoint_dir = Some(a.out.join("checkpoints"));
    }
    create_dir(config.checkpoint_dir.as_ref().expect("set above"))?;
    let data = open_dataset(&manifest_path(a.manifest.as_ref(), &config)?)?;

    let mut trainer = if let Some(path) = &a.resume {
        let mut ckpt = read_checkpoint(path)?;
        if from_file {
            ckpt.meta.protocol = Some(config.clone());
        }
        Trainer::resume(&ckpt, data)?
    } else if let Some(path) = &a.init {
        let ckpt = read_checkpoint(path)?;
        let mut model = build_resnet(config.model.clone()).map_err(|e| CliError::input(e.to_string()))?;
        let body: Vec<(&str, &stagewise::tensor::Tensor)> = ckpt
            .tensors
            .iter()
            .filter(|(name, _)| model.params().find(name).is_some_and(|id| model.is_body_param(id)))
            .map(|(n, t)| (n.as_str(), t))
            .collect();
        let n = model.load_named(body).map_err(|e| CliError::input(e.to_string()))?;
        log::info!("loaded {n} body tensors from {}", path.display());
        Trainer::with_model(config, model, data)?
    } else {
        Trainer::new(config, data)?
    };

    trainer.add_observer(Box::new(EventLog::create(&a.out.join("events.jsonl"))?));
    if a.interactive {
        let latest = std::sync::Arc::new(std::sync::Mutex::new(f64::NAN));
        trainer.add_observer(Box::new(Suggestion(latest.clone())));
        trainer.add_observer(Box::new(Prompt));
        let timeout = Duration::from_secs_f64(trainer.config().lr_timeout_secs);
        trainer.set_lr_mode(LrMode::Interactive { choices: stdin_choices(latest), timeout });
    }

    let result = trainer.run().map(|_| ());
    write_file(
        &a.out.join("state.json"),
        serde_json::to_string_pretty(trainer.state()).expect("state serializes").as_bytes(),
    )?;
    result?;
    let report = trainer.state().report.as_ref().expect("done runs carry a report");
    write_report(report, &a.out.join("report.json"))?;
    println!("{}", report.table());
    Ok(())
}

fn write_report(report: &EvalReport, path: &Path) -> Result<(), CliError> {
    let json = serde_json::to_string_pretty(report).expect("report serializes");
    write_file(path, format!("{json}\n").as_bytes())
}

fn eval(a: &EvalArgs, config: ProtocolConfig, from_file: bool) -> Result<(), CliError> {
    let ckpt = read_checkpoint(&a.checkpoint)?;
    let model = ckpt.restore_model().map_err(|e| CliError::input(e.to_string()))?;
    // The run's own protocol describes the checkpoint best unless a config
    // file was given explicitly.
    let config = match (&ckpt.meta.protocol, from_file) {
        (Some(p), false) => p.clone(),
        _ => config,
    };
    let mut data = open_dataset(&manifest_path(a.manifest.as_ref(), &config)?)?;
    let n = data.manifest().n_classes();
    if n != model.n_classes() {
        return Err(CliError::input(format!(
            "checkpoint head has {} classes, manifest {n}",
            model.n_classes()
        )));
    }
    let size = match a.size {
        Some(s) => s,
        None => config.stages.last().map(|s| s.image_size).ok_or_else(|| CliError::input("at least one stage required"))?,
    };
    let report = evaluate(&model, &mut data, size, config.batch_size, &config.normalization).map_err(|e| match e {
        stagewise::metrics::MetricsError::EmptyTestSplit => CliError::input(e.to_string()),
        e => CliError::runtime(e.to_string()),
    })?;
    write_report(&report, &a.json)?;
    println!("{}", report.table());
    Ok(())
}
