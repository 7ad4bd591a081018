//! Command-line front end: `synth-data`, `train`, `enhance`, `evaluate` and
//! `inspect`.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 bad flags or an unresolvable
//! configuration.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::checkpoint::{config_differences, Checkpoint};
use crate::config::{default_config_path, parse_overrides, ConfigText, Preset, RunConfig, CONFIG_ENV};
use crate::data::{load_wav, synth_corpus, Manifest, Split, SynthConfig, MANIFEST_FILE};
use crate::error::Error;
use crate::model::{param_report, Model};
use crate::params::ParamStore;
use crate::pipeline::{enhance_manifest, enhance_to_dir, evaluate_manifest, Estimator};
use crate::training::train_run;

/// Sample rate assumed when reporting frame counts for a 1 s input.
const INSPECT_RATE: usize = 16_000;

#[derive(Debug, Parser)]
#[command(name = "dualpath-se", version, about = "Time-frequency speech enhancement")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic speech-plus-noise corpus and its manifest.
    SynthData(SynthArgs),
    /// Train a model on a manifest, writing checkpoints and a training log.
    Train(TrainArgs),
    /// Enhance a WAV file or every utterance of a manifest.
    Enhance(EnhanceArgs),
    /// Enhance and score a manifest, writing a JSON-lines report.
    Evaluate(EvaluateArgs),
    /// Print parameter counts, derived shapes and the resolved configuration.
    Inspect(InspectArgs),
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// Config file of `key = value` lines (default: the file named by $DUALPATH_SE_CONFIG).
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Preset supplying every default: paper, desk or micro.
    #[arg(long, value_name = "NAME")]
    preset: Option<String>,
    /// Override one config key, e.g. `--set model.heads=2`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Output directory for WAVs and manifest.jsonl.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Number of utterances; a fifth of them, rounded, go to the test split.
    #[arg(long, default_value_t = 80)]
    n: usize,
    /// Seed for every random choice.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Training manifest (overrides paths.manifest).
    #[arg(long, value_name = "FILE")]
    manifest: Option<PathBuf>,
    /// Directory for checkpoints and the log (overrides paths.out_dir).
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Number of epochs (overrides train.epochs).
    #[arg(long)]
    epochs: Option<usize>,
    /// Seed (overrides train.seed).
    #[arg(long)]
    seed: Option<u64>,
    /// Initial learning rate (overrides train.lr0).
    #[arg(long)]
    lr: Option<f64>,
    /// Continue from this checkpoint; epoch numbering carries on from it.
    #[arg(long, value_name = "CKPT")]
    resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EnhanceArgs {
    /// Trained checkpoint.
    #[arg(long, value_name = "CKPT")]
    ckpt: PathBuf,
    /// A WAV file, or a manifest (`.jsonl`) whose noisy mixtures are enhanced.
    #[arg(long = "in", value_name = "PATH")]
    input: PathBuf,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Also write the estimated noise.
    #[arg(long)]
    noise: bool,
    /// Expected configuration; enhancement fails if the checkpoint differs.
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    /// Trained checkpoint (or use --oracle).
    #[arg(long, value_name = "CKPT", required_unless_present = "oracle", conflicts_with = "oracle")]
    ckpt: Option<PathBuf>,
    /// Score the clean reference as the estimate.
    #[arg(long)]
    oracle: bool,
    /// Manifest to score.
    #[arg(long, value_name = "FILE")]
    manifest: PathBuf,
    /// Where to write the JSON-lines report.
    #[arg(long, value_name = "FILE")]
    report: PathBuf,
    /// Which records to score: all, train or test.
    #[arg(long, default_value = "all")]
    split: String,
}

#[derive(Debug, Args)]
struct InspectArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Inspect the configuration echoed by a checkpoint instead.
    #[arg(long, value_name = "CKPT", conflicts_with_all = ["config", "preset", "set"])]
    ckpt: Option<PathBuf>,
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

type CmdResult = std::result::Result<(), Failure>;

fn usage(e: Error) -> Failure {
    Failure::Usage(e.to_string())
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let result = match cli.command {
        Command::SynthData(a) => cmd_synth_data(a),
        Command::Train(a) => cmd_train(a),
        Command::Enhance(a) => cmd_enhance(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Inspect(a) => cmd_inspect(a),
    };
    match result {
        Ok(()) => 0,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            2
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            1
        }
    }
}

fn resolve(args: &ConfigArgs, extra: Vec<(String, String)>) -> std::result::Result<RunConfig, Failure> {
    let preset = args.preset.as_deref().map(Preset::parse).transpose().map_err(usage)?;
    let file = match default_config_path(args.config.as_deref()) {
        Some(p) => {
            if args.config.is_none() && !p.is_file() {
                return Err(Failure::Usage(format!(
                    "${CONFIG_ENV} names {}, which does not exist",
                    p.display()
                )));
            }
            Some(ConfigText::load(&p).map_err(usage)?)
        }
        None => None,
    };
    let mut overrides = parse_overrides(&args.set).map_err(usage)?;
    overrides.extend(extra);
    RunConfig::resolve(preset, file.as_ref(), &overrides).map_err(usage)
}

fn cmd_synth_data(a: SynthArgs) -> CmdResult {
    if a.n == 0 {
        return Err(Failure::Usage("--n must be at least 1".into()));
    }
    synth_corpus(&SynthConfig::with_total(a.n), a.seed, &a.out)?;
    println!("{}", a.out.join(MANIFEST_FILE).display());
    Ok(())
}

fn cmd_train(a: TrainArgs) -> CmdResult {
    let mut extra = Vec::new();
    let mut push = |k: &str, v: Option<String>| {
        if let Some(v) = v {
            extra.push((k.to_string(), v));
        }
    };
    push("paths.manifest", a.manifest.map(|p| p.display().to_string()));
    push("paths.out_dir", a.out.map(|p| p.display().to_string()));
    push("train.epochs", a.epochs.map(|v| v.to_string()));
    push("train.seed", a.seed.map(|v| v.to_string()));
    push("train.lr0", a.lr.map(|v| v.to_string()));
    let cfg = resolve(&a.config, extra)?;
    let manifest_path = cfg
        .paths
        .manifest
        .clone()
        .ok_or_else(|| Failure::Usage("no manifest: pass --manifest or set paths.manifest".into()))?;
    let out_dir = cfg
        .paths
        .out_dir
        .clone()
        .ok_or_else(|| Failure::Usage("no output directory: pass --out or set paths.out_dir".into()))?;
    let manifest = Manifest::load(&manifest_path)?;
    let resume = a.resume.as_deref().map(Checkpoint::load).transpose()?;
    if let Some(ck) = &resume {
        println!("resuming after epoch {}", ck.epoch);
    }
    let outcome = train_run(&cfg.settings(), &manifest, &out_dir, resume, |e| {
        println!(
            "epoch {:3}  lr {:.3e}  train_loss {:.6}  val_loss {:.6}",
            e.epoch, e.lr, e.train_loss, e.val_loss
        );
    })?;
    println!(
        "best epoch {} (val_loss {:.6}); checkpoints in {}",
        outcome.best_epoch,
        outcome.best_val_loss,
        out_dir.display()
    );
    Ok(())
}

fn load_model(ckpt: &Path) -> std::result::Result<(Checkpoint, Model, ParamStore), Failure> {
    let ck = Checkpoint::load(ckpt)?;
    let mut store = ParamStore::new();
    let model = Model::new(&ck.settings.model, &mut store, ck.seed)?;
    ck.restore_into(&mut store)?;
    Ok((ck, model, store))
}

fn has_config(a: &ConfigArgs) -> bool {
    a.config.is_some() || a.preset.is_some() || !a.set.is_empty()
}

fn cmd_enhance(a: EnhanceArgs) -> CmdResult {
    let (ck, model, store) = load_model(&a.ckpt)?;
    if has_config(&a.config) {
        let expected = resolve(&a.config, Vec::new())?;
        let diffs = config_differences(&expected.model, &ck.settings.model);
        if !diffs.is_empty() {
            return Err(Failure::Runtime(format!(
                "checkpoint config differs in: {}",
                diffs.join(", ")
            )));
        }
    }
    let is_manifest = a.input.extension().is_some_and(|e| e == "jsonl");
    let written = if is_manifest {
        let manifest = Manifest::load(&a.input)?;
        enhance_manifest(&model, &store, &manifest, &a.out, a.noise)?
    } else {
        let wave = load_wav(&a.input)?;
        let stem = a
            .input
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "input".into());
        vec![enhance_to_dir(&model, &store, &wave, &stem, &a.out, a.noise)?]
    };
    for w in &written {
        println!("{}", w.speech.display());
        if let Some(n) = &w.noise {
            println!("{}", n.display());
        }
    }
    Ok(())
}

fn cmd_evaluate(a: EvaluateArgs) -> CmdResult {
    let split = match a.split.as_str() {
        "all" => None,
        "train" => Some(Split::Train),
        "test" => Some(Split::Test),
        other => return Err(Failure::Usage(format!("--split must be all, train or test, got `{other}`"))),
    };
    let manifest = Manifest::load(&a.manifest)?;
    let report = match &a.ckpt {
        Some(ckpt) => {
            let (_, model, store) = load_model(ckpt)?;
            evaluate_manifest(Estimator::Model(&model, &store), &manifest, split)?
        }
        None => evaluate_manifest(Estimator::Oracle, &manifest, split)?,
    };
    report.write(&a.report)?;
    let s = report.summary();
    let show = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.4}"));
    println!("utterances   {}", s.count);
    println!("si_sdr  in {}  out {}", show(s.si_sdr_in), show(s.si_sdr_out));
    println!("stoi    in {}  out {}", show(s.stoi_in), show(s.stoi_out));
    println!("snr     in {}  out {}", show(s.snr_in), show(s.snr_out));
    println!("not computed: {}", s.unavailable.join(", "));
    println!("report: {}", a.report.display());
    Ok(())
}

fn cmd_inspect(a: InspectArgs) -> CmdResult {
    let (cfg, from_ckpt) = match &a.ckpt {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            (RunConfig::from_settings(Preset::Desk, &ck.settings), true)
        }
        None => (resolve(&a.config, Vec::new())?, false),
    };
    let mut store = ParamStore::new();
    Model::new(&cfg.model, &mut store, cfg.train.seed).map_err(usage)?;
    let report = param_report(&store);
    println!("parameters:");
    for (module, n) in &report.breakdown {
        println!("  {module:<28} {n:>10}");
    }
    println!("  {:<28} {:>10}  ({:.3} M)", "total", report.total, report.total as f64 / 1e6);
    let stft = cfg.model.stft;
    println!("shapes:");
    println!("  F = {}", stft.n_bins());
    println!("  T = {} (1 s at {INSPECT_RATE} Hz)", stft.n_frames(INSPECT_RATE));
    println!("config:");
    for (k, v) in cfg.entries() {
        if from_ckpt && (k == "preset" || k.starts_with("paths.")) {
            continue;
        }
        println!("  {k} = {v}");
    }
    Ok(())
}
