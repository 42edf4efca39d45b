//! `lreid`: synthetic data generation, lifelong training, evaluation and plot-data emission.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lreid_core::attribute_text::ManifestAttributes;
use lreid_core::checkpoint;
use lreid_core::config::{Ablation, RunConfig};
use lreid_core::datakit::{make_synthetic_dataset, SplitConfig, StreamEntry, SynthConfig, TaskStream};
use lreid_core::evalkit::{curve_table, dump_features, forgetting_curve, generalization_curve, EvalData, FeatureMode};
use lreid_core::lifelong::TextCache;
use lreid_core::pipeline::{evaluate, load_eval_data, load_training_tasks, train, StreamDatasets};
use lreid_core::Error;

#[derive(Parser, Debug)]
#[command(name = "lreid", version, about = "Lifelong person re-identification experiments")]
struct Cli {
    /// Log progress (repeat for debug output).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate synthetic camera domains and a task stream listing them.
    MakeSynth(MakeSynthArgs),
    /// Train over a task stream, writing checkpoints, logs and a final report.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the seen and unseen datasets of a stream.
    Eval(EvalArgs),
    /// Emit forgetting and generalization curves over a run's checkpoints.
    Curves(CurvesArgs),
    /// Write retrieval features of a checkpoint for external plotting.
    DumpFeatures(DumpArgs),
}

#[derive(Args, Debug)]
struct OutRoot {
    /// Output root directory.
    #[arg(long, env = "LREID_OUT", default_value = "lreid-out")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct MakeSynthArgs {
    #[command(flatten)]
    root: OutRoot,
    /// Number of domains to generate.
    #[arg(long, default_value_t = 5)]
    domains: usize,
    /// How many of the last domains are held out as unseen.
    #[arg(long, default_value_t = 1)]
    unseen: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 20)]
    identities: usize,
    #[arg(long, default_value_t = 8)]
    images_per_identity: usize,
    #[arg(long, default_value_t = 4)]
    cameras: usize,
    /// Fraction of identities used for training.
    #[arg(long, default_value_t = 0.5)]
    train_fraction: f64,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    root: OutRoot,
    /// Run name; files go to `<out>/<name>`.
    #[arg(long, default_value = "run")]
    name: String,
    /// TOML run configuration [default: built-in defaults].
    #[arg(long)]
    config: Option<PathBuf>,
    /// Task-stream file [default: `stream` from the config, else `<out>/stream.txt`].
    #[arg(long)]
    stream: Option<PathBuf>,
    /// Random seed [default: from the config, 0].
    #[arg(long)]
    seed: Option<u64>,
    /// Epochs per task [default: from the config, 10].
    #[arg(long)]
    epochs: Option<usize>,
    /// Switch a component off: no-atg, no-af, no-kc, no-pfm, no-acn (repeatable) [default: none].
    #[arg(long, value_parser = parse_ablation)]
    ablate: Vec<Ablation>,
    /// Number of class tokens / global views [default: from the config, 3].
    #[arg(long)]
    n_views: Option<usize>,
    /// Attribute threshold for captions [default: from the config, 0.8].
    #[arg(long)]
    threshold: Option<f64>,
}

#[derive(Args, Debug)]
struct FeatureArg {
    /// Retrieval feature: global or global-and-attribute.
    #[arg(long, default_value = "global", value_parser = parse_feature)]
    feature: FeatureMode,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Task-stream file naming the seen and unseen datasets.
    #[arg(long)]
    stream: PathBuf,
    #[command(flatten)]
    feature: FeatureArg,
    /// Also write the report here, with a JSON copy next to it [default: stdout only].
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CurvesArgs {
    /// Directory holding the run's `*.ckpt` files.
    #[arg(long)]
    run_dir: PathBuf,
    #[arg(long)]
    stream: PathBuf,
    #[command(flatten)]
    feature: FeatureArg,
    /// Also write the tables here [default: stdout only].
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct DumpArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    stream: PathBuf,
    /// Destination TSV file.
    #[arg(long)]
    output: PathBuf,
    #[command(flatten)]
    feature: FeatureArg,
    /// Which samples to dump: query, gallery or test (both).
    #[arg(long, default_value = "test", value_parser = ["query", "gallery", "test"])]
    split: String,
}

fn parse_ablation(s: &str) -> Result<Ablation, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_feature(s: &str) -> Result<FeatureMode, String> {
    match s {
        "global" => Ok(FeatureMode::Global),
        "global-and-attribute" => Ok(FeatureMode::GlobalAndAttribute),
        _ => Err(format!("expected `global` or `global-and-attribute`, got {s:?}")),
    }
}

/// Failures split by exit code.
enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config { .. } => Failure::Usage(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn write(path: &Path, text: &str) -> CmdResult {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Failure::Runtime(format!("{}: {e}", dir.display())))?;
    }
    fs::write(path, text).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

fn make_synth(a: &MakeSynthArgs) -> CmdResult {
    if a.domains == 0 || a.unseen >= a.domains {
        return Err(Failure::Usage("--unseen must leave at least one of the --domains as seen".into()));
    }
    let split = SplitConfig { train_fraction: a.train_fraction, seed: a.seed };
    let mut entries = Vec::new();
    for i in 0..a.domains {
        let cfg = SynthConfig {
            n_identities: a.identities,
            images_per_identity: a.images_per_identity,
            n_cameras: a.cameras,
            ..SynthConfig::domain(i, a.seed)
        };
        let dir = a.root.out.join(&cfg.dataset);
        make_synthetic_dataset(&cfg, &split, &dir)?;
        for name in ["train.tsv", "query.tsv", "gallery.tsv"] {
            println!("{}", dir.join(name).display());
        }
        entries.push(StreamEntry { dir: PathBuf::from(&cfg.dataset), seen: i < a.domains - a.unseen });
    }
    let stream = a.root.out.join("stream.txt");
    write(&stream, &TaskStream { entries }.to_text())?;
    println!("{}", stream.display());
    Ok(())
}

fn load_stream(path: &Path) -> Result<(StreamDatasets, Vec<EvalData>, Vec<EvalData>), Failure> {
    let stream = TaskStream::load(path)?;
    let data = StreamDatasets::load(&stream)?;
    let seen = data.seen.iter().map(|s| load_eval_data(s, &ManifestAttributes)).collect::<Result<Vec<_>, _>>()?;
    let unseen = data.unseen.iter().map(|s| load_eval_data(s, &ManifestAttributes)).collect::<Result<Vec<_>, _>>()?;
    Ok((data, seen, unseen))
}

fn run_train(a: &TrainArgs) -> CmdResult {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    if let Some(n) = a.n_views {
        cfg.model.backbone.n_views = n;
    }
    if let Some(t) = a.threshold {
        cfg.model.caption.threshold = t;
    }
    for &ab in &a.ablate {
        cfg.apply(ab);
    }
    let stream_path = match (&a.stream, &cfg.stream) {
        (Some(p), _) => p.clone(),
        (None, Some(p)) => match &a.config {
            Some(c) if p.is_relative() => c.parent().unwrap_or(Path::new(".")).join(p),
            _ => p.clone(),
        },
        (None, None) => a.root.out.join("stream.txt"),
    };
    let run_dir = a.root.out.join(&a.name);
    cfg.stream = Some(stream_path.clone());
    cfg.out_dir = Some(run_dir.clone());
    cfg.validate()?;

    let (data, seen, unseen) = load_stream(&stream_path)?;
    let tasks = load_training_tasks(&data.seen, &ManifestAttributes)?;
    write(&run_dir.join("config.toml"), &cfg.to_toml())?;
    let (pair, report) = train(&cfg, &tasks, Some(&run_dir), &mut |pair, buffer| {
        log::info!("finished task {} with {} buffered exemplars", pair.task, buffer.len());
        Ok(())
    })?;
    let eval = evaluate(&pair.new, &cfg, &seen, &unseen)?;
    let text = eval.to_text();
    write(&run_dir.join("report.txt"), &text)?;
    write(&run_dir.join("report.json"), &serde_json::to_string_pretty(&eval).expect("report serialises"))?;
    for c in &report.checkpoints {
        println!("checkpoint {}", c.display());
    }
    print!("{text}");
    Ok(())
}

fn run_eval(a: &EvalArgs) -> CmdResult {
    let (model, _) = checkpoint::load(&a.checkpoint)?;
    let (_, seen, unseen) = load_stream(&a.stream)?;
    let mut cfg = RunConfig { model: model.config.clone(), ..RunConfig::default() };
    cfg.eval.feature = a.feature.feature;
    let report = evaluate(&model, &cfg, &seen, &unseen)?;
    let text = report.to_text();
    if let Some(p) = &a.report {
        write(p, &text)?;
        write(&p.with_extension("json"), &serde_json::to_string_pretty(&report).expect("report serialises"))?;
    }
    print!("{text}");
    Ok(())
}

fn checkpoints_in(dir: &Path) -> Result<Vec<PathBuf>, Failure> {
    let rd = fs::read_dir(dir).map_err(|e| Failure::Runtime(format!("{}: {e}", dir.display())))?;
    let mut out: Vec<PathBuf> = rd
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "ckpt"))
        .collect();
    out.sort();
    if out.is_empty() {
        return Err(Failure::Runtime(format!("no checkpoints in {}", dir.display())));
    }
    Ok(out)
}

fn run_curves(a: &CurvesArgs) -> CmdResult {
    let ckpts = checkpoints_in(&a.run_dir)?;
    let (_, seen, unseen) = load_stream(&a.stream)?;
    let mode = a.feature.feature;
    let mut text = String::new();
    for probe in &seen {
        text.push_str(&format!("# forgetting {}\n", probe.dataset));
        text.push_str(&curve_table(&forgetting_curve(&ckpts, probe, mode)?));
        text.push('\n');
    }
    if !unseen.is_empty() {
        text.push_str("# generalization unseen\n");
        text.push_str(&curve_table(&generalization_curve(&ckpts, &unseen, mode)?));
    }
    if let Some(p) = &a.output {
        write(p, &text)?;
    }
    print!("{text}");
    Ok(())
}

fn run_dump(a: &DumpArgs) -> CmdResult {
    let (model, _) = checkpoint::load(&a.checkpoint)?;
    let (_, seen, unseen) = load_stream(&a.stream)?;
    let mut samples = Vec::new();
    for d in seen.iter().chain(&unseen) {
        if a.split != "gallery" {
            samples.extend(d.query.iter().cloned());
        }
        if a.split != "query" {
            samples.extend(d.gallery.iter().cloned());
        }
    }
    if let Some(dir) = a.output.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Failure::Runtime(format!("{}: {e}", dir.display())))?;
    }
    let n = dump_features(&model, &samples, a.feature.feature, &a.output, &mut TextCache::new())?;
    println!("{n} features written to {}", a.output.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match &cli.command {
        Command::MakeSynth(a) => make_synth(a),
        Command::Train(a) => run_train(a),
        Command::Eval(a) => run_eval(a),
        Command::Curves(a) => run_curves(a),
        Command::DumpFeatures(a) => run_dump(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
