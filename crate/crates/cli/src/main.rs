use std::io::{ErrorKind, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use pulse_core::pipeline::{read_json, Pipeline, Stage, StageOutcome};
use pulse_core::{PipelineConfig, PulseError, Style, SyntheticSpec};

#[derive(Parser)]
#[command(name = "pulse", version, about = "Ransomware classification from ASM instruction traces")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load and parse the corpus, normalize and segment functions.
    Ingest(Common),
    /// Same stage as `ingest`; prints per-split function counts.
    Normalize(Common),
    /// Deduplicate, filter across labels and print corpus statistics.
    Stats(Common),
    /// Print rank-frequency power-law fits.
    Zipf(Common),
    /// Train the subword tokenizer on the training functions.
    TrainTokenizer(Common),
    /// Train the function classifier.
    TrainModel(Common),
    /// Classify validation and test functions and aggregate per sample.
    Classify(Common),
    /// Fit the sample hyperplane, score the test samples and audit leakage.
    Evaluate(Common),
    /// Generate a synthetic corpus.
    Synth(Common),
    /// Run the whole pipeline.
    Run(Common),
}

#[derive(Args, Clone)]
struct Common {
    /// Pipeline configuration (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Global seed; every stage seed derives from it.
    #[arg(long)]
    seed: Option<u64>,
    /// Normalization style: spaced (separate words) or concatenated.
    #[arg(long)]
    mode: Option<Style>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Corpus manifest, overriding the config.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Use the default synthetic corpus when the config defines none.
    #[arg(long)]
    synthetic: bool,
}

impl Command {
    fn parts(&self) -> (&Common, Stage) {
        match self {
            Command::Ingest(c) | Command::Normalize(c) => (c, Stage::Normalize),
            Command::Stats(c) | Command::Zipf(c) => (c, Stage::Corpus),
            Command::TrainTokenizer(c) => (c, Stage::Tokenizer),
            Command::TrainModel(c) => (c, Stage::Model),
            Command::Classify(c) => (c, Stage::Classify),
            Command::Evaluate(c) | Command::Run(c) => (c, Stage::Evaluate),
            Command::Synth(c) => (c, Stage::Synth),
        }
    }
}

fn load_config(c: &Common, synth: bool) -> Result<PipelineConfig, PulseError> {
    let mut config = match &c.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| PulseError::io(p, e))?;
            serde_json::from_str(&text).map_err(|e| PulseError::Config(format!("{}: {e}", p.display())))?
        }
        None => PipelineConfig::default(),
    };
    if let Some(seed) = c.seed {
        config.seed = seed;
    }
    if let Some(mode) = c.mode {
        config.normalize.style = mode;
    }
    if let Some(out) = &c.out {
        config.paths.output_dir = out.clone();
    }
    if let Some(m) = &c.manifest {
        config.paths.manifest = Some(m.clone());
        config.synthetic = None;
    }
    if (c.synthetic || synth) && config.synthetic.is_none() {
        config.synthetic = Some(SyntheticSpec::default());
    }
    config.validate()?;
    log::info!("seed {} style {:?} output {}", config.seed, config.normalize.style, config.paths.output_dir.display());
    Ok(config)
}

/// Write a line to stdout; a closed pipe (e.g. `| head`) is not an error.
fn emit(line: &str) -> Result<(), PulseError> {
    match writeln!(std::io::stdout().lock(), "{line}") {
        Err(e) if e.kind() != ErrorKind::BrokenPipe => Err(PulseError::io(Path::new("<stdout>"), e)),
        _ => Ok(()),
    }
}

fn print_json(path: &Path) -> Result<(), PulseError> {
    let v: serde_json::Value = read_json(path)?;
    emit(&serde_json::to_string_pretty(&v)?)
}

fn run(cli: Cli) -> Result<(), PulseError> {
    let (common, last) = cli.command.parts();
    let config = load_config(common, matches!(cli.command, Command::Synth(_)))?;
    let pipeline = Pipeline::new(config)?;
    let outcomes = pipeline.run_until(last)?;
    for StageOutcome { stage, skipped, .. } in &outcomes {
        eprintln!("{stage}: {}", if *skipped { "up to date" } else { "done" });
    }
    let dir = |s: Stage| pipeline.stage_dir(s);
    match cli.command {
        Command::Synth(_) => emit(&dir(Stage::Synth).join("manifest.json").display().to_string())?,
        Command::Ingest(_) | Command::Normalize(_) => print_json(&dir(Stage::Normalize).join("ingest.json"))?,
        Command::Stats(_) => print_json(&dir(Stage::Corpus).join("stats.json"))?,
        Command::Zipf(_) => print_json(&dir(Stage::Corpus).join("zipf_fit.json"))?,
        Command::TrainTokenizer(_) => print_json(&dir(Stage::Tokenizer).join("token_stats.json"))?,
        Command::TrainModel(_) => print_json(&dir(Stage::Model).join("training_report.json"))?,
        Command::Classify(_) => emit(&dir(Stage::Classify).display().to_string())?,
        Command::Evaluate(_) | Command::Run(_) => {
            print_json(&dir(Stage::Evaluate).join("metrics.json"))?;
            print_json(&dir(Stage::Evaluate).join("audit.json"))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
