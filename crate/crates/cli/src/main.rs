use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use wavemoe::data::IngestFormat;
use wavemoe::evalbench::Fusion;
use wavemoe::run::{self, EvalSettings, InspectReport, RunConfig};
use wavemoe::Error;

const EXIT_INTERNAL: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_NUMERIC: u8 = 4;
const EXIT_IO: u8 = 5;

/// Wavelet-augmented mixture-of-experts forecaster.
#[derive(Parser)]
#[command(name = "wavemoe", version)]
struct Cli {
    /// Worker threads for data-parallel work (1 gives the reference order).
    #[arg(long, global = true, env = "WAVEMOE_WORKERS")]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a training corpus from raw series files.
    Preprocess(PreprocessArgs),
    /// Pretrain a model on a corpus.
    Train(TrainArgs),
    /// Score a checkpoint on a directory of CSV datasets.
    Evaluate(EvaluateArgs),
    /// Forecast the continuation of one series.
    Forecast(ForecastArgs),
    /// Print configuration, parameter counts and routing statistics.
    Inspect(InspectArgs),
}

#[derive(Args)]
struct PreprocessArgs {
    #[arg(long)]
    input: PathBuf,
    /// csv or jsonl; all supported files are read when omitted
    #[arg(long)]
    format: Option<String>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    window: Option<usize>,
    /// Run config supplying [data] settings
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    value_field: Option<String>,
    #[arg(long)]
    id_field: Option<String>,
    #[arg(long)]
    domain_field: Option<String>,
    /// Domain for series without a domain field
    #[arg(long)]
    domain: Option<String>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Run config (TOML); the full profile when omitted
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    log_interval: Option<u64>,
    #[arg(long)]
    checkpoint_interval: Option<u64>,
    /// Continue from a checkpoint written with the same model config
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EvalFlags {
    #[arg(long, default_value_t = 512)]
    context: usize,
    /// time (time head only) or mean (average with the decoded wavelet head)
    #[arg(long, default_value = "time")]
    fusion: String,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 96)]
    horizon: usize,
    #[command(flatten)]
    eval: EvalFlags,
    /// Report in the original scale instead of context z-scores
    #[arg(long)]
    raw: bool,
    #[arg(long)]
    report: PathBuf,
    /// Write one SVG per series under <report>/plots
    #[arg(long)]
    plots: bool,
}

#[derive(Args)]
struct ForecastArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    series: PathBuf,
    #[arg(long)]
    horizon: usize,
    #[command(flatten)]
    eval: EvalFlags,
    /// CSV column to forecast (default: "value", else the first numeric column)
    #[arg(long)]
    column: Option<String>,
    #[arg(long)]
    plot: Option<PathBuf>,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long, required_unless_present = "config", conflicts_with = "config")]
    model: Option<PathBuf>,
    /// Count parameters for a run config without a checkpoint
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, requires = "model")]
    routing_stats: Option<PathBuf>,
    #[arg(long, default_value_t = 512)]
    context: usize,
    #[arg(long)]
    json: bool,
}

#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config(_)
            | Error::AlignmentUnsupported(_)
            | Error::UnsupportedWavelet(_) => EXIT_USAGE,
            Error::Ingest { .. }
            | Error::NoSeries(_)
            | Error::EmptyCorpus
            | Error::Format(_)
            | Error::VersionMismatch { .. }
            | Error::Checksum(_)
            | Error::ConfigMismatch(_)
            | Error::DegenerateWindow
            | Error::InsufficientContext(_)
            | Error::InvalidLength(_)
            | Error::MalformedPyramid(_) => EXIT_DATA,
            Error::Numeric(_) => EXIT_NUMERIC,
            Error::Io(_) => EXIT_IO,
            _ => EXIT_INTERNAL,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: EXIT_USAGE,
        message: message.into(),
    }
}

fn require_file(path: &Path, what: &str) -> Result<(), Failure> {
    if path.is_file() {
        Ok(())
    } else {
        Err(usage(format!("{what} {} does not exist", path.display())))
    }
}

fn require_dir(path: &Path, what: &str) -> Result<(), Failure> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(usage(format!("{what} {} is not a directory", path.display())))
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig, Failure> {
    match path {
        Some(p) => {
            require_file(p, "config")?;
            Ok(RunConfig::load(p)?)
        }
        None => Ok(RunConfig::default()),
    }
}

fn eval_settings(flags: &EvalFlags, horizon: usize, normalize: bool) -> Result<EvalSettings, Failure> {
    Ok(EvalSettings {
        context_length: flags.context,
        horizon,
        normalize,
        fusion: flags.fusion.parse::<Fusion>()?,
    })
}

fn preprocess(a: PreprocessArgs) -> Result<(), Failure> {
    require_dir(&a.input, "input")?;
    let format = a.format.as_deref().map(str::parse::<IngestFormat>).transpose()?;
    let mut config = load_config(a.config.as_deref())?;
    let d = &mut config.data;
    if let Some(w) = a.window {
        d.window = w;
    }
    if let Some(v) = a.value_field {
        d.ingest.value_field = v;
    }
    if let Some(v) = a.id_field {
        d.ingest.id_field = Some(v);
    }
    if let Some(v) = a.domain_field {
        d.ingest.domain_field = Some(v);
    }
    if let Some(v) = a.domain {
        d.ingest.default_domain = v;
    }
    let summary = run::preprocess(&a.input, format, &a.out, &config.data)?;
    let mut provenance = a.out.clone().into_os_string();
    provenance.push(".run_config.toml");
    std::fs::write(provenance, config.to_toml()).map_err(Error::from)?;
    print!("{}", summary.render());
    Ok(())
}

fn train(a: TrainArgs) -> Result<(), Failure> {
    require_file(&a.corpus, "corpus")?;
    if let Some(r) = &a.resume {
        require_file(r, "checkpoint")?;
    }
    let mut config = load_config(a.config.as_deref())?;
    if let Some(s) = a.seed {
        config.set_seed(s);
    }
    let t = &mut config.train;
    if let Some(v) = a.steps {
        t.total_steps = v;
    }
    if let Some(v) = a.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = a.lr {
        t.base_lr = v;
    }
    if let Some(v) = a.log_interval {
        t.log_interval = v;
    }
    if let Some(v) = a.checkpoint_interval {
        t.checkpoint_interval = v;
    }
    let outcome = run::train(&a.corpus, &config, &a.out, a.resume.as_deref())?;
    match (outcome.history.first(), outcome.history.last()) {
        (Some(first), Some(last)) => println!(
            "trained {} steps: loss {:.5} -> {:.5}; checkpoint in {}",
            outcome.state.step,
            first.total,
            last.total,
            a.out.display()
        ),
        _ => println!(
            "step {}: checkpoint written to {}",
            outcome.state.step,
            a.out.display()
        ),
    }
    Ok(())
}

fn evaluate(a: EvaluateArgs) -> Result<(), Failure> {
    require_file(&a.model, "checkpoint")?;
    require_dir(&a.data, "data")?;
    let eval = eval_settings(&a.eval, a.horizon, !a.raw)?;
    let report = run::evaluate(&a.model, &a.data, &eval, &a.report, a.plots)?;
    print!("{}", report.to_table());
    Ok(())
}

fn forecast(a: ForecastArgs) -> Result<(), Failure> {
    require_file(&a.model, "checkpoint")?;
    require_file(&a.series, "series")?;
    let eval = eval_settings(&a.eval, a.horizon, true)?;
    let values = run::forecast(&a.model, &a.series, a.column.as_deref(), &eval, a.plot.as_deref())?;
    for v in values {
        println!("{v}");
    }
    Ok(())
}

fn inspect(a: InspectArgs) -> Result<(), Failure> {
    let report = match (&a.model, &a.config) {
        (Some(model), _) => {
            require_file(model, "checkpoint")?;
            if let Some(c) = &a.routing_stats {
                require_file(c, "corpus")?;
            }
            run::inspect(model, a.routing_stats.as_deref(), a.context)?
        }
        (None, config) => {
            let config = load_config(config.as_deref())?;
            config.model.validate()?;
            InspectReport::from_config(config.model)
        }
    };
    if a.json {
        println!("{}", serde_json::to_string_pretty(&report).expect("serializes"));
    } else {
        print!("{}", report.render());
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    if let Some(n) = cli.workers {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: worker pool: {e}");
            return ExitCode::from(EXIT_USAGE);
        }
    }
    let result = match cli.command {
        Command::Preprocess(a) => preprocess(a),
        Command::Train(a) => train(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Forecast(a) => forecast(a),
        Command::Inspect(a) => inspect(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
