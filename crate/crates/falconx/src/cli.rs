use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use falconx_core::eval::{forecast_window, rolling_eval, InferenceMode};
use falconx_core::gradcheck::{grad_check_model, FD_STEP, FD_TOLERANCE};
use falconx_core::synth::{CorpusSpec, GeneratorKind};

use crate::checkpoint::{load_checkpoint, summarize};
use crate::config::RunConfig;
use crate::dataset::{generate_corpus, load_dataset};
use crate::error::{Error, Result};
use crate::report::{eval_table, forecast_table, write_text};
use crate::train::run_training;

#[derive(Parser, Debug)]
#[command(name = "falconx", version, about = "Multivariate quantile forecaster: data, training, evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic corpus
    GenData(GenData),
    /// Train a model and write checkpoints
    Train(Train),
    /// Write quantile forecasts past the end of each series
    Forecast(Forecast),
    /// Rolling evaluation against the seasonal-naive baseline
    Eval(Eval),
    /// Whole-model finite-difference gradient check
    Gradcheck(Gradcheck),
    /// Summarize a checkpoint
    Inspect(Inspect),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Kind {
    Kernel,
    Cotemporaneous,
    CotemporaneousTanh,
    Leadlag,
    Cointegration,
    Mixed,
}

#[derive(Args, Debug)]
pub struct GenData {
    #[arg(long, value_enum)]
    kind: Kind,
    #[arg(long)]
    entities: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 256)]
    length: usize,
    /// Variates per cotemporaneous entity (upper bound).
    #[arg(long, default_value_t = 3)]
    variates: usize,
    #[arg(long, default_value_t = 2)]
    lag_min: usize,
    #[arg(long, default_value_t = 6)]
    lag_max: usize,
    #[arg(long, default_value_t = 0.02)]
    noise: f64,
}

#[derive(Args, Debug)]
pub struct ConfigArg {
    /// Flat key = value configuration file.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    #[arg(long, value_parser = ["default", "tiny"])]
    preset: Option<String>,
}

impl ConfigArg {
    fn resolve(&self) -> Result<RunConfig> {
        match (&self.config, self.preset.as_deref()) {
            (Some(p), _) => RunConfig::load(p),
            (None, Some("tiny")) => Ok(RunConfig::tiny()),
            _ => Ok(RunConfig::default()),
        }
    }
}

#[derive(Args, Debug)]
pub struct Train {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Overrides the configured step count.
    #[arg(long)]
    steps: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Mv,
    Ci,
    Both,
}

impl ModeArg {
    fn modes(self) -> Vec<InferenceMode> {
        match self {
            ModeArg::Mv => vec![InferenceMode::Multivariate],
            ModeArg::Ci => vec![InferenceMode::ChannelIndependent],
            ModeArg::Both => vec![InferenceMode::Multivariate, InferenceMode::ChannelIndependent],
        }
    }
}

#[derive(Args, Debug)]
pub struct Forecast {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long, value_enum, default_value_t = ModeArg::Mv)]
    mode: ModeArg,
    /// Only forecast this entity.
    #[arg(long)]
    entity: Option<String>,
    /// Output CSV; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct Eval {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value_t = ModeArg::Both)]
    mode: ModeArg,
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long)]
    windows: Option<usize>,
    #[arg(long)]
    seasonality: Option<usize>,
    /// Output CSV; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct Gradcheck {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = FD_STEP)]
    step: f64,
}

#[derive(Args, Debug)]
pub struct Inspect {
    #[arg(long)]
    ckpt: PathBuf,
}

fn gen_data(a: &GenData) -> Result<String> {
    let kinds: Vec<GeneratorKind> = match a.kind {
        Kind::Kernel => vec![GeneratorKind::Kernel],
        Kind::Cotemporaneous => vec![GeneratorKind::Cotemporaneous],
        Kind::CotemporaneousTanh => vec![GeneratorKind::CotemporaneousTanh],
        Kind::Leadlag => vec![GeneratorKind::LeadLag],
        Kind::Cointegration => vec![GeneratorKind::Cointegration],
        Kind::Mixed => vec![
            GeneratorKind::Kernel,
            GeneratorKind::Cotemporaneous,
            GeneratorKind::CotemporaneousTanh,
            GeneratorKind::LeadLag,
            GeneratorKind::Cointegration,
        ],
    };
    let k = kinds.len();
    let parts = kinds
        .into_iter()
        .enumerate()
        .map(|(i, kind)| (kind, a.entities / k + usize::from(i < a.entities % k)))
        .filter(|p| p.1 > 0)
        .collect();
    let spec = CorpusSpec {
        parts,
        length: a.length,
        variates: a.variates,
        lag_min: a.lag_min,
        lag_max: a.lag_max,
        noise_std: a.noise,
        ..CorpusSpec::default()
    };
    let manifest = generate_corpus(&spec, a.seed, &a.out)?;
    Ok(format!("wrote {} entities to {}", manifest.entities.len(), a.out.display()))
}

fn train(a: &Train) -> Result<String> {
    let mut config = a.config.resolve()?;
    if let Some(steps) = a.steps {
        config.train = config.train.with_steps(steps);
        config.validate()?;
    }
    let corpus = load_dataset(&a.data)?;
    let outcome = run_training(&config, &corpus, a.seed, Some(&a.out))?;
    let last = outcome.trace.last().map_or(f64::NAN, |r| r.loss);
    Ok(format!(
        "trained {} steps, final loss {last}, checkpoint {}",
        outcome.trace.len(),
        outcome.checkpoints.last().map_or(String::new(), |p| p.display().to_string())
    ))
}

fn emit(out: Option<&Path>, text: &str) -> Result<String> {
    match out {
        Some(p) => {
            write_text(p, text)?;
            Ok(format!("wrote {}", p.display()))
        }
        None => Ok(text.trim_end().to_string()),
    }
}

fn forecast(a: &Forecast) -> Result<String> {
    let (model, config) = load_checkpoint(&a.ckpt, None)?;
    let corpus = load_dataset(&a.data)?;
    let horizon = a.horizon.unwrap_or(config.eval.horizon);
    let mode = match a.mode {
        ModeArg::Ci => InferenceMode::ChannelIndependent,
        _ => InferenceMode::Multivariate,
    };
    let mut rows = Vec::new();
    for series in corpus.iter().filter(|s| a.entity.as_ref().is_none_or(|id| &s.id == id)) {
        let f = forecast_window(&model, series, series.len(), horizon, config.eval.max_context, mode)?;
        rows.push((series.id.clone(), f));
    }
    if rows.is_empty() {
        return Err(Error::Usage("no matching entity in dataset".into()));
    }
    emit(a.out.as_deref(), &forecast_table(&rows)?)
}

fn eval(a: &Eval) -> Result<String> {
    let (model, config) = load_checkpoint(&a.ckpt, None)?;
    let corpus = load_dataset(&a.data)?;
    let mut cfg = config.eval.clone();
    cfg.modes = a.mode.modes();
    cfg.horizon = a.horizon.unwrap_or(cfg.horizon);
    cfg.windows = a.windows.unwrap_or(cfg.windows);
    cfg.seasonality = a.seasonality.unwrap_or(cfg.seasonality);
    let report = rolling_eval(&model, &corpus, &cfg)?;
    for (id, why) in &report.skipped {
        log::warn!("skipped {id}: {why}");
    }
    let name = a
        .data
        .file_name()
        .map_or_else(|| a.data.display().to_string(), |n| n.to_string_lossy().into_owned());
    emit(a.out.as_deref(), &eval_table(&name, &report, &cfg.modes)?)
}

fn gradcheck(a: &Gradcheck) -> Result<String> {
    let config = a.config.resolve()?;
    let report = grad_check_model(&config.model, a.seed, &config.train.frozen, a.step)?;
    let mut lines = Vec::new();
    for g in &report.groups {
        if g.skipped {
            lines.push(format!("{} skipped", g.group));
        } else {
            lines.push(format!("{} {:e} {}", g.group, g.max_rel_error, g.worst));
        }
    }
    println!("{}", lines.join("\n"));
    let failed: Vec<String> = report.failures(FD_TOLERANCE).iter().map(|g| g.group.clone()).collect();
    if failed.is_empty() {
        Ok(format!("max relative error {:e} below {FD_TOLERANCE:e}", report.max_rel_error()))
    } else {
        Err(Error::GradCheck(failed))
    }
}

pub fn execute(cli: &Cli) -> Result<String> {
    match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Forecast(a) => forecast(a),
        Command::Eval(a) => eval(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Inspect(a) => summarize(&a.ckpt).map(|s| s.trim_end().to_string()),
    }
}

/// Parses `argv` (program name first), runs the command and returns the
/// exit status. Errors are reported on stderr as one line.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(msg) => {
            if !msg.is_empty() {
                println!("{msg}");
            }
            0
        }
        Err(e) => {
            let line = e.to_string().replace('\n', " ");
            eprintln!("error: {line}");
            e.exit_code()
        }
    }
}
