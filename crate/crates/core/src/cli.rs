//! Command-line interface.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use crate::corpus::{
    featurize, featurize_sequence, parse_conll, parse_partial, parse_tokens, write_partial,
    ColumnSpec, Corpus, FeaturizerConfig,
};
use crate::error::{Error, Result};
use crate::eval::{run_experiment, summary_table, to_csv, ExperimentConfig, Setting};
use crate::inference::{train, TrainConfig};
use crate::model::{self, DecodeDefaults};
use crate::piecewise::decompose;
use crate::predict::{emission_scores, format_sequence, Decoder, Predictor};

/// Environment variable capping experiment worker threads.
pub const THREADS_ENV: &str = "SGPPSL_THREADS";

#[derive(Debug, Parser)]
#[command(
    name = "sgppsl",
    version,
    about = "Structured Gaussian processes for partial sequence labeling"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Turn a gold CoNLL file into partial annotations.
    Synthesize(SynthesizeArgs),
    /// Fit a model on partially annotated data.
    Train(TrainArgs),
    /// Label tokens with a trained model.
    Predict(PredictArgs),
    /// Cross-validated experiments over a grid of settings.
    Eval(EvalArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Cl,
    Flip,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DataFormat {
    /// Tab-separated partial annotations (`token<TAB>A|*B|C`).
    Partial,
    /// Whitespace-separated CoNLL; the label column is taken as exact.
    Conll,
}

#[derive(Debug, Args)]
pub struct ColumnArgs {
    /// Zero-based token column of CoNLL input.
    #[arg(long, default_value_t = 0)]
    pub token_col: usize,
    /// Zero-based label column of CoNLL input (default: last column).
    #[arg(long)]
    pub label_col: Option<usize>,
}

impl ColumnArgs {
    fn spec(&self) -> ColumnSpec {
        match self.label_col {
            Some(l) => ColumnSpec::new(self.token_col, l),
            None => ColumnSpec::last_label(self.token_col),
        }
    }
}

#[derive(Debug, Args)]
pub struct SynthesizeArgs {
    #[arg(long = "in", value_name = "FILE")]
    pub input: PathBuf,
    #[arg(long = "out", value_name = "FILE")]
    pub output: PathBuf,
    #[arg(long, value_enum, default_value_t = Mode::Cl)]
    pub mode: Mode,
    /// Negatives added per ambiguous position (cl mode).
    #[arg(long, default_value_t = 2)]
    pub cl: usize,
    /// Flip probability per negative label (flip mode).
    #[arg(long, default_value_t = 0.3)]
    pub r: f64,
    /// Fraction of sequences left exactly annotated.
    #[arg(long, default_value_t = 0.1)]
    pub p: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub columns: ColumnArgs,
}

#[derive(Debug, Args)]
pub struct FeatureArgs {
    /// Hashed feature dimension.
    #[arg(long, default_value_t = 512)]
    pub dim: usize,
    /// Context window on each side.
    #[arg(long, default_value_t = 1)]
    pub window: usize,
}

impl FeatureArgs {
    fn config(&self) -> FeaturizerConfig {
        FeaturizerConfig {
            dim: self.dim,
            window: self.window,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainingArgs {
    #[arg(long, default_value_t = 10)]
    pub max_alt: usize,
    #[arg(long, default_value_t = 10)]
    pub max_outer: usize,
    #[arg(long, default_value_t = 200)]
    pub max_inner: usize,
    #[arg(long, default_value_t = 1e-6)]
    pub tol_elbo: f64,
    #[arg(long, default_value_t = 1e-7)]
    pub tol_inner: f64,
    #[arg(long, default_value_t = 1e-6)]
    pub jitter: f64,
    /// Confidence floor applied before renormalizing.
    #[arg(long, default_value_t = 1e-4)]
    pub c_min: f64,
}

impl TrainingArgs {
    fn config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            max_alt: self.max_alt,
            max_outer: self.max_outer,
            max_inner: self.max_inner,
            tol_elbo: self.tol_elbo,
            tol_inner: self.tol_inner,
            jitter: self.jitter,
            c_min: self.c_min,
            rng_seed: seed,
            ..TrainConfig::default()
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_name = "FILE")]
    pub data: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub model: PathBuf,
    #[arg(long, value_enum, default_value_t = DataFormat::Partial)]
    pub format: DataFormat,
    #[command(flatten)]
    pub columns: ColumnArgs,
    #[command(flatten)]
    pub features: FeatureArgs,
    #[command(flatten)]
    pub training: TrainingArgs,
    /// K nearest neighbours stored as the decoding default.
    #[arg(long, default_value_t = 5)]
    pub knn: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Write the optimization trace as JSON lines.
    #[arg(long, value_name = "FILE")]
    pub trace: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long, value_name = "FILE")]
    pub model: PathBuf,
    /// CoNLL-style tokens, one per line, blank lines between sequences.
    #[arg(long = "in", value_name = "FILE")]
    pub input: PathBuf,
    /// Output file (default: stdout).
    #[arg(long = "out", value_name = "FILE")]
    pub output: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Decoder::Weighted)]
    pub decoder: Decoder,
    /// Override the model's stored K_nn.
    #[arg(long)]
    pub knn: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub token_col: usize,
    /// Append the largest emission score of each position.
    #[arg(long)]
    pub scores: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Gold CoNLL data.
    #[arg(long, value_name = "FILE")]
    pub data: PathBuf,
    /// CSV output.
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    #[arg(long, default_value = "task")]
    pub task: String,
    #[arg(long, value_enum, default_value_t = Mode::Cl)]
    pub mode: Mode,
    #[arg(long, value_delimiter = ',', default_values_t = [2usize])]
    pub cl: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = [0.3f64])]
    pub r: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_values_t = [0.1f64])]
    pub p: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_values_t = [0u64])]
    pub seeds: Vec<u64>,
    #[arg(long, default_value_t = 5)]
    pub folds: usize,
    #[arg(long, default_value_t = 5)]
    pub knn: usize,
    /// Add the random-disambiguation reference rows.
    #[arg(long)]
    pub reference: bool,
    /// Worker threads (default: $SGPPSL_THREADS, else all cores).
    #[arg(long)]
    pub threads: Option<usize>,
    #[command(flatten)]
    pub columns: ColumnArgs,
    #[command(flatten)]
    pub features: FeatureArgs,
    #[command(flatten)]
    pub training: TrainingArgs,
}

/// Process exit status for an error: 2 usage, 3 data, 4 numerical.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => 2,
        Error::Numerical(_) => 4,
        _ => 3,
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Data(format!("cannot write {}: {e}", path.display())))
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synthesize(a) => synthesize(&a),
        Command::Train(a) => train_cmd(&a),
        Command::Predict(a) => predict(&a),
        Command::Eval(a) => eval(&a),
    }
}

fn synthesize(a: &SynthesizeArgs) -> Result<()> {
    let gold = parse_conll(&read(&a.input)?, a.columns.spec())?;
    let setting = match a.mode {
        Mode::Cl => Setting::Cl { cl: a.cl, p: a.p },
        Mode::Flip => Setting::Flip { r: a.r, p: a.p },
    };
    let partial = setting.synthesize(&gold, a.seed)?;
    write(&a.output, &write_partial(&partial))
}

fn load_training(a: &TrainArgs) -> Result<Corpus> {
    let text = read(&a.data)?;
    match a.format {
        DataFormat::Partial => parse_partial(&text, None),
        DataFormat::Conll => parse_conll(&text, a.columns.spec()),
    }
}

fn train_cmd(a: &TrainArgs) -> Result<()> {
    if a.knn == 0 {
        return Err(Error::Config("--knn must be at least 1".into()));
    }
    let features = a.features.config();
    let corpus = featurize(&load_training(a)?, &features)?;
    let fs = decompose(&corpus)?;
    let mut model = train(&corpus, &fs, &a.training.config(a.seed))?;
    model.featurizer = Some(features);
    if let Some(path) = &a.trace {
        let mut out = String::new();
        for rec in &model.report.trace {
            out.push_str(&serde_json::to_string(rec)?);
            out.push('\n');
        }
        write(path, &out)?;
    }
    let mut stderr = std::io::stderr().lock();
    for rec in model
        .report
        .trace
        .iter()
        .filter(|r| r.phase == "confidence")
    {
        let _ = writeln!(
            stderr,
            "alternation {}: L_l = {:.6}",
            rec.alternation, rec.elbo
        );
    }
    let _ = writeln!(stderr, "final L_l = {:.6}", model.elbo);
    let decode = DecodeDefaults {
        knn: a.knn,
        ..DecodeDefaults::default()
    };
    model::save(&model, &decode, &a.model)
}

fn predict(a: &PredictArgs) -> Result<()> {
    let (model, defaults) = model::load(&a.model)?;
    let features = model
        .featurizer
        .ok_or_else(|| Error::Data("model carries no featurizer configuration".into()))?;
    let knn = a.knn.unwrap_or(defaults.knn);
    let sequences = parse_tokens(&read(&a.input)?, a.token_col)?;
    let predictor = Predictor::new(&model)?;
    let names = model.label_set.names();
    let mut out = String::new();
    for surfaces in &sequences {
        let refs: Vec<&str> = surfaces.iter().map(String::as_str).collect();
        let feats = featurize_sequence(&refs, &features)?;
        let labels = predictor.decode(&feats, a.decoder, knn)?;
        let label_names: Vec<&str> = labels.iter().map(|&y| names[y].as_str()).collect();
        let conf = if a.scores {
            let e = emission_scores(&predictor.posterior(&feats)?);
            Some(e.row_iter().map(|r| r.max()).collect::<Vec<f64>>())
        } else {
            None
        };
        out.push_str(&format_sequence(surfaces, &label_names, conf.as_deref()));
    }
    match &a.output {
        Some(path) => write(path, &out),
        None => std::io::stdout()
            .lock()
            .write_all(out.as_bytes())
            .map_err(Error::from),
    }
}

fn threads_from_env() -> Result<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => v.trim().parse::<usize>().map(Some).map_err(|_| {
            Error::Config(format!(
                "{THREADS_ENV} must be a positive integer, got {v:?}"
            ))
        }),
        Err(_) => Ok(None),
    }
}

fn eval(a: &EvalArgs) -> Result<()> {
    let gold = featurize(
        &parse_conll(&read(&a.data)?, a.columns.spec())?,
        &a.features.config(),
    )?;
    let mut settings = Vec::new();
    for &p in &a.p {
        match a.mode {
            Mode::Cl => settings.extend(a.cl.iter().map(|&cl| Setting::Cl { cl, p })),
            Mode::Flip => settings.extend(a.r.iter().map(|&r| Setting::Flip { r, p })),
        }
    }
    let threads = match a.threads {
        Some(n) => Some(n),
        None => threads_from_env()?,
    };
    let config = ExperimentConfig {
        task: a.task.clone(),
        settings,
        seeds: a.seeds.clone(),
        folds: a.folds,
        train: a.training.config(a.seeds.first().copied().unwrap_or(0)),
        knn: a.knn,
        reference: a.reference,
        threads,
    };
    let results = run_experiment(&gold, &config)?;
    write(&a.out, &to_csv(&results))?;
    info!("wrote {} rows to {}", results.len(), a.out.display());
    eprint!("{}", summary_table(&results));
    Ok(())
}
