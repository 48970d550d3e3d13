//! Command-line entry point: `gen-data`, `train`, `eval`, `predict` and
//! `plot`. All randomness comes from `--seed`.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::evaluation::{evaluate, EvalError};
use crate::model::{prepare, Model, ModelError};
use crate::nn::{Checkpoint, NnError};
use crate::plot::{write_plots, PlotError, PredictionDump};
use crate::scene::{filter_unqualified, generate_dataset, load_dataset, save_dataset, GenConfig, SceneError};
use crate::training::{resume_training, run_training, split_validation, TrainConfig, TrainError};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Json { path: String, message: String },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Plot(#[from] PlotError),
}

#[derive(Debug, Parser)]
#[command(
    name = "crossview",
    version,
    about = "Cross-view multimodal trajectory prediction"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate synthetic intersection scenes as JSON Lines.
    GenData(GenDataArgs),
    /// Train a model; writes last.ckpt, best.ckpt and history.json.
    Train(TrainArgs),
    /// Evaluate a checkpoint and write the JSON report.
    Eval(EvalArgs),
    /// Dump per-sample predictions as JSON Lines.
    Predict(PredictArgs),
    /// Render BEV and FPV panels of a prediction dump to PNG files.
    Plot(PlotArgs),
}

#[derive(Debug, Args)]
struct GenDataArgs {
    /// Output JSONL file.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 100)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Outgoing lanes per intersection (2 to 4).
    #[arg(long, default_value_t = 2)]
    branches: usize,
    #[arg(long, default_value_t = 8)]
    t_obs: usize,
    #[arg(long, default_value_t = 12)]
    t_pred: usize,
    /// Position noise standard deviation, meters.
    #[arg(long, default_value_t = 0.2)]
    noise_sigma: f64,
    /// Drop scenes whose future is visible in the camera for less than
    /// this fraction of steps.
    #[arg(long, default_value_t = 0.0)]
    min_visible_future: f64,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Training scenes (JSONL).
    #[arg(long)]
    data: PathBuf,
    /// JSON file with training config fields; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Validation scenes; without it the tail `validation_fraction` of
    /// --data is held out.
    #[arg(long)]
    validation_data: Option<PathBuf>,
    /// Output directory for checkpoints and history.
    #[arg(long, default_value = "run")]
    out: PathBuf,
    /// Continue the run stored in --out.
    #[arg(long)]
    resume: bool,
    /// [default: 30]
    #[arg(long)]
    epochs: Option<usize>,
    /// [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// [default: 16]
    #[arg(long)]
    batch_size: Option<usize>,
    /// [default: 0.001]
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Random-mask drop probability [default: 0.1]
    #[arg(long)]
    beta: Option<f64>,
    /// Coarse attention threshold [default: 0.05]
    #[arg(long)]
    epsilon: Option<f64>,
    /// [default: 128]
    #[arg(long)]
    embedding_size: Option<usize>,
    /// [default: 256]
    #[arg(long)]
    hidden_size: Option<usize>,
    /// Predict goals per view instead of through shared 3D queries.
    #[arg(long)]
    no_shared_queries: bool,
    /// Disable the training-time random mask.
    #[arg(long)]
    no_random_mask: bool,
    /// Use the plain global graph instead of cross-view attention.
    #[arg(long)]
    no_cross_attention: bool,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Report path; the report is also printed.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct PredictArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Output JSONL, one prediction per scene.
    #[arg(long)]
    out: PathBuf,
    /// Only the first N scenes.
    #[arg(long)]
    limit: Option<usize>,
}

#[derive(Debug, Args)]
struct PlotArgs {
    /// Prediction dump written by `predict`.
    #[arg(long)]
    predictions: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn gen_data(a: GenDataArgs) -> Result<(), CliError> {
    let cfg = GenConfig {
        branches: a.branches,
        t_obs: a.t_obs,
        t_pred: a.t_pred,
        noise_sigma: a.noise_sigma,
        ..GenConfig::default()
    };
    let samples = filter_unqualified(generate_dataset(a.count, a.seed, &cfg)?, a.min_visible_future)?;
    save_dataset(&samples, &a.out)?;
    println!("wrote {} scenes to {}", samples.len(), a.out.display());
    Ok(())
}

fn train_config(a: &TrainArgs) -> Result<TrainConfig, CliError> {
    let mut cfg = match &a.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(io_err(path))?;
            let de = &mut serde_json::Deserializer::from_str(&text);
            serde_path_to_error::deserialize(de).map_err(|e| CliError::Json {
                path: path.display().to_string(),
                message: e.to_string(),
            })?
        }
        None => TrainConfig::default(),
    };
    macro_rules! set {
        ($($field:ident),*) => { $(if let Some(v) = a.$field { cfg.$field = v; })* };
    }
    set!(
        epochs,
        seed,
        batch_size,
        learning_rate,
        beta,
        epsilon,
        embedding_size,
        hidden_size
    );
    cfg.use_shared_queries &= !a.no_shared_queries;
    cfg.use_random_mask &= !a.no_random_mask;
    cfg.use_cross_attention &= !a.no_cross_attention;
    cfg.validate()?;
    Ok(cfg)
}

fn train(a: TrainArgs) -> Result<(), CliError> {
    let cfg = train_config(&a)?;
    let data = load_dataset(&a.data)?;
    let (train, val) = match &a.validation_data {
        Some(p) => (data, load_dataset(p)?),
        None => split_validation(data, cfg.validation_fraction),
    };
    if train.is_empty() {
        return Err(CliError::Invalid(format!(
            "{}: no training scenes",
            a.data.display()
        )));
    }
    let out = if a.resume {
        resume_training(&train, &val, &cfg, &a.out)?
    } else {
        run_training(&train, &val, &cfg, Some(&a.out))?
    };
    println!(
        "trained {} epochs on {} scenes; checkpoints in {} (best epoch {})",
        out.history.len(),
        train.len(),
        a.out.display(),
        out.best.meta["best_epoch"]
    );
    Ok(())
}

fn load_model(path: &Path) -> Result<Model, CliError> {
    Ok(Model::from_checkpoint(&Checkpoint::load(path)?)?)
}

fn eval(a: EvalArgs) -> Result<(), CliError> {
    let model = load_model(&a.checkpoint)?;
    let report = evaluate(&model, &load_dataset(&a.data)?)?;
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    if let Some(out) = &a.out {
        fs::write(out, format!("{json}\n")).map_err(io_err(out))?;
    }
    println!("{json}");
    Ok(())
}

fn predict(a: PredictArgs) -> Result<(), CliError> {
    let model = load_model(&a.checkpoint)?;
    let mut samples = load_dataset(&a.data)?;
    samples.truncate(a.limit.unwrap_or(usize::MAX));
    let file = fs::File::create(&a.out).map_err(io_err(&a.out))?;
    let mut w = BufWriter::new(file);
    for (i, s) in samples.iter().enumerate() {
        let prep = prepare(s, &model.config)?;
        let pred = model.predict(&prep)?;
        let dump = PredictionDump::new(i, s, &prep.candidates.points, &pred);
        serde_json::to_writer(&mut w, &dump).expect("dump serializes");
        w.write_all(b"\n").map_err(io_err(&a.out))?;
    }
    w.flush().map_err(io_err(&a.out))?;
    println!("wrote {} predictions to {}", samples.len(), a.out.display());
    Ok(())
}

fn plot(a: PlotArgs) -> Result<(), CliError> {
    let file = fs::File::open(&a.predictions).map_err(io_err(&a.predictions))?;
    let mut n = 0;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(&a.predictions))?;
        if line.trim().is_empty() {
            continue;
        }
        let dump: PredictionDump = serde_json::from_str(&line).map_err(|e| CliError::Json {
            path: format!("{}:{}", a.predictions.display(), i + 1),
            message: e.to_string(),
        })?;
        write_plots(&dump, &a.out)?;
        n += 1;
    }
    println!("wrote {} images to {}", 2 * n, a.out.display());
    Ok(())
}

/// Parses `argv` (program name first) and runs the subcommand. Returns the
/// process exit code; failures print one diagnostic line to stderr.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            if e.use_stderr() {
                let msg = e.to_string();
                eprintln!("{}", msg.lines().next().unwrap_or("invalid arguments"));
            } else {
                print!("{e}");
            }
            return code;
        }
    };
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Predict(a) => predict(a),
        Command::Plot(a) => plot(a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            let mut msg = e.to_string();
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                let s_msg = s.to_string();
                if !msg.contains(&s_msg) {
                    msg = format!("{msg}: {s_msg}");
                }
                src = s.source();
            }
            eprintln!("error: {}", msg.replace('\n', " "));
            1
        }
    }
}
