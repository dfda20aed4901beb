//! The `joint-slu` command line: `train`, `eval`, `predict`,
//! `learning-curve`, `pretrain` and `project`.
//!
//! Each command resolves a [`RunConfig`] from an optional JSON file plus flag
//! overrides and echoes it to `effective_config.json` in the output
//! directory before doing any work. Exit codes: 0 success, 2 configuration,
//! 3 data, 4 numeric failure.

mod config;
pub mod curve;

use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::time::Duration;

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::archive::{EncoderArchive, ModelArchive};
use crate::data::{
    load_dataset, load_entity_catalog, merge_multilingual, project_example, read_projection_jsonl,
    substitute_entities, synthetic, write_split, DatasetSplit, Vocabulary,
};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, extract_spans, write_conll, EvalOptions, MetricsReport, Predictor, Span};
use crate::trainer::{pretrain_mlm, train_with_observer, EpochRecord, MlmEpochRecord, TrainObserver, TrainOptions};

pub use config::{Overrides, RunConfig, Split, EFFECTIVE_CONFIG_FILE};
pub use curve::{learning_curve, CurveSpec, LearningCurve};

pub const TRAIN_LOG_FILE: &str = "train_log.jsonl";
pub const METRICS_FILE: &str = "metrics.json";
pub const LEARNING_CURVE_FILE: &str = "learning_curve.json";
pub const MODEL_DIR: &str = "model";
pub const ENCODER_DIR: &str = "encoder";
pub const THREADS_ENV: &str = "JOINT_SLU_THREADS";

#[derive(Debug, Parser)]
#[command(name = "joint-slu", version, about = "Joint intent detection and slot filling")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fine-tune a joint (or single-objective) model.
    Train(Overrides),
    /// Score an archive on a dataset split.
    Eval(Overrides),
    /// Tag one space-tokenized utterance per input line.
    Predict(Overrides),
    /// Train every (fraction, seed, mode) cell and summarize.
    LearningCurve(Overrides),
    /// Masked-language-model pretraining of an encoder.
    Pretrain(Overrides),
    /// Project slot annotations through word alignments.
    Project(Overrides),
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Train(o) => cmd_train(&o.resolve()?),
        Command::Eval(o) => cmd_eval(&o.resolve()?),
        Command::Predict(o) => cmd_predict(&o.resolve()?),
        Command::LearningCurve(o) => cmd_learning_curve(&o.resolve()?),
        Command::Pretrain(o) => cmd_pretrain(&o.resolve()?),
        Command::Project(o) => cmd_project(&o.resolve()?),
    }
}

/// Worker count from `JOINT_SLU_THREADS`, else the available parallelism.
pub fn thread_count() -> Result<usize> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::config(format!("{THREADS_ENV} must be a positive integer, got {v:?}"))),
        Err(_) => Ok(std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)),
    }
}

fn with_pool<T: Send>(f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(thread_count()?)
        .build()
        .map_err(|e| Error::Internal(format!("thread pool: {e}")))?;
    pool.install(f)
}

/// The dataset named by the config: the synthetic corpus, one directory,
/// or several directories merged across languages.
pub fn load_data(config: &RunConfig) -> Result<DatasetSplit> {
    match (config.synthetic, config.data.len()) {
        (true, 0) => Ok(synthetic::default_corpus()),
        (true, _) => Err(Error::config("--synthetic and --data are mutually exclusive")),
        (false, 0) => Err(Error::config("no dataset: pass --data <dir>... or --synthetic")),
        (false, 1) => load_dataset(&config.data[0], config.language(0)),
        (false, _) => {
            let splits = config
                .data
                .iter()
                .enumerate()
                .map(|(i, dir)| load_dataset(dir, config.language(i)))
                .collect::<Result<Vec<_>>>()?;
            merge_multilingual(&splits)
        }
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let json = serde_json::to_string_pretty(value).map_err(|e| Error::json("serializing output", e))?;
    fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
}

fn to_json_line<T: Serialize>(value: &T) -> Result<String> {
    serde_json::to_string(value).map_err(|e| Error::json("serializing output", e))
}

/// Writes each record to the log file and, with wall-clock time added, to
/// standard output. The file stays free of timing so reruns are byte-equal.
struct JsonlLog {
    file: BufWriter<File>,
    path: std::path::PathBuf,
}

#[derive(Serialize)]
struct Timed<'a, T: Serialize> {
    #[serde(flatten)]
    record: &'a T,
    wall_seconds: f64,
}

impl JsonlLog {
    fn create(path: std::path::PathBuf) -> Result<Self> {
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        Ok(Self {
            file: BufWriter::new(file),
            path,
        })
    }

    fn record<T: Serialize>(&mut self, record: &T, elapsed: Duration) -> Result<()> {
        let line = to_json_line(record)?;
        writeln!(self.file, "{line}")
            .and_then(|_| self.file.flush())
            .map_err(|e| Error::io(&self.path, e))?;
        let timed = Timed {
            record,
            wall_seconds: elapsed.as_secs_f64(),
        };
        println!("{}", to_json_line(&timed)?);
        Ok(())
    }
}

struct LogObserver<'a> {
    log: &'a mut JsonlLog,
    error: Option<Error>,
}

impl TrainObserver for LogObserver<'_> {
    fn on_epoch(&mut self, record: &EpochRecord, elapsed: Duration) {
        if self.error.is_none() {
            if let Err(e) = self.log.record(record, elapsed) {
                self.error = Some(e);
            }
        }
    }
}

fn pretrain_into(
    config: &RunConfig,
    data: &DatasetSplit,
    epochs: usize,
    log: &mut JsonlLog,
) -> Result<EncoderArchive> {
    let corpus: Vec<Vec<String>> = data.train.iter().map(|e| e.tokens.clone()).collect();
    let vocab = Vocabulary::from_examples(&data.train, config.lowercase);
    let train = crate::trainer::TrainConfig {
        epochs,
        ..config.train()
    };
    let mut error = None;
    let outcome = pretrain_mlm(
        &corpus,
        &vocab,
        &config.model(),
        &train,
        config.mask_fraction,
        &mut |record: &MlmEpochRecord, elapsed| {
            if error.is_none() {
                error = log.record(record, elapsed).err();
            }
        },
    )?;
    if let Some(e) = error {
        return Err(e);
    }
    eprintln!(
        "pretraining: initial masked-token loss {:.4}, final {:.4}",
        outcome.initial_loss,
        outcome.log.last().map(|r| r.loss).unwrap_or(f64::NAN)
    );
    Ok(outcome.encoder)
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    best_epoch: usize,
    steps: u64,
    truncated: usize,
    test: Option<&'a MetricsReport>,
}

pub fn cmd_train(config: &RunConfig) -> Result<()> {
    let out = config.require_output_dir()?;
    config.write_effective(out)?;
    with_pool(|| {
        let data = load_data(config)?;
        let mut log = JsonlLog::create(out.join(TRAIN_LOG_FILE))?;
        let init_from = match (&config.init_from, config.pretrain_epochs) {
            (Some(path), _) => Some(EncoderArchive::load(path)?),
            (None, 0) => None,
            (None, epochs) => {
                let encoder = pretrain_into(config, &data, epochs, &mut log)?;
                encoder.save(out.join(ENCODER_DIR))?;
                Some(encoder)
            }
        };
        let options = TrainOptions {
            mode: config.mode,
            lowercase: config.lowercase,
            init_from,
            sentence_match: config.sentence_match,
        };
        let mut observer = LogObserver {
            log: &mut log,
            error: None,
        };
        let outcome = train_with_observer(
            &data.train,
            &data.valid,
            &config.model(),
            &config.train(),
            &options,
            &mut observer,
        )?;
        if let Some(e) = observer.error {
            return Err(e);
        }
        if outcome.truncated > 0 {
            eprintln!(
                "warning: {} training examples truncated to max_seq_len {}",
                outcome.truncated, config.max_seq_len
            );
        }
        outcome.archive.save(out.join(MODEL_DIR))?;
        let report = if data.test.is_empty() {
            None
        } else {
            let options = EvalOptions {
                sentence_match: config.sentence_match,
                per_language: config.per_language,
            };
            let (report, _) = evaluate(&outcome.archive, &data.test, options)?;
            write_json(&out.join(METRICS_FILE), &report)?;
            Some(report)
        };
        let summary = TrainSummary {
            best_epoch: outcome.best_epoch,
            steps: outcome.steps,
            truncated: outcome.truncated,
            test: report.as_ref(),
        };
        println!("{}", to_json_line(&summary)?);
        Ok(())
    })
}

fn load_archive(config: &RunConfig) -> Result<ModelArchive> {
    let path = config
        .archive
        .as_deref()
        .ok_or_else(|| Error::config("this command needs --archive <model dir>"))?;
    let archive = ModelArchive::load(path)?;
    if archive.vocab.lowercase() != config.lowercase {
        return Err(Error::config(format!(
            "tokenizer mismatch: archive was built with lowercase = {}, run configures {}",
            archive.vocab.lowercase(),
            config.lowercase
        )));
    }
    Ok(archive)
}

pub fn cmd_eval(config: &RunConfig) -> Result<()> {
    if let Some(out) = &config.output_dir {
        config.write_effective(out)?;
    }
    with_pool(|| {
        let archive = load_archive(config)?;
        let data = load_data(config)?;
        let examples = match config.split {
            Split::Train => &data.train,
            Split::Valid => &data.valid,
            Split::Test => &data.test,
        };
        let options = EvalOptions {
            sentence_match: config.sentence_match,
            per_language: config.per_language,
        };
        let (report, preds) = evaluate(&archive, examples, options)?;
        if let Some(path) = &config.conll {
            let file = File::create(path).map_err(|e| Error::io(path, e))?;
            let mut w = BufWriter::new(file);
            write_conll(&mut w, examples, &preds)
                .and_then(|_| w.flush())
                .map_err(|e| Error::io(path, e))?;
        }
        if let Some(out) = &config.output_dir {
            write_json(&out.join(METRICS_FILE), &report)?;
        }
        println!("{}", to_json_line(&report)?);
        Ok(())
    })
}

/// One line of `predict` output.
#[derive(Clone, Debug, PartialEq, Serialize, serde::Deserialize)]
pub struct PredictionRecord {
    pub intent: Option<String>,
    pub tags: Vec<String>,
    pub spans: Vec<Span>,
}

/// Streams predictions for each line of `input` to `output`.
pub fn predict_stream<R: BufRead, W: Write>(archive: &ModelArchive, input: R, mut output: W) -> Result<()> {
    for line in input.lines() {
        let line = line.map_err(|e| Error::io("<input>", e))?;
        let tokens: Vec<String> = line.split_whitespace().map(str::to_string).collect();
        let record = if tokens.is_empty() {
            PredictionRecord {
                intent: None,
                tags: Vec::new(),
                spans: Vec::new(),
            }
        } else {
            let decoded = archive.predict(&tokens)?;
            PredictionRecord {
                spans: extract_spans(&decoded.tags)?,
                intent: Some(decoded.intent),
                tags: decoded.tags,
            }
        };
        writeln!(output, "{}", to_json_line(&record)?)
            .and_then(|_| output.flush())
            .map_err(|e| Error::io("<output>", e))?;
    }
    Ok(())
}

pub fn cmd_predict(config: &RunConfig) -> Result<()> {
    if let Some(out) = &config.output_dir {
        config.write_effective(out)?;
    }
    let archive = load_archive(config)?;
    let stdout = io::stdout();
    match &config.input {
        Some(path) => {
            let file = File::open(path).map_err(|e| Error::io(path, e))?;
            predict_stream(&archive, BufReader::new(file), stdout.lock())
        }
        None => predict_stream(&archive, io::stdin().lock(), stdout.lock()),
    }
}

pub fn cmd_learning_curve(config: &RunConfig) -> Result<()> {
    let out = config.require_output_dir()?;
    config.write_effective(out)?;
    let data = load_data(config)?;
    let spec = CurveSpec {
        model: config.model(),
        train: config.train(),
        fractions: config.fractions.clone(),
        seeds_per_fraction: config.seeds_per_fraction,
        modes: config.modes.clone(),
        lowercase: config.lowercase,
        sentence_match: config.sentence_match,
    };
    let curve = learning_curve(&data, &spec, thread_count()?)?;
    write_json(&out.join(LEARNING_CURVE_FILE), &curve)?;
    for cell in &curve.cells {
        #[derive(Serialize)]
        struct Line<'a> {
            fraction: f64,
            mode: crate::heads::TrainMode,
            mean: &'a curve::MetricSummary,
            std: &'a curve::MetricSummary,
        }
        let line = Line {
            fraction: cell.fraction,
            mode: cell.mode,
            mean: &cell.mean,
            std: &cell.std,
        };
        println!("{}", to_json_line(&line)?);
    }
    Ok(())
}

pub fn cmd_pretrain(config: &RunConfig) -> Result<()> {
    let out = config.require_output_dir()?;
    config.write_effective(out)?;
    with_pool(|| {
        let data = load_data(config)?;
        let mut log = JsonlLog::create(out.join(TRAIN_LOG_FILE))?;
        let encoder = pretrain_into(config, &data, config.epochs, &mut log)?;
        encoder.save(out.join(ENCODER_DIR))
    })
}

pub fn cmd_project(config: &RunConfig) -> Result<()> {
    let out = config.require_output_dir()?;
    let input = config
        .input
        .as_deref()
        .ok_or_else(|| Error::config("project needs --input <pairs.jsonl>"))?;
    config.write_effective(out)?;
    let language = config.languages.first().map(String::as_str).unwrap_or("it");
    let catalog = config.entities.as_deref().map(load_entity_catalog).transpose()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut examples = Vec::new();
    for (i, pair) in read_projection_jsonl(input)?.iter().enumerate() {
        let mut example = project_example(pair, language).map_err(|e| match e {
            Error::Input(msg) => Error::Input(format!("{} record {}: {msg}", input.display(), i + 1)),
            other => other,
        })?;
        if let Some(catalog) = &catalog {
            example = substitute_entities(&example, catalog, &mut rng)?;
        }
        example.validate()?;
        examples.push(example);
    }
    write_split(out, &examples)?;
    eprintln!("projected {} sentences into {}", examples.len(), out.display());
    Ok(())
}
