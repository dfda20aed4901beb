use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use serde::{Deserialize, Serialize};

use crate::encoder::ModelConfig;
use crate::error::{Error, Result};
use crate::heads::TrainMode;
use crate::metrics::SentenceMatch;
use crate::trainer::{TrainConfig, DEFAULT_MASK_FRACTION};

pub const EFFECTIVE_CONFIG_FILE: &str = "effective_config.json";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    Valid,
    #[default]
    Test,
}

/// Every setting of a run in one flat object. Unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub num_layers: usize,
    pub hidden_size: usize,
    pub num_heads: usize,
    pub ffn_size: usize,
    pub max_seq_len: usize,
    pub dropout_keep: f64,
    pub layernorm_epsilon: f64,
    pub internal_dropout: bool,

    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub mode: TrainMode,
    pub pretrain_epochs: usize,
    pub mask_fraction: f64,

    /// Dataset directories in the three-file format, one per language.
    pub data: Vec<PathBuf>,
    /// Language tag of each entry of `data`; defaults to "en".
    pub languages: Vec<String>,
    /// Use the bundled synthetic corpus instead of `data`.
    pub synthetic: bool,
    pub lowercase: bool,
    pub split: Split,
    pub init_from: Option<PathBuf>,
    pub archive: Option<PathBuf>,
    pub input: Option<PathBuf>,
    pub entities: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,

    pub sentence_match: SentenceMatch,
    pub per_language: bool,
    pub conll: Option<PathBuf>,

    pub fractions: Vec<f64>,
    pub seeds_per_fraction: usize,
    pub modes: Vec<TrainMode>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        let train = TrainConfig::default();
        Self {
            num_layers: model.num_layers,
            hidden_size: model.hidden_size,
            num_heads: model.num_heads,
            ffn_size: model.ffn_size,
            max_seq_len: model.max_seq_len,
            dropout_keep: model.dropout_keep,
            layernorm_epsilon: model.layernorm_epsilon,
            internal_dropout: model.internal_dropout,
            epochs: train.epochs,
            batch_size: 16,
            learning_rate: train.learning_rate,
            adam_beta1: train.adam_beta1,
            adam_beta2: train.adam_beta2,
            adam_epsilon: train.adam_epsilon,
            weight_decay: train.weight_decay,
            seed: train.seed,
            mode: TrainMode::Joint,
            pretrain_epochs: 0,
            mask_fraction: DEFAULT_MASK_FRACTION,
            data: Vec::new(),
            languages: Vec::new(),
            synthetic: false,
            lowercase: false,
            split: Split::Test,
            init_from: None,
            archive: None,
            input: None,
            entities: None,
            output_dir: None,
            sentence_match: SentenceMatch::Spans,
            per_language: false,
            conll: None,
            fractions: vec![0.25, 0.5, 0.75, 1.0],
            seeds_per_fraction: 5,
            modes: TrainMode::ALL.to_vec(),
        }
    }
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::json(format!("parsing {}", path.display()), e))
    }

    /// Model shape. `vocab_size` is filled in from the vocabulary at train time.
    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            num_layers: self.num_layers,
            hidden_size: self.hidden_size,
            num_heads: self.num_heads,
            ffn_size: self.ffn_size,
            vocab_size: crate::data::NUM_RESERVED,
            max_seq_len: self.max_seq_len,
            dropout_keep: self.dropout_keep,
            layernorm_epsilon: self.layernorm_epsilon,
            internal_dropout: self.internal_dropout,
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            adam_beta1: self.adam_beta1,
            adam_beta2: self.adam_beta2,
            adam_epsilon: self.adam_epsilon,
            weight_decay: self.weight_decay,
            seed: self.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model().validate()?;
        self.train().validate()?;
        if !self.data.is_empty() && !self.languages.is_empty() && self.languages.len() != self.data.len() {
            return Err(Error::config(format!(
                "{} data directories but {} language tags",
                self.data.len(),
                self.languages.len()
            )));
        }
        if self.fractions.iter().any(|&f| !(f > 0.0 && f <= 1.0)) {
            return Err(Error::config("fractions must lie in (0, 1]"));
        }
        if !(self.mask_fraction > 0.0 && self.mask_fraction <= 1.0) {
            return Err(Error::config("mask_fraction must lie in (0, 1]"));
        }
        Ok(())
    }

    pub fn language(&self, index: usize) -> &str {
        self.languages.get(index).map(String::as_str).unwrap_or("en")
    }

    pub fn require_output_dir(&self) -> Result<&Path> {
        self.output_dir
            .as_deref()
            .ok_or_else(|| Error::config("this command needs --output-dir"))
    }

    pub fn write_effective(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(EFFECTIVE_CONFIG_FILE);
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::json("serializing run config", e))?;
        fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))
    }
}

fn parse_mode(s: &str) -> std::result::Result<TrainMode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_sentence_match(s: &str) -> std::result::Result<SentenceMatch, String> {
    match s {
        "spans" => Ok(SentenceMatch::Spans),
        "raw-tags" => Ok(SentenceMatch::RawTags),
        other => Err(format!("unknown sentence match {other:?} (expected spans or raw-tags)")),
    }
}

/// Command-line overrides; every [`RunConfig`] field has a flag of the same
/// name (kebab-case, with the snake_case spelling accepted as an alias).
#[derive(Clone, Debug, Default, Args)]
pub struct Overrides {
    /// JSON run configuration; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,

    #[arg(long, alias = "num_layers")]
    pub num_layers: Option<usize>,
    #[arg(long, alias = "hidden_size")]
    pub hidden_size: Option<usize>,
    #[arg(long, alias = "num_heads")]
    pub num_heads: Option<usize>,
    #[arg(long, alias = "ffn_size")]
    pub ffn_size: Option<usize>,
    #[arg(long, alias = "max_seq_len")]
    pub max_seq_len: Option<usize>,
    #[arg(long, alias = "dropout_keep")]
    pub dropout_keep: Option<f64>,
    #[arg(long, alias = "layernorm_epsilon")]
    pub layernorm_epsilon: Option<f64>,
    #[arg(long, alias = "internal_dropout", num_args = 0..=1, default_missing_value = "true")]
    pub internal_dropout: Option<bool>,

    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long, alias = "batch_size")]
    pub batch_size: Option<usize>,
    #[arg(long, alias = "learning_rate")]
    pub learning_rate: Option<f64>,
    #[arg(long, alias = "adam_beta1")]
    pub adam_beta1: Option<f64>,
    #[arg(long, alias = "adam_beta2")]
    pub adam_beta2: Option<f64>,
    #[arg(long, alias = "adam_epsilon")]
    pub adam_epsilon: Option<f64>,
    #[arg(long, alias = "weight_decay")]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// joint, intent-only or slot-only.
    #[arg(long, value_parser = parse_mode)]
    pub mode: Option<TrainMode>,
    #[arg(long, alias = "pretrain_epochs")]
    pub pretrain_epochs: Option<usize>,
    #[arg(long, alias = "mask_fraction")]
    pub mask_fraction: Option<f64>,

    #[arg(long, num_args = 1..)]
    pub data: Option<Vec<PathBuf>>,
    #[arg(long, num_args = 1..)]
    pub languages: Option<Vec<String>>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub synthetic: Option<bool>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub lowercase: Option<bool>,
    #[arg(long, value_enum)]
    pub split: Option<Split>,
    #[arg(long, alias = "init_from")]
    pub init_from: Option<PathBuf>,
    #[arg(long)]
    pub archive: Option<PathBuf>,
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub entities: Option<PathBuf>,
    #[arg(long, alias = "output_dir")]
    pub output_dir: Option<PathBuf>,

    /// spans or raw-tags.
    #[arg(long, alias = "sentence_match", value_parser = parse_sentence_match)]
    pub sentence_match: Option<SentenceMatch>,
    #[arg(long, alias = "per_language", num_args = 0..=1, default_missing_value = "true")]
    pub per_language: Option<bool>,
    #[arg(long)]
    pub conll: Option<PathBuf>,

    #[arg(long, num_args = 1..)]
    pub fractions: Option<Vec<f64>>,
    #[arg(long, alias = "seeds_per_fraction")]
    pub seeds_per_fraction: Option<usize>,
    #[arg(long, num_args = 1.., value_parser = parse_mode)]
    pub modes: Option<Vec<TrainMode>>,
}

impl Overrides {
    /// The config file (or defaults) with every given flag applied.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        macro_rules! apply {
            ($($field:ident),* $(,)?) => {
                $(if let Some(v) = &self.$field { c.$field = v.clone(); })*
            };
        }
        macro_rules! apply_opt {
            ($($field:ident),* $(,)?) => {
                $(if let Some(v) = &self.$field { c.$field = Some(v.clone()); })*
            };
        }
        apply!(
            num_layers,
            hidden_size,
            num_heads,
            ffn_size,
            max_seq_len,
            dropout_keep,
            layernorm_epsilon,
            internal_dropout,
            epochs,
            batch_size,
            learning_rate,
            adam_beta1,
            adam_beta2,
            adam_epsilon,
            weight_decay,
            seed,
            mode,
            pretrain_epochs,
            mask_fraction,
            data,
            languages,
            synthetic,
            lowercase,
            split,
            sentence_match,
            per_language,
            fractions,
            seeds_per_fraction,
            modes,
        );
        apply_opt!(init_from, archive, input, entities, output_dir, conll);
        c.validate()?;
        Ok(c)
    }
}
