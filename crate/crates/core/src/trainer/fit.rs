use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::archive::{EncoderArchive, ModelArchive};
use crate::data::{build_label_maps, encode_examples, LabeledExample, Vocabulary};
use crate::encoder::ModelConfig;
use crate::error::{Error, Result};
use crate::heads::TrainMode;
use crate::metrics::{evaluate, EvalOptions, MetricsReport, SentenceMatch};
use crate::params::{JointParams, TensorGroup};

use super::adam::{adam_step, OptimizerState};
use super::gradients::compute_gradients;
use super::TrainConfig;

const INIT_STREAM: u64 = 0;
const SHUFFLE_STREAM: u64 = 1;
const DROPOUT_STREAM: u64 = 2;

/// Everything besides the two configs that shapes a fine-tuning run.
#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    pub mode: TrainMode,
    pub lowercase: bool,
    /// Warm-start encoder; its vocabulary replaces one built from `train`.
    pub init_from: Option<EncoderArchive>,
    pub sentence_match: SentenceMatch,
}

/// One line of `train_log.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub phase: String,
    pub epoch: usize,
    pub steps: u64,
    pub loss: f64,
    pub intent_loss: f64,
    pub slot_loss: f64,
    pub alpha: f64,
    pub beta: f64,
    pub valid_intent_accuracy: Option<f64>,
    pub valid_slot_f1: Option<f64>,
    pub valid_sentence_accuracy: Option<f64>,
}

/// Callbacks for progress reporting and inspection.
pub trait TrainObserver {
    fn on_init(&mut self, _params: &JointParams) {}
    fn on_step(&mut self, _step: u64, _params: &JointParams) {}
    fn on_epoch(&mut self, _record: &EpochRecord, _elapsed: Duration) {}
}

impl TrainObserver for () {}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the best validation score.
    pub archive: ModelArchive,
    pub log: Vec<EpochRecord>,
    /// 1-based.
    pub best_epoch: usize,
    pub steps: u64,
    pub truncated: usize,
}

/// Fine-tunes a joint model. See [`train_with_observer`].
pub fn train(
    train: &[LabeledExample],
    valid: &[LabeledExample],
    model: &ModelConfig,
    config: &TrainConfig,
    options: &TrainOptions,
) -> Result<TrainOutcome> {
    train_with_observer(train, valid, model, config, options, &mut ())
}

fn trainable(mode: TrainMode) -> impl Fn(TensorGroup) -> bool {
    move |group| match mode {
        TrainMode::Joint => true,
        TrainMode::IntentOnly => !matches!(group, TensorGroup::SlotHead | TensorGroup::LossWeights),
        TrainMode::SlotOnly => !matches!(group, TensorGroup::IntentHead | TensorGroup::LossWeights),
    }
}

fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Runs `config.epochs` epochs of shuffled mini-batch Adam over `train`,
/// scoring `valid` after each epoch. The returned archive holds the
/// parameters of the epoch with the best validation score (earliest on
/// ties; the last epoch when `valid` is empty). The score is sentence
/// accuracy for joint training, intent accuracy for intent-only and slot F1
/// for slot-only.
///
/// `model.vocab_size` is replaced by the size of the vocabulary in use.
pub fn train_with_observer(
    train: &[LabeledExample],
    valid: &[LabeledExample],
    model: &ModelConfig,
    config: &TrainConfig,
    options: &TrainOptions,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::input("training set is empty"));
    }
    let labels = build_label_maps(train)?;
    for e in valid {
        if labels.intent_index(&e.intent).is_none() {
            return Err(Error::input(format!(
                "validation intent label {:?} does not occur in the training set",
                e.intent
            )));
        }
    }
    let vocab = match &options.init_from {
        Some(init) => init.vocab.clone(),
        None => Vocabulary::from_examples(train, options.lowercase),
    };
    let model = ModelConfig {
        vocab_size: vocab.len(),
        ..model.clone()
    };
    model.validate()?;
    let (encoded, truncated) = encode_examples(train, &vocab, &labels, model.max_seq_len)?;

    let mut params = JointParams::init(&model, labels.num_intents(), labels.num_tags(), &mut stream(config.seed, INIT_STREAM));
    if let Some(init) = &options.init_from {
        init.check_compatible(&model)?;
        params.encoder = init.encoder.clone();
    }
    observer.on_init(&params);

    let mut shuffle_rng = stream(config.seed, SHUFFLE_STREAM);
    let mut dropout_rng = stream(config.seed, DROPOUT_STREAM);
    let mut state = OptimizerState::new(&params);
    let is_trainable = trainable(options.mode);
    let mut order: Vec<usize> = (0..encoded.len()).collect();
    let mut log = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, JointParams)> = None;
    let eval_options = EvalOptions {
        sentence_match: options.sentence_match,
        per_language: false,
    };

    for epoch in 1..=config.epochs {
        let started = Instant::now();
        order.shuffle(&mut shuffle_rng);
        let mut sums = (0.0, 0.0, 0.0);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<_> = chunk.iter().map(|&i| encoded[i].clone()).collect();
            let (loss, grads) = compute_gradients(&batch, &params, &model, options.mode, Some(&mut dropout_rng))
                .map_err(|e| match e {
                    Error::Numeric(msg) => Error::Numeric(format!("epoch {epoch}, step {}: {msg}", state.step + 1)),
                    other => other,
                })?;
            let k = batch.len() as f64;
            sums.0 += loss.loss * k;
            sums.1 += loss.intent_loss * k;
            sums.2 += loss.slot_loss * k;
            adam_step(&mut params, &grads, &mut state, config, &is_trainable)?;
            if !params.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite parameters after step {} (epoch {epoch})",
                    state.step
                )));
            }
            observer.on_step(state.step, &params);
        }
        let n = encoded.len() as f64;
        let (alpha, beta) = params.loss_weights.alpha_beta();
        let report = if valid.is_empty() {
            None
        } else {
            let snapshot = ModelArchive {
                config: model.clone(),
                labels: labels.clone(),
                vocab: vocab.clone(),
                params: params.clone(),
            };
            Some(evaluate(&snapshot, valid, eval_options)?.0)
        };
        let record = EpochRecord {
            phase: "finetune".into(),
            epoch,
            steps: state.step,
            loss: sums.0 / n,
            intent_loss: sums.1 / n,
            slot_loss: sums.2 / n,
            alpha,
            beta,
            valid_intent_accuracy: report.as_ref().map(|r| r.intent_accuracy),
            valid_slot_f1: report.as_ref().map(|r| r.slot_f1),
            valid_sentence_accuracy: report.as_ref().map(|r: &MetricsReport| r.sentence_accuracy),
        };
        let score = match options.mode {
            TrainMode::Joint => record.valid_sentence_accuracy,
            TrainMode::IntentOnly => record.valid_intent_accuracy,
            TrainMode::SlotOnly => record.valid_slot_f1,
        }
        .unwrap_or(f64::NEG_INFINITY);
        let improves = match &best {
            None => true,
            Some((s, _, _)) => score > *s || valid.is_empty(),
        };
        if improves {
            best = Some((score, epoch, params.clone()));
        }
        observer.on_epoch(&record, started.elapsed());
        log.push(record);
    }

    let (_, best_epoch, best_params) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        archive: ModelArchive {
            config: model,
            labels,
            vocab,
            params: best_params,
        },
        log,
        best_epoch,
        steps: state.step,
        truncated,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic;

    fn tiny_model() -> ModelConfig {
        ModelConfig {
            num_layers: 1,
            hidden_size: 16,
            num_heads: 2,
            ffn_size: 32,
            max_seq_len: 16,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn one_full_batch_step_per_epoch() {
        let corpus = synthetic::default_corpus();
        let train_set = &corpus.train[..20];
        let config = TrainConfig {
            epochs: 1,
            batch_size: 64,
            ..TrainConfig::default()
        };
        let out = train(train_set, &[], &tiny_model(), &config, &TrainOptions::default()).unwrap();
        assert_eq!(out.steps, 1);
        assert_eq!(out.log.len(), 1);
        assert_eq!(out.best_epoch, 1);
        assert!(out.log[0].valid_sentence_accuracy.is_none());
    }

    #[test]
    fn rejects_empty_train_and_unknown_valid_intent() {
        let corpus = synthetic::default_corpus();
        let config = TrainConfig {
            epochs: 1,
            ..TrainConfig::default()
        };
        let err = train(&[], &corpus.valid, &tiny_model(), &config, &TrainOptions::default()).unwrap_err();
        assert_eq!(err.exit_code(), 3);
        let mut odd = corpus.valid[0].clone();
        odd.intent = "AddToPlaylist".into();
        let err = train(&corpus.train[..10], &[odd], &tiny_model(), &config, &TrainOptions::default()).unwrap_err();
        assert!(err.to_string().contains("AddToPlaylist"));
    }

    #[test]
    fn best_epoch_is_earliest_maximum() {
        let corpus = synthetic::default_corpus();
        let config = TrainConfig {
            epochs: 3,
            batch_size: 16,
            ..TrainConfig::default()
        };
        let out = train(&corpus.train[..64], &corpus.valid[..20], &tiny_model(), &config, &TrainOptions::default()).unwrap();
        let scores: Vec<f64> = out.log.iter().map(|r| r.valid_sentence_accuracy.unwrap()).collect();
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let first = scores.iter().position(|&s| s == max).unwrap() + 1;
        assert_eq!(out.best_epoch, first);
        for r in &out.log {
            assert!((r.alpha + r.beta - 2.0).abs() < 1e-9);
        }
    }
}
