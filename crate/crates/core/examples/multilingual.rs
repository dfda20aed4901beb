//! Trains one model on two synthetic languages that share intent and slot
//! names but not words, and reports each language separately.

use joint_slu::data::{build_label_maps, merge_multilingual, synthetic};
use joint_slu::metrics::{evaluate, EvalOptions};
use joint_slu::trainer::train;
use joint_slu::{ModelConfig, TrainConfig, TrainOptions};

fn main() -> joint_slu::Result<()> {
    let merged = merge_multilingual(&[synthetic::default_corpus(), synthetic::second_language_corpus(77, "it")])?;
    let labels = build_label_maps(&merged.train)?;
    println!(
        "merged: {} train, {} intents, {} tags",
        merged.train.len(),
        labels.intents.len(),
        labels.slot_tags.len()
    );
    let model = ModelConfig {
        num_layers: 2,
        hidden_size: 64,
        num_heads: 4,
        ffn_size: 128,
        ..ModelConfig::default()
    };
    let config = TrainConfig {
        epochs: 10,
        batch_size: 16,
        ..TrainConfig::default()
    };
    let out = train(&merged.train, &merged.valid, &model, &config, &TrainOptions::default())?;
    let options = EvalOptions {
        per_language: true,
        ..EvalOptions::default()
    };
    let (report, _) = evaluate(&out.archive, &merged.test, options)?;
    for (lang, r) in &report.per_language {
        println!(
            "{lang}: {} sentences  intent {:.3}  slot f1 {:.3}  sentence {:.3}",
            r.sentences, r.intent_accuracy, r.slot_f1, r.sentence_accuracy
        );
    }
    Ok(())
}
