//! Trains a joint model on the bundled synthetic corpus and scores the test
//! split.
//!
//! Usage: `cargo run --release --example train_synthetic [epochs] [batch_size]`

use std::time::Duration;

use joint_slu::data::synthetic;
use joint_slu::metrics::{evaluate, EvalOptions};
use joint_slu::trainer::{train_with_observer, EpochRecord, TrainObserver};
use joint_slu::{ModelConfig, TrainConfig, TrainOptions};

struct Progress;

impl TrainObserver for Progress {
    fn on_epoch(&mut self, r: &EpochRecord, elapsed: Duration) {
        println!(
            "epoch {:>2}  loss {:.4}  L_c {:.4}  L_s {:.4}  alpha {:.3}  beta {:.3}  valid intent {:.3}  slot f1 {:.3}  sentence {:.3}  ({:.1}s)",
            r.epoch,
            r.loss,
            r.intent_loss,
            r.slot_loss,
            r.alpha,
            r.beta,
            r.valid_intent_accuracy.unwrap_or(f64::NAN),
            r.valid_slot_f1.unwrap_or(f64::NAN),
            r.valid_sentence_accuracy.unwrap_or(f64::NAN),
            elapsed.as_secs_f64()
        );
    }
}

fn main() -> joint_slu::Result<()> {
    let mut args = std::env::args().skip(1).map(|a| a.parse::<usize>().expect("numeric argument"));
    let corpus = synthetic::default_corpus();
    let model = ModelConfig {
        num_layers: 2,
        hidden_size: 64,
        num_heads: 4,
        ffn_size: 128,
        ..ModelConfig::default()
    };
    let config = TrainConfig {
        epochs: args.next().unwrap_or(20),
        batch_size: args.next().unwrap_or(16),
        ..TrainConfig::default()
    };
    let outcome = train_with_observer(
        &corpus.train,
        &corpus.valid,
        &model,
        &config,
        &TrainOptions::default(),
        &mut Progress,
    )?;
    let (report, _) = evaluate(&outcome.archive, &corpus.test, EvalOptions::default())?;
    println!("best epoch {}", outcome.best_epoch);
    println!("{}", serde_json::to_string_pretty(&report).expect("serializable report"));
    Ok(())
}
