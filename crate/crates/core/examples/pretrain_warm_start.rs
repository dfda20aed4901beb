//! Masked-language-model pretraining of the encoder followed by fine-tuning
//! from the pretrained weights, compared with a cold start on a quarter of
//! the training data.

use joint_slu::data::{subset_fraction, synthetic, Vocabulary};
use joint_slu::metrics::{evaluate, EvalOptions};
use joint_slu::trainer::{pretrain_mlm, train, DEFAULT_MASK_FRACTION};
use joint_slu::{ModelConfig, TrainConfig, TrainOptions};

fn main() -> joint_slu::Result<()> {
    let corpus = synthetic::default_corpus();
    let vocab = Vocabulary::from_examples(&corpus.train, false);
    let sentences: Vec<Vec<String>> = corpus.train.iter().map(|e| e.tokens.clone()).collect();
    let model = ModelConfig {
        num_layers: 2,
        hidden_size: 64,
        num_heads: 4,
        ffn_size: 128,
        ..ModelConfig::default()
    };
    let pre = TrainConfig {
        epochs: 20,
        batch_size: 16,
        ..TrainConfig::default()
    };
    let mlm = pretrain_mlm(&sentences, &vocab, &model, &pre, DEFAULT_MASK_FRACTION, &mut |r, t| {
        println!("pretrain epoch {:>2}  loss {:.4}  ({:.1}s)", r.epoch, r.loss, t.as_secs_f64());
    })?;
    println!("initial masked-token loss {:.4} (ln |V| = {:.4})", mlm.initial_loss, (vocab.len() as f64).ln());

    let subset = subset_fraction(&corpus.train, 0.25, 1)?;
    let config = TrainConfig {
        epochs: 20,
        batch_size: 16,
        ..TrainConfig::default()
    };
    for (name, init_from) in [("cold", None), ("warm", Some(mlm.encoder))] {
        let options = TrainOptions {
            init_from,
            ..TrainOptions::default()
        };
        let out = train(&subset, &corpus.valid, &model, &config, &options)?;
        let (report, _) = evaluate(&out.archive, &corpus.test, EvalOptions::default())?;
        println!(
            "{name}: intent {:.3}  slot f1 {:.3}  sentence {:.3}",
            report.intent_accuracy, report.slot_f1, report.sentence_accuracy
        );
    }
    Ok(())
}
