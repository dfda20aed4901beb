//! Metric-versus-training-fraction table for the three training modes on the
//! synthetic corpus.
//!
//! Usage: `cargo run --release --example learning_curve [seeds] [threads]`

use joint_slu::cli::curve::{learning_curve, CurveSpec};
use joint_slu::data::synthetic;
use joint_slu::metrics::SentenceMatch;
use joint_slu::{ModelConfig, TrainConfig, TrainMode};

fn main() -> joint_slu::Result<()> {
    let mut args = std::env::args().skip(1).map(|a| a.parse::<usize>().expect("numeric argument"));
    let seeds = args.next().unwrap_or(2);
    let threads = args.next().unwrap_or(1);
    let spec = CurveSpec {
        model: ModelConfig {
            num_layers: 1,
            hidden_size: 32,
            num_heads: 2,
            ffn_size: 64,
            ..ModelConfig::default()
        },
        train: TrainConfig {
            epochs: 6,
            batch_size: 16,
            ..TrainConfig::default()
        },
        fractions: vec![0.1, 0.25, 0.5, 1.0],
        seeds_per_fraction: seeds,
        modes: TrainMode::ALL.to_vec(),
        lowercase: false,
        sentence_match: SentenceMatch::Spans,
    };
    let curve = learning_curve(&synthetic::default_corpus(), &spec, threads)?;
    println!("fraction  mode          intent         slot f1        sentence");
    for cell in &curve.cells {
        println!(
            "{:<9} {:<13} {:.3} ± {:.3}  {:.3} ± {:.3}  {:.3} ± {:.3}",
            cell.fraction,
            cell.mode.to_string(),
            cell.mean.intent_accuracy,
            cell.std.intent_accuracy,
            cell.mean.slot_f1,
            cell.std.slot_f1,
            cell.mean.sentence_accuracy,
            cell.std.sentence_accuracy
        );
    }
    Ok(())
}
