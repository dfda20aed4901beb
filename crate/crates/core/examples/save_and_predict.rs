//! Trains a small model, writes it to an archive directory, reloads it and
//! streams predictions for a few utterances as JSON lines.
//!
//! Usage: `cargo run --release --example save_and_predict [archive_dir]`

use std::io::Cursor;
use std::path::PathBuf;

use joint_slu::cli::predict_stream;
use joint_slu::data::synthetic;
use joint_slu::trainer::train;
use joint_slu::{ModelArchive, ModelConfig, TrainConfig, TrainOptions};

fn main() -> joint_slu::Result<()> {
    let dir = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("joint-slu-example-model"));
    let corpus = synthetic::default_corpus();
    let model = ModelConfig {
        num_layers: 1,
        hidden_size: 32,
        num_heads: 2,
        ffn_size: 64,
        ..ModelConfig::default()
    };
    let config = TrainConfig {
        epochs: 8,
        batch_size: 16,
        ..TrainConfig::default()
    };
    let outcome = train(&corpus.train, &corpus.valid, &model, &config, &TrainOptions::default())?;
    outcome.archive.save(&dir)?;
    println!("saved epoch {} to {}", outcome.best_epoch, dir.display());

    let archive = ModelArchive::load(&dir)?;
    let input = "play with or without you by u2\n\nwhat is the weather in paris tomorrow\nbook a table for two\n";
    predict_stream(&archive, Cursor::new(input), std::io::stdout().lock())
}
