//! Runs the encoder alone on one sentence and prints the hidden-state shape
//! and the first few values of each row.

use joint_slu::data::{encode_tokens, synthetic, Vocabulary};
use joint_slu::params::JointParams;
use joint_slu::{encode, ModelConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> joint_slu::Result<()> {
    let corpus = synthetic::default_corpus();
    let vocab = Vocabulary::from_examples(&corpus.train, false);
    let model = ModelConfig {
        num_layers: 2,
        hidden_size: 16,
        num_heads: 2,
        ffn_size: 32,
        vocab_size: vocab.len(),
        ..ModelConfig::default()
    };
    let params = JointParams::init(&model, 3, 5, &mut ChaCha8Rng::seed_from_u64(0));
    let words = ["play", "some", "jazz", "by", "miles", "davis"];
    let (ids, truncated) = encode_tokens(&words, &vocab, model.max_seq_len);
    println!("ids {:?} (truncated: {truncated})", ids);
    let hidden = encode(&ids, &params.encoder, &model)?;
    println!("hidden states {:?}", hidden.states.shape());
    for (i, row) in hidden.states.rows().into_iter().enumerate() {
        let head: Vec<String> = row.iter().take(4).map(|v| format!("{v:+.3}")).collect();
        let token = if i == 0 { "[CLS]" } else { words[i - 1] };
        println!("{token:>7}  {} ...", head.join(" "));
    }
    Ok(())
}
