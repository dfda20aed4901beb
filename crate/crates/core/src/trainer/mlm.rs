use std::time::{Duration, Instant};

use ndarray::{Array1, Array2, Axis};
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::archive::EncoderArchive;
use crate::data::{encode_tokens, Vocabulary, MASK_ID, NUM_RESERVED};
use crate::encoder::{backward, forward_trace, softmax_rows_inplace, EncoderParams, ModelConfig, TokenIds};
use crate::error::{Error, Result};
use crate::params::{encoder_tensors, encoder_tensors_mut, TensorGroup, TensorKind, TensorMut, TensorRef};

use super::adam::{adam_step, OptimizerState, ParamSet};
use super::TrainConfig;

pub const DEFAULT_MASK_FRACTION: f64 = 0.15;
const CHUNK: usize = 8;

/// Encoder plus the output bias of the vocabulary softmax, whose weights are
/// tied to the token embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct MlmParams {
    pub encoder: EncoderParams,
    pub output_bias: Array1<f64>,
}

impl MlmParams {
    fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.data.fill(0.0);
        }
        z
    }
}

impl ParamSet for MlmParams {
    fn tensors(&self) -> Vec<TensorRef<'_>> {
        let mut out = Vec::new();
        encoder_tensors(&self.encoder, &mut |name, shape, kind, data| {
            out.push(TensorRef {
                name,
                shape,
                kind,
                group: TensorGroup::Encoder,
                data,
            })
        });
        out.push(TensorRef {
            name: "mlm_head.bias".into(),
            shape: vec![self.output_bias.len()],
            kind: TensorKind::Bias,
            group: TensorGroup::MlmHead,
            data: self.output_bias.as_slice().expect("contiguous tensor"),
        });
        out
    }

    fn tensors_mut(&mut self) -> Vec<TensorMut<'_>> {
        let mut out = Vec::new();
        encoder_tensors_mut(&mut self.encoder, &mut |name, shape, kind, data| {
            out.push(TensorMut {
                name,
                shape,
                kind,
                group: TensorGroup::Encoder,
                data,
            })
        });
        let len = self.output_bias.len();
        out.push(TensorMut {
            name: "mlm_head.bias".into(),
            shape: vec![len],
            kind: TensorKind::Bias,
            group: TensorGroup::MlmHead,
            data: self.output_bias.as_slice_mut().expect("contiguous tensor"),
        });
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlmEpochRecord {
    pub phase: String,
    pub epoch: usize,
    pub steps: u64,
    pub loss: f64,
}

#[derive(Clone, Debug)]
pub struct MlmOutcome {
    pub encoder: EncoderArchive,
    /// Masked-token loss of the freshly initialized model.
    pub initial_loss: f64,
    pub log: Vec<MlmEpochRecord>,
}

/// Picks `max(1, round(fraction · num_words))` distinct word positions in
/// `1..=num_words`, sorted.
pub fn mask_positions<R: Rng + ?Sized>(num_words: usize, fraction: f64, rng: &mut R) -> Vec<usize> {
    if num_words == 0 {
        return Vec::new();
    }
    let count = ((fraction * num_words as f64).round() as usize).clamp(1, num_words);
    let mut picked: Vec<usize> = index::sample(rng, num_words, count).into_iter().map(|i| i + 1).collect();
    picked.sort_unstable();
    picked
}

/// A corrupted input, the masked positions and their original ids.
struct MaskedExample {
    ids: TokenIds,
    positions: Vec<usize>,
    targets: Vec<usize>,
}

fn corrupt<R: Rng + ?Sized>(ids: &TokenIds, fraction: f64, vocab_size: usize, rng: &mut R) -> MaskedExample {
    let positions = mask_positions(ids.len() - 1, fraction, rng);
    let targets: Vec<usize> = positions.iter().map(|&p| ids.ids[p]).collect();
    let mut corrupted = ids.clone();
    for &p in &positions {
        let r: f64 = rng.random();
        if r < 0.8 {
            corrupted.ids[p] = MASK_ID;
        } else if r < 0.9 {
            corrupted.ids[p] = if vocab_size > NUM_RESERVED {
                rng.random_range(NUM_RESERVED..vocab_size)
            } else {
                MASK_ID
            };
        }
    }
    MaskedExample {
        ids: corrupted,
        positions,
        targets,
    }
}

fn example_pass(
    example: &MaskedExample,
    params: &MlmParams,
    config: &ModelConfig,
    rng: Option<&mut ChaCha8Rng>,
    grad: Option<&mut MlmParams>,
    n: f64,
) -> Result<f64> {
    let trace = forward_trace(&example.ids, &params.encoder, config, rng)?;
    let k = example.positions.len();
    let h = trace.output.select(Axis(0), &example.positions);
    let embeddings = &params.encoder.token_embeddings;
    let mut probs = h.dot(&embeddings.t()) + &params.output_bias;
    let mut loss = 0.0;
    for (row, &t) in probs.rows().into_iter().zip(&example.targets) {
        loss -= crate::heads::log_softmax(row)[t];
    }
    loss /= k as f64;
    if !loss.is_finite() {
        return Err(Error::Numeric("non-finite masked-token loss".into()));
    }
    let Some(grad) = grad else {
        return Ok(loss);
    };
    softmax_rows_inplace(&mut probs);
    let mut dz = probs;
    for (mut row, &t) in dz.rows_mut().into_iter().zip(&example.targets) {
        row[t] -= 1.0;
    }
    dz /= k as f64 * n;
    grad.encoder.token_embeddings += &dz.t().dot(&h);
    grad.output_bias += &dz.sum_axis(Axis(0));
    let dh_sel = dz.dot(embeddings);
    let mut d_hidden = Array2::zeros(trace.output.raw_dim());
    for (row, &p) in dh_sel.rows().into_iter().zip(&example.positions) {
        let mut target = d_hidden.row_mut(p);
        target += &row;
    }
    backward(&example.ids, &params.encoder, config, &trace, d_hidden, &mut grad.encoder);
    Ok(loss)
}

fn batch_pass(
    batch: &[MaskedExample],
    params: &MlmParams,
    config: &ModelConfig,
    seeds: Option<Vec<u64>>,
    want_grad: bool,
) -> Result<(f64, Option<MlmParams>)> {
    let n = batch.len() as f64;
    let chunks: Vec<Result<(f64, Option<MlmParams>)>> = batch
        .par_chunks(CHUNK)
        .enumerate()
        .map(|(c, chunk)| {
            let mut grad = want_grad.then(|| params.zeros_like());
            let mut loss = 0.0;
            for (k, example) in chunk.iter().enumerate() {
                let mut rng = seeds.as_ref().map(|s| ChaCha8Rng::seed_from_u64(s[c * CHUNK + k]));
                loss += example_pass(example, params, config, rng.as_mut(), grad.as_mut(), n)?;
            }
            Ok((loss, grad))
        })
        .collect();
    let mut total = 0.0;
    let mut grad: Option<MlmParams> = None;
    for chunk in chunks {
        let (loss, g) = chunk?;
        total += loss;
        if let Some(g) = g {
            match grad.as_mut() {
                None => grad = Some(g),
                Some(acc) => {
                    for (a, b) in acc.tensors_mut().into_iter().zip(g.tensors()) {
                        a.data.iter_mut().zip(b.data).for_each(|(x, y)| *x += y);
                    }
                }
            }
        }
    }
    Ok((total / n, grad))
}

/// Masked-language-model pretraining of a fresh encoder on `corpus`.
///
/// Each epoch re-masks every sentence: `mask_fraction` of its words (at least
/// one) are selected; 80% of those become the mask id, 10% a random word id
/// and 10% stay unchanged. The loss is the vocabulary cross-entropy at the
/// selected positions only. `on_epoch` sees each record as it is produced.
pub fn pretrain_mlm(
    corpus: &[Vec<String>],
    vocab: &Vocabulary,
    model: &ModelConfig,
    config: &TrainConfig,
    mask_fraction: f64,
    on_epoch: &mut dyn FnMut(&MlmEpochRecord, Duration),
) -> Result<MlmOutcome> {
    config.validate()?;
    if !(mask_fraction > 0.0 && mask_fraction <= 1.0) {
        return Err(Error::config(format!("mask_fraction must lie in (0, 1], got {mask_fraction}")));
    }
    let model = ModelConfig {
        vocab_size: vocab.len(),
        ..model.clone()
    };
    model.validate()?;
    let encoded: Vec<TokenIds> = corpus
        .iter()
        .filter(|s| !s.is_empty())
        .map(|s| encode_tokens(s, vocab, model.max_seq_len).0)
        .collect();
    if encoded.is_empty() {
        return Err(Error::input("pretraining corpus is empty"));
    }

    let mut init_rng = ChaCha8Rng::seed_from_u64(config.seed);
    init_rng.set_stream(0);
    let mut params = MlmParams {
        encoder: EncoderParams::init(&model, &mut init_rng),
        output_bias: Array1::zeros(model.vocab_size),
    };
    let mut rngs: Vec<ChaCha8Rng> = (1..=3)
        .map(|s| {
            let mut r = ChaCha8Rng::seed_from_u64(config.seed);
            r.set_stream(s);
            r
        })
        .collect();
    let [shuffle_rng, mask_rng, dropout_rng] = rngs.as_mut_slice() else {
        unreachable!()
    };

    let initial: Vec<MaskedExample> = {
        let mut probe = ChaCha8Rng::seed_from_u64(config.seed);
        probe.set_stream(4);
        encoded.iter().map(|ids| corrupt(ids, mask_fraction, model.vocab_size, &mut probe)).collect()
    };
    let initial_loss = batch_pass(&initial, &params, &model, None, false)?.0;

    let mut state = OptimizerState::new(&params);
    let mut order: Vec<usize> = (0..encoded.len()).collect();
    let mut log = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        let started = Instant::now();
        order.shuffle(shuffle_rng);
        let mut sum = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<MaskedExample> = chunk
                .iter()
                .map(|&i| corrupt(&encoded[i], mask_fraction, model.vocab_size, mask_rng))
                .collect();
            let seeds = (model.internal_dropout && model.dropout_keep < 1.0)
                .then(|| batch.iter().map(|_| dropout_rng.random()).collect());
            let (loss, grads) = batch_pass(&batch, &params, &model, seeds, true)?;
            sum += loss * batch.len() as f64;
            adam_step(&mut params, &grads.expect("gradients requested"), &mut state, config, |_| true)?;
        }
        let record = MlmEpochRecord {
            phase: "pretrain".into(),
            epoch,
            steps: state.step,
            loss: sum / encoded.len() as f64,
        };
        on_epoch(&record, started.elapsed());
        log.push(record);
    }
    Ok(MlmOutcome {
        encoder: EncoderArchive {
            config: model,
            vocab: vocab.clone(),
            encoder: params.encoder,
        },
        initial_loss,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(vocab_size: usize) -> ModelConfig {
        ModelConfig {
            num_layers: 1,
            hidden_size: 8,
            num_heads: 2,
            ffn_size: 16,
            vocab_size,
            max_seq_len: 10,
            dropout_keep: 1.0,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn masking_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(mask_positions(1, 0.15, &mut rng), vec![1]);
        assert_eq!(mask_positions(20, 0.15, &mut rng).len(), 3);
        assert!(mask_positions(0, 0.15, &mut rng).is_empty());
        let p = mask_positions(10, 1.0, &mut rng);
        assert_eq!(p, (1..=10).collect::<Vec<_>>());
    }

    #[test]
    fn replacement_split_is_roughly_80_10_10() {
        let ids = TokenIds::new((0..41).map(|i| if i == 0 { 0 } else { 4 + (i % 5) }).collect());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (mut masked, mut same, mut total) = (0, 0, 0);
        for _ in 0..2000 {
            let m = corrupt(&ids, 0.15, 50, &mut rng);
            for (&p, &t) in m.positions.iter().zip(&m.targets) {
                total += 1;
                if m.ids.ids[p] == MASK_ID {
                    masked += 1;
                } else if m.ids.ids[p] == t {
                    same += 1;
                }
            }
        }
        let frac = |c: usize| c as f64 / total as f64;
        assert!((frac(masked) - 0.8).abs() < 0.02);
        // unchanged includes random draws that hit the original id
        assert!((frac(same) - 0.1).abs() < 0.02);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let vocab_size = 9;
        let model = config(vocab_size);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut params = MlmParams {
            encoder: EncoderParams::init(&model, &mut rng),
            output_bias: Array1::from_shape_fn(vocab_size, |i| 0.01 * i as f64),
        };
        for t in params.tensors_mut() {
            t.data.iter_mut().for_each(|v| *v += rng.random_range(-0.1..0.1));
        }
        let batch = vec![
            corrupt(&TokenIds::new(vec![0, 4, 5, 6, 7]), 0.5, vocab_size, &mut rng),
            corrupt(&TokenIds::new(vec![0, 8, 4]), 0.5, vocab_size, &mut rng),
        ];
        let (_, grad) = batch_pass(&batch, &params, &model, None, true).unwrap();
        let grad = grad.unwrap();
        let step = 1e-5;
        let names = ["encoder.token_embeddings", "encoder.layer0.ffn.in.weight", "mlm_head.bias"];
        for name in names {
            let ti = params.tensors().iter().position(|t| t.name == name).unwrap();
            for k in [0, 5, 8] {
                let analytic = grad.tensors()[ti].data[k];
                let mut plus = params.clone();
                plus.tensors_mut()[ti].data[k] += step;
                let mut minus = params.clone();
                minus.tensors_mut()[ti].data[k] -= step;
                let lp = batch_pass(&batch, &plus, &model, None, false).unwrap().0;
                let lm = batch_pass(&batch, &minus, &model, None, false).unwrap().0;
                let numeric = (lp - lm) / (2.0 * step);
                let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
                assert!(err < 1e-4, "{name}[{k}]: {analytic} vs {numeric}");
            }
        }
    }

    #[test]
    fn initial_loss_near_uniform_and_training_reduces_it() {
        let words: Vec<String> = (0..30).map(|i| format!("w{i}")).collect();
        let vocab = Vocabulary::from_tokens(words.clone(), false);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let corpus: Vec<Vec<String>> = (0..64)
            .map(|_| {
                let mut s = words.clone();
                s.shuffle(&mut rng);
                s.truncate(8);
                s
            })
            .collect();
        let train = TrainConfig {
            epochs: 3,
            batch_size: 16,
            ..TrainConfig::default()
        };
        let out = pretrain_mlm(&corpus, &vocab, &config(0), &train, 0.15, &mut |_, _| {}).unwrap();
        let ln_v = (vocab.len() as f64).ln();
        assert!((out.initial_loss - ln_v).abs() <= 0.2 * ln_v, "{} vs {ln_v}", out.initial_loss);
        assert_eq!(out.log.len(), 3);
        assert_eq!(out.encoder.config.vocab_size, vocab.len());
        let empty: Vec<Vec<String>> = vec![vec![]];
        assert_eq!(
            pretrain_mlm(&empty, &vocab, &config(0), &train, 0.15, &mut |_, _| {}).unwrap_err().exit_code(),
            3
        );
    }
}
