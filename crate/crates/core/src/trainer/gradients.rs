use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::{pad_batch, EncodedExample};
use crate::encoder::{backward, dropout_mask, forward_trace, softmax_rows_inplace, ModelConfig};
use crate::error::{Error, Result};
use crate::heads::{log_softmax, softmax, TrainMode};
use crate::params::JointParams;

/// Examples per sequential accumulation chunk. Fixed so that the summation
/// order, and therefore every bit of the result, does not depend on the
/// number of threads.
const CHUNK: usize = 8;

/// Batch-mean losses. `loss` is the objective actually optimized.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub loss: f64,
    pub intent_loss: f64,
    pub slot_loss: f64,
}

struct ExampleResult {
    intent_loss: f64,
    slot_loss: f64,
    loss: f64,
}

/// Batch-mean objective and its exact gradient with respect to every
/// tensor in `params`.
///
/// With `rng` set and `dropout_keep < 1`, inverted dropout is applied to all
/// final hidden states before both heads (and inside the encoder when
/// `internal_dropout` is enabled).
pub fn compute_gradients<R: Rng + ?Sized>(
    batch: &[EncodedExample],
    params: &JointParams,
    config: &ModelConfig,
    mode: TrainMode,
    rng: Option<&mut R>,
) -> Result<(LossBreakdown, JointParams)> {
    run(batch, params, config, mode, rng, true).map(|(l, g)| (l, g.expect("gradients requested")))
}

/// Forward-only version of [`compute_gradients`].
pub fn batch_loss<R: Rng + ?Sized>(
    batch: &[EncodedExample],
    params: &JointParams,
    config: &ModelConfig,
    mode: TrainMode,
    rng: Option<&mut R>,
) -> Result<LossBreakdown> {
    run(batch, params, config, mode, rng, false).map(|(l, _)| l)
}

fn run<R: Rng + ?Sized>(
    batch: &[EncodedExample],
    params: &JointParams,
    config: &ModelConfig,
    mode: TrainMode,
    rng: Option<&mut R>,
    want_grad: bool,
) -> Result<(LossBreakdown, Option<JointParams>)> {
    if batch.is_empty() {
        return Err(Error::input("cannot compute gradients of an empty batch"));
    }
    let padded = pad_batch(batch);
    // one independent stream per example, drawn in order
    let seeds: Option<Vec<u64>> = rng.map(|r| padded.iter().map(|_| r.random()).collect());
    let n = padded.len() as f64;
    let weights = mode.objective_weights(&params.loss_weights);

    let chunks: Vec<Result<(Vec<ExampleResult>, Option<JointParams>)>> = padded
        .par_chunks(CHUNK)
        .enumerate()
        .map(|(c, chunk)| {
            let mut grad = want_grad.then(|| params.zeros_like());
            let mut results = Vec::with_capacity(chunk.len());
            for (k, example) in chunk.iter().enumerate() {
                let index = c * CHUNK + k;
                let mut example_rng = seeds.as_ref().map(|s| ChaCha8Rng::seed_from_u64(s[index]));
                let r = example_pass(example, params, config, weights, example_rng.as_mut(), grad.as_mut(), n)
                    .map_err(|e| match e {
                        Error::Numeric(msg) => Error::Numeric(format!("batch example {index}: {msg}")),
                        other => other,
                    })?;
                if !r.loss.is_finite() {
                    return Err(Error::Numeric(format!("non-finite loss at batch example {index}")));
                }
                results.push(r);
            }
            Ok((results, grad))
        })
        .collect();

    let mut total = LossBreakdown::default();
    let mut grad: Option<JointParams> = None;
    for chunk in chunks {
        let (results, g) = chunk?;
        for r in results {
            total.loss += r.loss;
            total.intent_loss += r.intent_loss;
            total.slot_loss += r.slot_loss;
        }
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
    total.loss /= n;
    total.intent_loss /= n;
    total.slot_loss /= n;
    if let (Some(g), TrainMode::Joint) = (grad.as_mut(), mode) {
        let (alpha, beta) = weights;
        let da = 0.5 * alpha * beta * (total.intent_loss - total.slot_loss);
        g.loss_weights.a = da;
        g.loss_weights.b = -da;
    }
    Ok((total, grad))
}

/// Forward and (optionally) backward pass of one padded example. Gradients
/// are scaled by `1/n` and accumulated into `grad`.
fn example_pass(
    example: &EncodedExample,
    params: &JointParams,
    config: &ModelConfig,
    (alpha, beta): (f64, f64),
    mut rng: Option<&mut ChaCha8Rng>,
    grad: Option<&mut JointParams>,
    n: f64,
) -> Result<ExampleResult> {
    let ids = &example.token_ids;
    let internal_rng = if config.internal_dropout { rng.as_deref_mut() } else { None };
    let trace = forward_trace(ids, &params.encoder, config, internal_rng)?;
    let (m, h) = trace.output.dim();
    let mask = match rng {
        Some(r) if config.dropout_keep < 1.0 => Some(dropout_mask(m, h, config.dropout_keep, r)),
        _ => None,
    };
    let hidden = match &mask {
        Some(d) => &trace.output * d,
        None => trace.output.clone(),
    };
    let heads = &params.heads;

    let h0 = hidden.row(0);
    let intent_logits = heads.intent_logits(h0);
    let intent_loss = -log_softmax(intent_logits.view())[example.intent];

    let positions: Vec<usize> = (0..m).filter(|&j| example.loss_mask[j]).collect();
    if positions.is_empty() {
        return Err(Error::input("example has no scored positions"));
    }
    let mut slot_probs = heads.slot_logits(hidden.view());
    let mut slot_loss = 0.0;
    for &j in &positions {
        slot_loss -= log_softmax(slot_probs.row(j))[example.tags[j]];
    }
    slot_loss /= positions.len() as f64;
    let loss = alpha * intent_loss + beta * slot_loss;

    let Some(grad) = grad else {
        return Ok(ExampleResult {
            intent_loss,
            slot_loss,
            loss,
        });
    };

    let mut d_hidden = Array2::<f64>::zeros((m, h));
    if alpha != 0.0 {
        let mut dz = softmax(intent_logits.view());
        dz[example.intent] -= 1.0;
        dz *= alpha / n;
        accumulate_outer(&mut grad.heads.intent_weight, &dz, &h0.to_owned());
        grad.heads.intent_bias += &dz;
        let mut row = d_hidden.row_mut(0);
        row += &heads.intent_weight.t().dot(&dz);
    }
    if beta != 0.0 {
        softmax_rows_inplace(&mut slot_probs);
        let scale = beta / (n * positions.len() as f64);
        let mut dz = Array2::<f64>::zeros(slot_probs.raw_dim());
        for &j in &positions {
            let mut row = dz.row_mut(j);
            row.assign(&slot_probs.row(j));
            row[example.tags[j]] -= 1.0;
            row *= scale;
        }
        grad.heads.slot_weight += &dz.t().dot(&hidden);
        grad.heads.slot_bias += &dz.sum_axis(Axis(0));
        d_hidden += &dz.dot(&heads.slot_weight);
    }
    if let Some(d) = &mask {
        d_hidden *= d;
    }
    backward(ids, &params.encoder, config, &trace, d_hidden, &mut grad.encoder);
    Ok(ExampleResult {
        intent_loss,
        slot_loss,
        loss,
    })
}

fn accumulate_outer(target: &mut Array2<f64>, left: &Array1<f64>, right: &Array1<f64>) {
    let l = left.view().insert_axis(Axis(1));
    let r = right.view().insert_axis(Axis(0));
    *target += &l.dot(&r);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{encode_example, LabeledExample, Vocabulary};
    use crate::heads::LabelMaps;

    pub(crate) fn toy_batch(config: &ModelConfig) -> (Vec<EncodedExample>, LabelMaps, Vocabulary) {
        let examples = [
            LabeledExample::new(vec!["play", "u2", "now"], vec!["O", "B-artist", "O"], "PlayMusic", "en"),
            LabeledExample::new(vec!["rain", "today"], vec!["O", "B-date"], "GetWeather", "en"),
        ];
        let maps = LabelMaps::new(
            vec!["BookRestaurant".into(), "GetWeather".into(), "PlayMusic".into()],
            vec!["B-artist".into(), "B-date".into(), "I-artist".into(), "I-date".into(), "O".into()],
        )
        .unwrap();
        let vocab = Vocabulary::from_examples(&examples, false);
        let encoded = examples
            .iter()
            .map(|e| encode_example(e, &vocab, &maps, config.max_seq_len).unwrap())
            .collect();
        (encoded, maps, vocab)
    }

    fn small_config() -> ModelConfig {
        ModelConfig {
            num_layers: 1,
            hidden_size: 8,
            num_heads: 2,
            ffn_size: 16,
            vocab_size: 9,
            max_seq_len: 8,
            dropout_keep: 1.0,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn intent_only_has_zero_slot_head_gradient() {
        let config = small_config();
        let (batch, maps, _) = toy_batch(&config);
        let params = JointParams::init(&config, maps.num_intents(), maps.num_tags(), &mut ChaCha8Rng::seed_from_u64(1));
        let (loss, grad) = compute_gradients::<ChaCha8Rng>(&batch, &params, &config, TrainMode::IntentOnly, None).unwrap();
        assert!(grad.heads.slot_weight.iter().all(|&v| v == 0.0));
        assert!(grad.heads.slot_bias.iter().all(|&v| v == 0.0));
        assert!(grad.heads.intent_weight.iter().any(|&v| v != 0.0));
        assert_eq!(loss.loss, loss.intent_loss);
        assert_eq!((grad.loss_weights.a, grad.loss_weights.b), (0.0, 0.0));
    }

    #[test]
    fn duplicated_batch_has_same_mean_loss_and_gradient() {
        let config = small_config();
        let (batch, maps, _) = toy_batch(&config);
        let params = JointParams::init(&config, maps.num_intents(), maps.num_tags(), &mut ChaCha8Rng::seed_from_u64(2));
        let (l1, g1) = compute_gradients::<ChaCha8Rng>(&batch, &params, &config, TrainMode::Joint, None).unwrap();
        let doubled: Vec<_> = batch.iter().chain(&batch).cloned().collect();
        let (l2, g2) = compute_gradients::<ChaCha8Rng>(&doubled, &params, &config, TrainMode::Joint, None).unwrap();
        assert!((l1.loss - l2.loss).abs() <= 1e-12);
        for (a, b) in g1.tensors().iter().zip(g2.tensors().iter()) {
            for (x, y) in a.data.iter().zip(b.data) {
                assert!((x - y).abs() <= 1e-12, "{}", a.name);
            }
        }
    }

    #[test]
    fn joint_loss_at_init_matches_uniform_heads() {
        let config = small_config();
        let (batch, maps, _) = toy_batch(&config);
        let mut params = JointParams::init(&config, maps.num_intents(), maps.num_tags(), &mut ChaCha8Rng::seed_from_u64(3));
        params.heads = crate::heads::HeadParams::zeros(8, 3, 5);
        let loss = batch_loss::<ChaCha8Rng>(&batch, &params, &config, TrainMode::Joint, None).unwrap();
        assert!((loss.intent_loss - 3f64.ln()).abs() < 1e-12);
        assert!((loss.slot_loss - 5f64.ln()).abs() < 1e-12);
        assert!((loss.loss - (3f64.ln() + 5f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn dropout_is_deterministic_given_rng() {
        let config = ModelConfig {
            dropout_keep: 0.5,
            ..small_config()
        };
        let (batch, maps, _) = toy_batch(&config);
        let params = JointParams::init(&config, maps.num_intents(), maps.num_tags(), &mut ChaCha8Rng::seed_from_u64(4));
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            batch_loss(&batch, &params, &config, TrainMode::Joint, Some(&mut rng)).unwrap()
        };
        assert_eq!(run(7), run(7));
        assert_ne!(run(7), run(8));
        let eval = batch_loss::<ChaCha8Rng>(&batch, &params, &config, TrainMode::Joint, None).unwrap();
        assert_ne!(eval, run(7));
    }

    #[test]
    fn nan_parameters_are_numeric_errors() {
        let config = small_config();
        let (batch, maps, _) = toy_batch(&config);
        let mut params = JointParams::init(&config, maps.num_intents(), maps.num_tags(), &mut ChaCha8Rng::seed_from_u64(5));
        params.heads.intent_bias[0] = f64::NAN;
        let err = batch_loss::<ChaCha8Rng>(&batch, &params, &config, TrainMode::Joint, None).unwrap_err();
        assert_eq!(err.exit_code(), 4);
        assert!(err.to_string().contains("example 0"));
        assert!(compute_gradients::<ChaCha8Rng>(&[], &params, &config, TrainMode::Joint, None).is_err());
    }
}
