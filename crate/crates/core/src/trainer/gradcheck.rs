use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{EncodedExample, NUM_RESERVED};
use crate::encoder::{ModelConfig, TokenIds};
use crate::heads::TrainMode;
use crate::params::JointParams;

use super::gradients::{batch_loss, compute_gradients};

/// Entries whose analytic and numeric gradients are both below this size
/// are compared on an absolute rather than relative scale.
const RELATIVE_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckConfig {
    pub model: ModelConfig,
    pub num_intents: usize,
    pub num_tags: usize,
    pub step: f64,
    pub tolerance: f64,
    pub seed: u64,
    pub mode: TrainMode,
    /// Lengths of the examples in the randomized batch.
    pub lengths: Vec<usize>,
}

impl Default for GradCheckConfig {
    /// Two layers, width 16, two heads, 3 intents and 5 tags.
    fn default() -> Self {
        Self {
            model: ModelConfig {
                num_layers: 2,
                hidden_size: 16,
                num_heads: 2,
                ffn_size: 32,
                vocab_size: 12,
                max_seq_len: 8,
                dropout_keep: 1.0,
                ..ModelConfig::default()
            },
            num_intents: 3,
            num_tags: 5,
            step: 1e-4,
            tolerance: 1e-4,
            seed: 0,
            mode: TrainMode::Joint,
            lengths: vec![3, 2],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorCheck {
    pub name: String,
    pub entries: usize,
    pub max_relative_error: f64,
    pub max_abs_error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub max_relative_error: f64,
    pub passed: bool,
    pub tensors: Vec<TensorCheck>,
}

impl GradCheckReport {
    /// Names of tensors over tolerance.
    pub fn failures(&self) -> Vec<&str> {
        self.tensors.iter().filter(|t| !t.passed).map(|t| t.name.as_str()).collect()
    }
}

/// Compares analytic gradients against central finite differences for every
/// entry of every tensor, on randomized parameters and inputs.
pub fn gradient_check(config: &GradCheckConfig) -> GradCheckReport {
    gradient_check_with(config, &|_| {})
}

/// As [`gradient_check`], with `tamper` applied to the analytic gradients
/// before comparison.
pub fn gradient_check_with(config: &GradCheckConfig, tamper: &dyn Fn(&mut JointParams)) -> GradCheckReport {
    let model = ModelConfig {
        dropout_keep: 1.0,
        internal_dropout: false,
        ..config.model.clone()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = JointParams::init(&model, config.num_intents, config.num_tags, &mut rng);
    for t in params.tensors_mut() {
        t.data.iter_mut().for_each(|v| *v += rng.random_range(-0.1..0.1));
    }
    let batch: Vec<EncodedExample> = config
        .lengths
        .iter()
        .map(|&len| {
            let words = len.min(model.max_seq_len - 1);
            let mut ids = vec![0];
            ids.extend((0..words).map(|_| rng.random_range(NUM_RESERVED.min(model.vocab_size - 1)..model.vocab_size)));
            let mut tags = vec![0];
            tags.extend((0..words).map(|_| rng.random_range(0..config.num_tags)));
            let mut loss_mask = vec![true; words + 1];
            loss_mask[0] = false;
            EncodedExample {
                token_ids: TokenIds::new(ids),
                tags,
                loss_mask,
                intent: rng.random_range(0..config.num_intents),
                truncated: false,
            }
        })
        .collect();

    let loss = |p: &JointParams| {
        batch_loss::<ChaCha8Rng>(&batch, p, &model, config.mode, None)
            .map(|l| l.loss)
            .unwrap_or(f64::NAN)
    };
    let mut analytic = match compute_gradients::<ChaCha8Rng>(&batch, &params, &model, config.mode, None) {
        Ok((_, g)) => g,
        Err(_) => {
            let mut g = params.zeros_like();
            g.tensors_mut().into_iter().for_each(|t| t.data.fill(f64::NAN));
            g
        }
    };
    tamper(&mut analytic);

    let names: Vec<String> = params.tensors().into_iter().map(|t| t.name).collect();
    let mut tensors = Vec::with_capacity(names.len());
    for (ti, name) in names.into_iter().enumerate() {
        let len = analytic.tensors()[ti].data.len();
        let mut max_rel: f64 = 0.0;
        let mut max_abs: f64 = 0.0;
        for k in 0..len {
            let original = params.tensors()[ti].data[k];
            params.tensors_mut()[ti].data[k] = original + config.step;
            let plus = loss(&params);
            params.tensors_mut()[ti].data[k] = original - config.step;
            let minus = loss(&params);
            params.tensors_mut()[ti].data[k] = original;
            let numeric = (plus - minus) / (2.0 * config.step);
            let a = analytic.tensors()[ti].data[k];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(RELATIVE_FLOOR);
            max_abs = nan_max(max_abs, abs);
            max_rel = nan_max(max_rel, rel);
        }
        tensors.push(TensorCheck {
            name,
            entries: len,
            max_relative_error: max_rel,
            max_abs_error: max_abs,
            passed: max_rel <= config.tolerance,
        });
    }
    let max_relative_error = tensors.iter().fold(0.0, |m, t| nan_max(m, t.max_relative_error));
    GradCheckReport {
        tolerance: config.tolerance,
        max_relative_error,
        passed: tensors.iter().all(|t| t.passed),
        tensors,
    }
}

fn nan_max(a: f64, b: f64) -> f64 {
    if a.is_nan() || b.is_nan() {
        f64::NAN
    } else {
        a.max(b)
    }
}
