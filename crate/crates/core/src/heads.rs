//! Sentence-level (intent) and token-level (slot) classifier heads, their
//! cross-entropy losses and the learnable combined objective.

use std::collections::HashSet;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::encoder::INIT_STD;
use crate::error::{Error, Result};

/// Ordered intent names and IOB slot tags; indices are stable.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMaps {
    pub intents: Vec<String>,
    pub slot_tags: Vec<String>,
}

/// Checks that `tag` is `O`, `B-x` or `I-x` with a nonempty type.
pub fn is_valid_tag(tag: &str) -> bool {
    tag == "O"
        || tag
            .strip_prefix("B-")
            .or_else(|| tag.strip_prefix("I-"))
            .is_some_and(|ty| !ty.is_empty())
}

impl LabelMaps {
    pub fn new(intents: Vec<String>, slot_tags: Vec<String>) -> Result<Self> {
        let maps = Self { intents, slot_tags };
        maps.validate()?;
        Ok(maps)
    }

    pub fn validate(&self) -> Result<()> {
        if self.intents.is_empty() {
            return Err(Error::input("label maps contain no intents"));
        }
        for (what, list) in [("intent", &self.intents), ("slot tag", &self.slot_tags)] {
            let mut seen = HashSet::new();
            if let Some(dup) = list.iter().find(|name| !seen.insert(name.as_str())) {
                return Err(Error::input(format!("duplicate {what} {dup:?}")));
            }
        }
        if !self.slot_tags.iter().any(|t| t == "O") {
            return Err(Error::input("slot tags must contain \"O\""));
        }
        if let Some(bad) = self.slot_tags.iter().find(|t| !is_valid_tag(t)) {
            return Err(Error::input(format!("malformed slot tag {bad:?}")));
        }
        Ok(())
    }

    pub fn num_intents(&self) -> usize {
        self.intents.len()
    }

    pub fn num_tags(&self) -> usize {
        self.slot_tags.len()
    }

    pub fn intent_index(&self, name: &str) -> Option<usize> {
        self.intents.iter().position(|n| n == name)
    }

    pub fn tag_index(&self, tag: &str) -> Option<usize> {
        self.slot_tags.iter().position(|t| t == tag)
    }
}

/// `W_c`, `b_c`, `W_o`, `b_o`. Weights are `labels × H`.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams {
    pub intent_weight: Array2<f64>,
    pub intent_bias: Array1<f64>,
    pub slot_weight: Array2<f64>,
    pub slot_bias: Array1<f64>,
}

impl HeadParams {
    pub fn init<R: Rng + ?Sized>(hidden: usize, num_intents: usize, num_tags: usize, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, INIT_STD).expect("valid normal");
        Self {
            intent_weight: Array2::from_shape_simple_fn((num_intents, hidden), || normal.sample(rng)),
            intent_bias: Array1::zeros(num_intents),
            slot_weight: Array2::from_shape_simple_fn((num_tags, hidden), || normal.sample(rng)),
            slot_bias: Array1::zeros(num_tags),
        }
    }

    pub fn zeros(hidden: usize, num_intents: usize, num_tags: usize) -> Self {
        Self {
            intent_weight: Array2::zeros((num_intents, hidden)),
            intent_bias: Array1::zeros(num_intents),
            slot_weight: Array2::zeros((num_tags, hidden)),
            slot_bias: Array1::zeros(num_tags),
        }
    }

    pub fn intent_logits(&self, h0: ArrayView1<f64>) -> Array1<f64> {
        self.intent_weight.dot(&h0) + &self.intent_bias
    }

    pub fn slot_logits(&self, h: ArrayView2<f64>) -> Array2<f64> {
        h.dot(&self.slot_weight.t()) + &self.slot_bias
    }
}

/// Unconstrained logits `(a, b)` of the loss weights,
/// `(α, β) = 2 · softmax(a, b)`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub a: f64,
    pub b: f64,
}

impl LossWeights {
    /// `(α, β)`; always positive (up to underflow) and summing to 2.
    pub fn alpha_beta(&self) -> (f64, f64) {
        let max = self.a.max(self.b);
        let ea = (self.a - max).exp();
        let eb = (self.b - max).exp();
        let z = ea + eb;
        (2.0 * ea / z, 2.0 * eb / z)
    }
}

/// Which objective the trainer optimizes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    /// `L = α L_c + β L_s` with learnable `(α, β)`.
    #[default]
    Joint,
    /// `L = L_c`.
    IntentOnly,
    /// `L = L_s`.
    SlotOnly,
}

impl TrainMode {
    pub const ALL: [TrainMode; 3] = [TrainMode::Joint, TrainMode::IntentOnly, TrainMode::SlotOnly];

    /// Effective `(α, β)` for this objective.
    pub fn objective_weights(self, weights: &LossWeights) -> (f64, f64) {
        match self {
            TrainMode::Joint => weights.alpha_beta(),
            TrainMode::IntentOnly => (1.0, 0.0),
            TrainMode::SlotOnly => (0.0, 1.0),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TrainMode::Joint => "joint",
            TrainMode::IntentOnly => "intent-only",
            TrainMode::SlotOnly => "slot-only",
        }
    }
}

impl std::fmt::Display for TrainMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "joint" => Ok(TrainMode::Joint),
            "intent-only" => Ok(TrainMode::IntentOnly),
            "slot-only" => Ok(TrainMode::SlotOnly),
            other => Err(Error::config(format!(
                "unknown mode {other:?} (expected joint, intent-only or slot-only)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct JointPrediction {
    pub intent_probs: Array1<f64>,
    /// One row per word position (the sequence-start row excluded).
    pub slot_probs: Array2<f64>,
    pub intent: usize,
    pub tags: Vec<usize>,
}

impl JointPrediction {
    pub fn from_probs(intent_probs: Array1<f64>, slot_probs: Array2<f64>) -> Self {
        let intent = argmax(intent_probs.view());
        let tags = slot_probs.rows().into_iter().map(argmax).collect();
        Self {
            intent_probs,
            slot_probs,
            intent,
            tags,
        }
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(v: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub fn log_softmax(logits: ArrayView1<f64>) -> Array1<f64> {
    let max = logits.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let lse = max + logits.fold(0.0, |acc, &x| acc + (x - max).exp()).ln();
    logits.mapv(|x| x - lse)
}

pub fn softmax(logits: ArrayView1<f64>) -> Array1<f64> {
    let max = logits.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let exp = logits.mapv(|x| (x - max).exp());
    let z = exp.sum();
    exp / z
}

fn check_finite<'a>(values: impl IntoIterator<Item = &'a f64>, what: &str) -> Result<()> {
    if values.into_iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric(format!("non-finite value in {what}")))
    }
}

/// `P_c = softmax(h0 · W_cᵀ + b_c)`.
pub fn intent_probs(h0: ArrayView1<f64>, heads: &HeadParams) -> Result<Array1<f64>> {
    check_finite(h0.iter(), "sentence hidden state")?;
    Ok(softmax(heads.intent_logits(h0).view()))
}

/// Row-wise `P_o^j = softmax(h_j · W_oᵀ + b_o)`.
pub fn slot_probs(h: ArrayView2<f64>, heads: &HeadParams) -> Result<Array2<f64>> {
    check_finite(h.iter(), "token hidden states")?;
    let mut logits = heads.slot_logits(h);
    crate::encoder::softmax_rows_inplace(&mut logits);
    Ok(logits)
}

/// Maps predicted indices back to intent and tag names.
pub fn decode(pred: &JointPrediction, maps: &LabelMaps) -> Result<(String, Vec<String>)> {
    let intent = maps
        .intents
        .get(pred.intent)
        .ok_or_else(|| Error::Internal(format!("intent index {} out of range", pred.intent)))?
        .clone();
    let tags = pred
        .tags
        .iter()
        .map(|&t| {
            maps.slot_tags
                .get(t)
                .cloned()
                .ok_or_else(|| Error::Internal(format!("tag index {t} out of range")))
        })
        .collect::<Result<_>>()?;
    Ok((intent, tags))
}

/// `L_c = −ln P_c[gold]`.
pub fn intent_loss(probs: ArrayView1<f64>, gold: usize) -> Result<f64> {
    let p = probs
        .get(gold)
        .ok_or_else(|| Error::input(format!("gold intent {gold} out of range {}", probs.len())))?;
    Ok(-p.ln())
}

/// Cross-entropy computed from logits through log-softmax.
pub fn cross_entropy_from_logits(logits: ArrayView1<f64>, gold: usize) -> Result<f64> {
    if gold >= logits.len() {
        return Err(Error::input(format!("gold class {gold} out of range {}", logits.len())));
    }
    Ok(-log_softmax(logits)[gold])
}

/// Mean token cross-entropy over the unmasked positions.
pub fn slot_loss(probs: ArrayView2<f64>, gold: &[usize], loss_mask: &[bool]) -> Result<f64> {
    if probs.nrows() != gold.len() || gold.len() != loss_mask.len() {
        return Err(Error::input(format!(
            "slot loss lengths disagree: {} rows, {} gold, {} mask",
            probs.nrows(),
            gold.len(),
            loss_mask.len()
        )));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for ((row, &g), _) in probs.rows().into_iter().zip(gold).zip(loss_mask).filter(|(_, &m)| m) {
        let p = row
            .get(g)
            .ok_or_else(|| Error::input(format!("gold tag {g} out of range {}", row.len())))?;
        total -= p.ln();
        count += 1;
    }
    if count == 0 {
        return Err(Error::input("slot loss needs at least one unmasked position"));
    }
    Ok(total / count as f64)
}

/// `L = α L_c + β L_s`.
pub fn joint_loss(intent: f64, slot: f64, weights: &LossWeights) -> f64 {
    let (alpha, beta) = weights.alpha_beta();
    alpha * intent + beta * slot
}

/// `(∂L/∂a, ∂L/∂b)` of [`joint_loss`].
pub fn joint_loss_logit_grad(intent: f64, slot: f64, weights: &LossWeights) -> (f64, f64) {
    let (alpha, beta) = weights.alpha_beta();
    // dα/da = αβ/2 and dβ/da = −αβ/2; b is symmetric.
    let da = 0.5 * alpha * beta * (intent - slot);
    (da, -da)
}
