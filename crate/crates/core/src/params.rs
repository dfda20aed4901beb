//! The full trainable parameter set and a flat, ordered view over its tensors.
//!
//! The order returned by [`JointParams::tensors`] is the manifest order used
//! by the model archive and the optimizer state.

use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderParams, LayerNorm, Linear, ModelConfig};
use crate::heads::{HeadParams, LossWeights};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorKind {
    /// Weight matrix (embeddings, projections, classifier weights); decayed.
    Matrix,
    Bias,
    NormGain,
    NormBias,
    LossLogit,
}

impl TensorKind {
    pub fn decays(self) -> bool {
        matches!(self, TensorKind::Matrix)
    }
}

/// Which part of the model a tensor belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TensorGroup {
    Encoder,
    IntentHead,
    SlotHead,
    LossWeights,
    /// Output bias of the masked-language-model head.
    MlmHead,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
}

impl TensorSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

pub struct TensorRef<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: TensorKind,
    pub group: TensorGroup,
    pub data: &'a [f64],
}

pub struct TensorMut<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: TensorKind,
    pub group: TensorGroup,
    pub data: &'a mut [f64],
}

/// Encoder weights, both heads and the loss-weight logits.
#[derive(Clone, Debug, PartialEq)]
pub struct JointParams {
    pub encoder: EncoderParams,
    pub heads: HeadParams,
    pub loss_weights: LossWeights,
}

impl JointParams {
    pub fn init<R: Rng + ?Sized>(config: &ModelConfig, num_intents: usize, num_tags: usize, rng: &mut R) -> Self {
        let encoder = EncoderParams::init(config, rng);
        let heads = HeadParams::init(config.hidden_size, num_intents, num_tags, rng);
        Self {
            encoder,
            heads,
            loss_weights: LossWeights::default(),
        }
    }

    pub fn zeros(config: &ModelConfig, num_intents: usize, num_tags: usize) -> Self {
        Self {
            encoder: EncoderParams::zeros(config),
            heads: HeadParams::zeros(config.hidden_size, num_intents, num_tags),
            loss_weights: LossWeights::default(),
        }
    }

    /// Zero tensors with the same shapes as `self`.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.data.fill(0.0);
        }
        z
    }

    pub fn tensors(&self) -> Vec<TensorRef<'_>> {
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
        let h = &self.heads;
        let heads: [(&str, &[f64], Vec<usize>, TensorKind, TensorGroup); 4] = [
            ("intent_head.weight", slice2(&h.intent_weight), h.intent_weight.shape().to_vec(), TensorKind::Matrix, TensorGroup::IntentHead),
            ("intent_head.bias", slice1(&h.intent_bias), vec![h.intent_bias.len()], TensorKind::Bias, TensorGroup::IntentHead),
            ("slot_head.weight", slice2(&h.slot_weight), h.slot_weight.shape().to_vec(), TensorKind::Matrix, TensorGroup::SlotHead),
            ("slot_head.bias", slice1(&h.slot_bias), vec![h.slot_bias.len()], TensorKind::Bias, TensorGroup::SlotHead),
        ];
        for (name, data, shape, kind, group) in heads {
            out.push(TensorRef {
                name: name.to_string(),
                shape,
                kind,
                group,
                data,
            });
        }
        for (name, data) in [
            ("loss_weight.a", std::slice::from_ref(&self.loss_weights.a)),
            ("loss_weight.b", std::slice::from_ref(&self.loss_weights.b)),
        ] {
            out.push(TensorRef {
                name: name.to_string(),
                shape: vec![1],
                kind: TensorKind::LossLogit,
                group: TensorGroup::LossWeights,
                data,
            });
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<TensorMut<'_>> {
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
        let HeadParams {
            intent_weight,
            intent_bias,
            slot_weight,
            slot_bias,
        } = &mut self.heads;
        let iw_shape = intent_weight.shape().to_vec();
        let sw_shape = slot_weight.shape().to_vec();
        let ib_len = intent_bias.len();
        let sb_len = slot_bias.len();
        let heads: [(&str, &mut [f64], Vec<usize>, TensorKind, TensorGroup); 4] = [
            ("intent_head.weight", slice2_mut(intent_weight), iw_shape, TensorKind::Matrix, TensorGroup::IntentHead),
            ("intent_head.bias", slice1_mut(intent_bias), vec![ib_len], TensorKind::Bias, TensorGroup::IntentHead),
            ("slot_head.weight", slice2_mut(slot_weight), sw_shape, TensorKind::Matrix, TensorGroup::SlotHead),
            ("slot_head.bias", slice1_mut(slot_bias), vec![sb_len], TensorKind::Bias, TensorGroup::SlotHead),
        ];
        for (name, data, shape, kind, group) in heads {
            out.push(TensorMut {
                name: name.to_string(),
                shape,
                kind,
                group,
                data,
            });
        }
        let LossWeights { a, b } = &mut self.loss_weights;
        for (name, data) in [
            ("loss_weight.a", std::slice::from_mut(a)),
            ("loss_weight.b", std::slice::from_mut(b)),
        ] {
            out.push(TensorMut {
                name: name.to_string(),
                shape: vec![1],
                kind: TensorKind::LossLogit,
                group: TensorGroup::LossWeights,
                data,
            });
        }
        out
    }

    pub fn manifest(&self) -> Vec<TensorSpec> {
        self.tensors()
            .into_iter()
            .map(|t| TensorSpec {
                name: t.name,
                shape: t.shape,
            })
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }
}

fn slice1(a: &Array1<f64>) -> &[f64] {
    a.as_slice().expect("contiguous tensor")
}

fn slice2(a: &Array2<f64>) -> &[f64] {
    a.as_slice().expect("contiguous tensor")
}

fn slice1_mut(a: &mut Array1<f64>) -> &mut [f64] {
    a.as_slice_mut().expect("contiguous tensor")
}

fn slice2_mut(a: &mut Array2<f64>) -> &mut [f64] {
    a.as_slice_mut().expect("contiguous tensor")
}

/// Visits encoder tensors in manifest order.
pub(crate) fn encoder_tensors<'a>(
    enc: &'a EncoderParams,
    f: &mut dyn FnMut(String, Vec<usize>, TensorKind, &'a [f64]),
) {
    f(
        "encoder.token_embeddings".into(),
        enc.token_embeddings.shape().to_vec(),
        TensorKind::Matrix,
        slice2(&enc.token_embeddings),
    );
    f(
        "encoder.position_embeddings".into(),
        enc.position_embeddings.shape().to_vec(),
        TensorKind::Matrix,
        slice2(&enc.position_embeddings),
    );
    for (i, layer) in enc.layers.iter().enumerate() {
        let linears: [(&str, &'a Linear); 6] = [
            ("attention.query", &layer.query),
            ("attention.key", &layer.key),
            ("attention.value", &layer.value),
            ("attention.output", &layer.output),
            ("ffn.in", &layer.ffn_in),
            ("ffn.out", &layer.ffn_out),
        ];
        for (name, lin) in linears {
            f(
                format!("encoder.layer{i}.{name}.weight"),
                lin.weight.shape().to_vec(),
                TensorKind::Matrix,
                slice2(&lin.weight),
            );
            f(
                format!("encoder.layer{i}.{name}.bias"),
                vec![lin.bias.len()],
                TensorKind::Bias,
                slice1(&lin.bias),
            );
        }
        let norms: [(&str, &'a LayerNorm); 2] = [
            ("attention_norm", &layer.attention_norm),
            ("ffn_norm", &layer.ffn_norm),
        ];
        for (name, norm) in norms {
            f(
                format!("encoder.layer{i}.{name}.gain"),
                vec![norm.gain.len()],
                TensorKind::NormGain,
                slice1(&norm.gain),
            );
            f(
                format!("encoder.layer{i}.{name}.bias"),
                vec![norm.bias.len()],
                TensorKind::NormBias,
                slice1(&norm.bias),
            );
        }
    }
}

pub(crate) fn encoder_tensors_mut<'a>(
    enc: &'a mut EncoderParams,
    f: &mut dyn FnMut(String, Vec<usize>, TensorKind, &'a mut [f64]),
) {
    let tok_shape = enc.token_embeddings.shape().to_vec();
    let pos_shape = enc.position_embeddings.shape().to_vec();
    f(
        "encoder.token_embeddings".into(),
        tok_shape,
        TensorKind::Matrix,
        slice2_mut(&mut enc.token_embeddings),
    );
    f(
        "encoder.position_embeddings".into(),
        pos_shape,
        TensorKind::Matrix,
        slice2_mut(&mut enc.position_embeddings),
    );
    for (i, layer) in enc.layers.iter_mut().enumerate() {
        let crate::encoder::LayerParams {
            query,
            key,
            value,
            output,
            attention_norm,
            ffn_in,
            ffn_out,
            ffn_norm,
        } = layer;
        let linears: [(&str, &'a mut Linear); 6] = [
            ("attention.query", query),
            ("attention.key", key),
            ("attention.value", value),
            ("attention.output", output),
            ("ffn.in", ffn_in),
            ("ffn.out", ffn_out),
        ];
        for (name, lin) in linears {
            let shape = lin.weight.shape().to_vec();
            let len = lin.bias.len();
            f(
                format!("encoder.layer{i}.{name}.weight"),
                shape,
                TensorKind::Matrix,
                slice2_mut(&mut lin.weight),
            );
            f(
                format!("encoder.layer{i}.{name}.bias"),
                vec![len],
                TensorKind::Bias,
                slice1_mut(&mut lin.bias),
            );
        }
        let norms: [(&str, &'a mut LayerNorm); 2] = [("attention_norm", attention_norm), ("ffn_norm", ffn_norm)];
        for (name, norm) in norms {
            let len = norm.gain.len();
            f(
                format!("encoder.layer{i}.{name}.gain"),
                vec![len],
                TensorKind::NormGain,
                slice1_mut(&mut norm.gain),
            );
            f(
                format!("encoder.layer{i}.{name}.bias"),
                vec![len],
                TensorKind::NormBias,
                slice1_mut(&mut norm.bias),
            );
        }
    }
}

/// Manifest of an encoder-only parameter set.
pub fn encoder_manifest(enc: &EncoderParams) -> Vec<TensorSpec> {
    let mut out = Vec::new();
    encoder_tensors(enc, &mut |name, shape, _, _| out.push(TensorSpec { name, shape }));
    out
}
