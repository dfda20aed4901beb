//! Model archives: a directory holding `config.json` and `weights.bin`.
//!
//! `weights.bin` is the concatenation of every tensor as little-endian `f32`
//! in the order listed by the `tensors` manifest inside `config.json`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{encode_tokens, Vocabulary};
use crate::encoder::{encode, EncoderParams, ModelConfig};
use crate::error::{Error, Result};
use crate::heads::{decode, intent_probs, slot_probs, JointPrediction, LabelMaps};
use crate::metrics::{Decoded, Predictor};
use crate::params::{encoder_manifest, encoder_tensors_mut, JointParams, TensorSpec};

pub const CONFIG_FILE: &str = "config.json";
pub const WEIGHTS_FILE: &str = "weights.bin";
const FORMAT: &str = "joint-slu-archive/1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchiveKind {
    /// Encoder plus both heads and loss weights.
    Joint,
    /// Encoder weights only, as produced by MLM pretraining.
    Encoder,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchiveConfig {
    pub format: String,
    pub kind: ArchiveKind,
    pub model: ModelConfig,
    pub intents: Vec<String>,
    pub slot_tags: Vec<String>,
    pub vocabulary: Vocabulary,
    pub tensors: Vec<TensorSpec>,
}

/// A trained joint model with everything needed to run it on raw tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelArchive {
    pub config: ModelConfig,
    pub labels: LabelMaps,
    pub vocab: Vocabulary,
    pub params: JointParams,
}

/// Pretrained encoder weights and the vocabulary they were trained with.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderArchive {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub encoder: EncoderParams,
}

fn write_archive(dir: &Path, config: &ArchiveConfig, values: impl Iterator<Item = f64>) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let json = serde_json::to_string_pretty(config).map_err(|e| Error::json("serializing archive config", e))?;
    let path = dir.join(CONFIG_FILE);
    fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
    let bytes: Vec<u8> = values.flat_map(|v| (v as f32).to_le_bytes()).collect();
    let path = dir.join(WEIGHTS_FILE);
    fs::write(&path, bytes).map_err(|e| Error::io(&path, e))
}

fn read_archive(dir: &Path) -> Result<(ArchiveConfig, Vec<f64>)> {
    let path = dir.join(CONFIG_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
    let config: ArchiveConfig =
        serde_json::from_str(&text).map_err(|e| Error::json(format!("parsing {}", path.display()), e))?;
    if config.format != FORMAT {
        return Err(Error::config(format!(
            "{}: unsupported archive format {:?}",
            path.display(),
            config.format
        )));
    }
    config.model.validate()?;
    let path = dir.join(WEIGHTS_FILE);
    let bytes = fs::read(&path).map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
    let expected: usize = config.tensors.iter().map(TensorSpec::numel).sum();
    if bytes.len() != expected * 4 {
        return Err(Error::config(format!(
            "{}: {} bytes, manifest declares {} floats",
            path.display(),
            bytes.len(),
            expected
        )));
    }
    let values = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Ok((config, values))
}

fn check_manifest(found: &[TensorSpec], expected: &[TensorSpec]) -> Result<()> {
    if found.len() != expected.len() {
        return Err(Error::config(format!(
            "archive lists {} tensors, model expects {}",
            found.len(),
            expected.len()
        )));
    }
    for (f, e) in found.iter().zip(expected) {
        if f != e {
            return Err(Error::config(format!(
                "tensor mismatch: archive has {} {:?}, model expects {} {:?}",
                f.name, f.shape, e.name, e.shape
            )));
        }
    }
    Ok(())
}

fn fill<'a>(targets: impl Iterator<Item = &'a mut [f64]>, values: &[f64]) {
    let mut offset = 0;
    for t in targets {
        t.copy_from_slice(&values[offset..offset + t.len()]);
        offset += t.len();
    }
}

impl ModelArchive {
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let config = ArchiveConfig {
            format: FORMAT.into(),
            kind: ArchiveKind::Joint,
            model: self.config.clone(),
            intents: self.labels.intents.clone(),
            slot_tags: self.labels.slot_tags.clone(),
            vocabulary: self.vocab.clone(),
            tensors: self.params.manifest(),
        };
        let tensors = self.params.tensors();
        write_archive(dir.as_ref(), &config, tensors.iter().flat_map(|t| t.data.iter().copied()))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let (cfg, values) = read_archive(dir.as_ref())?;
        if cfg.kind != ArchiveKind::Joint {
            return Err(Error::config(format!(
                "{} holds an encoder-only archive, not a joint model",
                dir.as_ref().display()
            )));
        }
        let labels = LabelMaps::new(cfg.intents, cfg.slot_tags)?;
        if cfg.vocabulary.len() != cfg.model.vocab_size {
            return Err(Error::config(format!(
                "vocabulary has {} entries but vocab_size is {}",
                cfg.vocabulary.len(),
                cfg.model.vocab_size
            )));
        }
        let mut params = JointParams::zeros(&cfg.model, labels.num_intents(), labels.num_tags());
        check_manifest(&cfg.tensors, &params.manifest())?;
        fill(params.tensors_mut().into_iter().map(|t| t.data), &values);
        Ok(Self {
            config: cfg.model,
            labels,
            vocab: cfg.vocabulary,
            params,
        })
    }

    /// Evaluation-mode forward pass and argmax decoding for one utterance.
    /// Returns `None` for empty input.
    pub fn predict_indices<S: AsRef<str>>(&self, tokens: &[S]) -> Result<Option<JointPrediction>> {
        if tokens.is_empty() {
            return Ok(None);
        }
        let (ids, _) = encode_tokens(tokens, &self.vocab, self.config.max_seq_len);
        let hidden = encode(&ids, &self.params.encoder, &self.config)?;
        let pc = intent_probs(hidden.sentence(), &self.params.heads)?;
        let po = slot_probs(hidden.states.slice(ndarray::s![1.., ..]), &self.params.heads)?;
        Ok(Some(JointPrediction::from_probs(pc, po)))
    }
}

impl Predictor for ModelArchive {
    /// Tokens cut off by `max_seq_len` are tagged `O`.
    fn predict(&self, tokens: &[String]) -> Result<Decoded> {
        let pred = self
            .predict_indices(tokens)?
            .ok_or_else(|| Error::input("cannot predict an empty utterance"))?;
        let (intent, mut tags) = decode(&pred, &self.labels)?;
        tags.resize(tokens.len(), "O".to_string());
        Ok(Decoded { intent, tags })
    }
}

impl EncoderArchive {
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let config = ArchiveConfig {
            format: FORMAT.into(),
            kind: ArchiveKind::Encoder,
            model: self.config.clone(),
            intents: Vec::new(),
            slot_tags: Vec::new(),
            vocabulary: self.vocab.clone(),
            tensors: encoder_manifest(&self.encoder),
        };
        let mut values = Vec::new();
        crate::params::encoder_tensors(&self.encoder, &mut |_, _, _, data| values.extend_from_slice(data));
        write_archive(dir.as_ref(), &config, values.into_iter())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let (cfg, values) = read_archive(dir.as_ref())?;
        if cfg.vocabulary.len() != cfg.model.vocab_size {
            return Err(Error::config(format!(
                "vocabulary has {} entries but vocab_size is {}",
                cfg.vocabulary.len(),
                cfg.model.vocab_size
            )));
        }
        let mut encoder = EncoderParams::zeros(&cfg.model);
        let expected = encoder_manifest(&encoder);
        // a joint archive also carries the encoder, as a manifest prefix
        let found = &cfg.tensors[..expected.len().min(cfg.tensors.len())];
        check_manifest(found, &expected)?;
        let mut slices = Vec::new();
        encoder_tensors_mut(&mut encoder, &mut |_, _, _, data| slices.push(data));
        fill(slices.into_iter(), &values);
        Ok(Self {
            config: cfg.model,
            vocab: cfg.vocabulary,
            encoder,
        })
    }

    /// Checks that this encoder can seed a model with `config`.
    pub fn check_compatible(&self, config: &ModelConfig) -> Result<()> {
        let fields = [
            ("num_layers", self.config.num_layers, config.num_layers),
            ("hidden_size", self.config.hidden_size, config.hidden_size),
            ("num_heads", self.config.num_heads, config.num_heads),
            ("ffn_size", self.config.ffn_size, config.ffn_size),
            ("max_seq_len", self.config.max_seq_len, config.max_seq_len),
        ];
        for (name, pretrained, requested) in fields {
            if pretrained != requested {
                return Err(Error::config(format!(
                    "shape conflict: pretrained encoder has {name} = {pretrained}, run configures {requested}"
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn archive() -> ModelArchive {
        let vocab = Vocabulary::from_tokens(vec!["play".into(), "u2".into()], false);
        let config = ModelConfig {
            num_layers: 1,
            hidden_size: 8,
            num_heads: 2,
            ffn_size: 16,
            vocab_size: vocab.len(),
            max_seq_len: 8,
            ..ModelConfig::default()
        };
        let labels = LabelMaps::new(vec!["PlayMusic".into()], vec!["B-artist".into(), "O".into()]).unwrap();
        let params = JointParams::init(&config, 1, 2, &mut ChaCha8Rng::seed_from_u64(3));
        ModelArchive {
            config,
            labels,
            vocab,
            params,
        }
    }

    #[test]
    fn save_load_round_trip_at_f32_precision() {
        let tmp = tempfile::tempdir().unwrap();
        let a = archive();
        a.save(tmp.path()).unwrap();
        let b = ModelArchive::load(tmp.path()).unwrap();
        assert_eq!(a.labels, b.labels);
        assert_eq!(a.vocab, b.vocab);
        for (x, y) in a.params.tensors().iter().zip(b.params.tensors().iter()) {
            assert_eq!(x.name, y.name);
            for (u, v) in x.data.iter().zip(y.data) {
                assert_eq!(*u as f32 as f64, *v);
            }
        }
        let bytes = fs::read(tmp.path().join(WEIGHTS_FILE)).unwrap();
        assert_eq!(bytes.len(), a.params.num_parameters() * 4);
        let first = f32::from_le_bytes(bytes[..4].try_into().unwrap());
        assert_eq!(first, a.params.encoder.token_embeddings[[0, 0]] as f32);
    }

    #[test]
    fn encoder_archive_from_joint_and_shape_conflicts() {
        let tmp = tempfile::tempdir().unwrap();
        let a = archive();
        a.save(tmp.path()).unwrap();
        let enc = EncoderArchive::load(tmp.path()).unwrap();
        assert_eq!(enc.vocab, a.vocab);
        let mut other = a.config.clone();
        assert!(enc.check_compatible(&other).is_ok());
        other.hidden_size = 16;
        let err = enc.check_compatible(&other).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("hidden_size"));
        assert!(ModelArchive::load(tmp.path()).is_ok());
    }

    #[test]
    fn corrupted_weights_are_config_errors() {
        let tmp = tempfile::tempdir().unwrap();
        archive().save(tmp.path()).unwrap();
        fs::write(tmp.path().join(WEIGHTS_FILE), [0u8; 12]).unwrap();
        assert_eq!(ModelArchive::load(tmp.path()).unwrap_err().exit_code(), 2);
    }

    #[test]
    fn prediction_shapes() {
        let a = archive();
        let tokens: Vec<String> = "play some u2 now".split(' ').map(String::from).collect();
        let d = a.predict(&tokens).unwrap();
        assert_eq!(d.tags.len(), 4);
        assert_eq!(d.intent, "PlayMusic");
        assert!(a.predict_indices::<String>(&[]).unwrap().is_none());
        let long: Vec<String> = (0..20).map(|i| format!("w{i}")).collect();
        assert_eq!(a.predict(&long).unwrap().tags.len(), 20);
    }
}
