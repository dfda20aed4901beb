//! Labeled utterances, the three-file dataset format, vocabulary and label
//! maps, training-set subsampling, multilingual merging and the
//! cross-lingual annotation tooling.

mod io;
mod projection;
pub mod synthetic;
mod vocab;

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heads::{is_valid_tag, LabelMaps};

pub use io::{load_dataset, load_split, write_dataset, write_split};
pub use projection::{
    load_entity_catalog, project_example, project_slots, read_projection_jsonl, substitute_entities, AlignmentPair,
    EntityCatalog, ProjectionRecord,
};
pub use vocab::{
    encode_example, encode_examples, encode_tokens, pad_batch, EncodedExample, Vocabulary, CLS_ID, MASK_ID,
    NUM_RESERVED, PAD_ID, UNK_ID,
};

/// One utterance with its IOB tags and intent.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LabeledExample {
    pub tokens: Vec<String>,
    pub tags: Vec<String>,
    pub intent: String,
    pub language: String,
}

impl LabeledExample {
    pub fn new<S: Into<String>>(tokens: Vec<S>, tags: Vec<S>, intent: impl Into<String>, language: impl Into<String>) -> Self {
        Self {
            tokens: tokens.into_iter().map(Into::into).collect(),
            tags: tags.into_iter().map(Into::into).collect(),
            intent: intent.into(),
            language: language.into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.tokens.is_empty() {
            return Err(Error::input("example has no tokens"));
        }
        if self.tokens.len() != self.tags.len() {
            return Err(Error::input(format!(
                "{} tokens but {} tags",
                self.tokens.len(),
                self.tags.len()
            )));
        }
        if let Some(bad) = self.tags.iter().find(|t| !is_valid_tag(t)) {
            return Err(Error::input(format!("malformed tag {bad:?}")));
        }
        Ok(())
    }
}

/// Train/valid/test lists as loaded.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub language: String,
    pub train: Vec<LabeledExample>,
    pub valid: Vec<LabeledExample>,
    pub test: Vec<LabeledExample>,
}

impl DatasetSplit {
    pub fn counts(&self) -> (usize, usize, usize) {
        (self.train.len(), self.valid.len(), self.test.len())
    }
}

/// Intents and tags seen in `train`, sorted lexicographically; "O" always present.
pub fn build_label_maps(train: &[LabeledExample]) -> Result<LabelMaps> {
    if train.is_empty() {
        return Err(Error::input("cannot build label maps from an empty training set"));
    }
    let mut intents: Vec<String> = train.iter().map(|e| e.intent.clone()).collect();
    intents.sort();
    intents.dedup();
    let mut tags: Vec<String> = train
        .iter()
        .flat_map(|e| e.tags.iter().cloned())
        .chain(std::iter::once("O".to_string()))
        .collect();
    tags.sort();
    tags.dedup();
    LabelMaps::new(intents, tags)
}

/// Uniformly samples `⌈fraction · |train|⌉` examples without replacement.
/// Fraction 1.0 yields a shuffled copy of the whole set.
pub fn subset_fraction(train: &[LabeledExample], fraction: f64, seed: u64) -> Result<Vec<LabeledExample>> {
    if train.is_empty() {
        return Err(Error::input("cannot subsample an empty training set"));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::input(format!("fraction {fraction} is outside (0, 1]")));
    }
    let size = subset_size(train.len(), fraction);
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(order[..size].iter().map(|&i| train[i].clone()).collect())
}

/// `⌈fraction · n⌉`, robust to representation error in `fraction · n`.
pub fn subset_size(n: usize, fraction: f64) -> usize {
    let exact = fraction * n as f64;
    let rounded = exact.round();
    let size = if (exact - rounded).abs() < 1e-9 { rounded } else { exact.ceil() };
    (size as usize).clamp(1, n)
}

/// Concatenates train and valid sets of several languages. Test examples keep
/// their language tag so they can be scored per language.
pub fn merge_multilingual(datasets: &[DatasetSplit]) -> Result<DatasetSplit> {
    if datasets.len() < 2 {
        return Err(Error::input("merging needs at least two datasets"));
    }
    let mut seen = HashSet::new();
    for d in datasets {
        if d.language.is_empty() {
            return Err(Error::input("dataset without a language tag"));
        }
        if !seen.insert(d.language.as_str()) {
            return Err(Error::input(format!("duplicate language tag {:?}", d.language)));
        }
    }
    let mut merged = DatasetSplit {
        language: datasets.iter().map(|d| d.language.as_str()).collect::<Vec<_>>().join("+"),
        ..DatasetSplit::default()
    };
    for d in datasets {
        merged.train.extend(d.train.iter().cloned());
        merged.valid.extend(d.valid.iter().cloned());
        merged.test.extend(d.test.iter().cloned());
    }
    Ok(merged)
}

/// Replaces the language tag of every example in the split.
pub fn retag_language(split: &mut DatasetSplit, language: &str) {
    split.language = language.to_string();
    for e in split.train.iter_mut().chain(split.valid.iter_mut()).chain(split.test.iter_mut()) {
        e.language = language.to_string();
    }
}
