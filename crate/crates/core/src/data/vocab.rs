use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use super::LabeledExample;
use crate::encoder::TokenIds;
use crate::error::{Error, Result};
use crate::heads::LabelMaps;

pub const CLS_ID: usize = 0;
pub const PAD_ID: usize = 1;
pub const UNK_ID: usize = 2;
pub const MASK_ID: usize = 3;
pub const NUM_RESERVED: usize = 4;

const RESERVED: [&str; NUM_RESERVED] = ["[CLS]", "[PAD]", "[UNK]", "[MASK]"];

/// Whole-word vocabulary with four reserved ids.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "VocabularyFile", into = "VocabularyFile")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    lowercase: bool,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VocabularyFile {
    tokens: Vec<String>,
    lowercase: bool,
}

impl From<VocabularyFile> for Vocabulary {
    fn from(f: VocabularyFile) -> Self {
        Vocabulary::from_tokens(f.tokens, f.lowercase)
    }
}

impl From<Vocabulary> for VocabularyFile {
    fn from(v: Vocabulary) -> Self {
        VocabularyFile {
            tokens: v.tokens.into_iter().skip(NUM_RESERVED).collect(),
            lowercase: v.lowercase,
        }
    }
}

impl Vocabulary {
    /// Sorted word list from `sentences`; reserved names are never added.
    pub fn build<'a, I, S>(sentences: I, lowercase: bool) -> Self
    where
        I: IntoIterator<Item = &'a [S]>,
        S: AsRef<str> + 'a,
    {
        let words: BTreeSet<String> = sentences
            .into_iter()
            .flat_map(|s| s.iter().map(|w| normalize(w.as_ref(), lowercase)))
            .collect();
        Self::from_tokens(words.into_iter().collect(), lowercase)
    }

    pub fn from_examples(examples: &[LabeledExample], lowercase: bool) -> Self {
        Self::build(examples.iter().map(|e| e.tokens.as_slice()), lowercase)
    }

    /// Non-reserved words in id order starting at [`NUM_RESERVED`].
    pub fn from_tokens(words: Vec<String>, lowercase: bool) -> Self {
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let mut index = HashMap::new();
        for w in words {
            if RESERVED.contains(&w.as_str()) || index.contains_key(&w) {
                continue;
            }
            index.insert(w.clone(), tokens.len());
            tokens.push(w);
        }
        Self {
            tokens,
            index,
            lowercase,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() == NUM_RESERVED
    }

    pub fn lowercase(&self) -> bool {
        self.lowercase
    }

    /// Id of `word`, or [`UNK_ID`] when unseen.
    pub fn id(&self, word: &str) -> usize {
        let key = normalize(word, self.lowercase);
        self.index.get(key.as_str()).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Words without the reserved entries.
    pub fn words(&self) -> &[String] {
        &self.tokens[NUM_RESERVED..]
    }
}

fn normalize(word: &str, lowercase: bool) -> String {
    if lowercase {
        word.to_lowercase()
    } else {
        word.to_string()
    }
}

/// A model-ready example. Position 0 is the sequence-start token; `tags[0]`
/// is a placeholder excluded by `loss_mask`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedExample {
    pub token_ids: TokenIds,
    pub tags: Vec<usize>,
    pub loss_mask: Vec<bool>,
    pub intent: usize,
    pub truncated: bool,
}

impl EncodedExample {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }
}

/// Prepends the sequence-start id and truncates to `max_len` positions.
/// Returns the ids and whether truncation happened.
pub fn encode_tokens<S: AsRef<str>>(tokens: &[S], vocab: &Vocabulary, max_len: usize) -> (TokenIds, bool) {
    let keep = tokens.len().min(max_len.saturating_sub(1));
    let ids = std::iter::once(CLS_ID)
        .chain(tokens[..keep].iter().map(|t| vocab.id(t.as_ref())))
        .collect();
    (TokenIds::new(ids), keep < tokens.len())
}

pub fn encode_example(
    example: &LabeledExample,
    vocab: &Vocabulary,
    maps: &LabelMaps,
    max_len: usize,
) -> Result<EncodedExample> {
    example.validate()?;
    let intent = maps
        .intent_index(&example.intent)
        .ok_or_else(|| Error::input(format!("unknown intent label {:?}", example.intent)))?;
    let (token_ids, truncated) = encode_tokens(&example.tokens, vocab, max_len);
    let mut tags = Vec::with_capacity(token_ids.len());
    tags.push(0);
    for tag in &example.tags[..token_ids.len() - 1] {
        let id = maps
            .tag_index(tag)
            .ok_or_else(|| Error::input(format!("unknown slot tag {tag:?}")))?;
        tags.push(id);
    }
    let mut loss_mask = vec![true; token_ids.len()];
    loss_mask[0] = false;
    Ok(EncodedExample {
        token_ids,
        tags,
        loss_mask,
        intent,
        truncated,
    })
}

/// Encodes every example and counts truncations.
pub fn encode_examples(
    examples: &[LabeledExample],
    vocab: &Vocabulary,
    maps: &LabelMaps,
    max_len: usize,
) -> Result<(Vec<EncodedExample>, usize)> {
    let encoded = examples
        .iter()
        .map(|e| encode_example(e, vocab, maps, max_len))
        .collect::<Result<Vec<_>>>()?;
    let truncated = encoded.iter().filter(|e| e.truncated).count();
    Ok((encoded, truncated))
}

/// Pads every example to the longest in the batch; padded positions are
/// masked in attention and loss.
pub fn pad_batch(batch: &[EncodedExample]) -> Vec<EncodedExample> {
    let width = batch.iter().map(EncodedExample::len).max().unwrap_or(0);
    batch
        .iter()
        .map(|e| {
            let mut e = e.clone();
            let extra = width - e.len();
            e.token_ids.ids.extend(std::iter::repeat_n(PAD_ID, extra));
            e.token_ids.attention_mask.extend(std::iter::repeat_n(false, extra));
            e.tags.extend(std::iter::repeat_n(0, extra));
            e.loss_mask.extend(std::iter::repeat_n(false, extra));
            e
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn maps() -> LabelMaps {
        LabelMaps::new(vec!["PlayMusic".into()], vec!["B-artist".into(), "O".into()]).unwrap()
    }

    #[test]
    fn reserved_ids_and_unknowns() {
        let vocab = Vocabulary::from_tokens(vec!["u2".into(), "[CLS]".into(), "play".into()], false);
        assert_eq!(vocab.len(), 6);
        assert_eq!(vocab.id("u2"), 4);
        assert_eq!(vocab.id("play"), 5);
        assert_eq!(vocab.id("[CLS]"), UNK_ID);
        assert_eq!(vocab.id("never-seen"), UNK_ID);
        assert_eq!(vocab.token(MASK_ID), Some("[MASK]"));
    }

    #[test]
    fn lowercasing() {
        let vocab = Vocabulary::build([["Play", "U2"].as_slice()], true);
        assert_eq!(vocab.id("PLAY"), vocab.id("play"));
        assert_ne!(vocab.id("play"), UNK_ID);
    }

    #[test]
    fn encode_single_token() {
        let mut vocab_words: Vec<String> = (0..3).map(|i| format!("w{i}")).collect();
        vocab_words.push("u2".into());
        let vocab = Vocabulary::from_tokens(vocab_words, false);
        assert_eq!(vocab.id("u2"), 7);
        let e = LabeledExample::new(vec!["u2"], vec!["B-artist"], "PlayMusic", "en");
        let enc = encode_example(&e, &vocab, &maps(), 16).unwrap();
        assert_eq!(enc.token_ids.ids, vec![0, 7]);
        assert_eq!(enc.loss_mask, vec![false, true]);
        assert_eq!(enc.tags, vec![0, 0]);
        assert!(!enc.truncated);

        let unseen = LabeledExample::new(vec!["zzz"], vec!["O"], "PlayMusic", "en");
        assert_eq!(encode_example(&unseen, &vocab, &maps(), 16).unwrap().token_ids.ids[1], UNK_ID);
    }

    #[test]
    fn truncation_is_counted() {
        let vocab = Vocabulary::from_tokens(vec!["a".into()], false);
        let e = LabeledExample::new(vec!["a"; 600], vec!["O"; 600], "PlayMusic", "en");
        let (encoded, truncated) = encode_examples(&[e.clone(), e], &vocab, &maps(), 128).unwrap();
        assert_eq!(encoded[0].len(), 128);
        assert_eq!(encoded[0].tags.len(), 128);
        assert_eq!(truncated, 2);
    }

    #[test]
    fn unknown_labels_are_named() {
        let vocab = Vocabulary::from_tokens(vec![], false);
        let e = LabeledExample::new(vec!["a"], vec!["O"], "GetWeather", "en");
        let err = encode_example(&e, &vocab, &maps(), 8).unwrap_err();
        assert!(err.to_string().contains("GetWeather"));
        let e = LabeledExample::new(vec!["a"], vec!["B-song"], "PlayMusic", "en");
        assert!(encode_example(&e, &vocab, &maps(), 8).unwrap_err().to_string().contains("B-song"));
    }

    #[test]
    fn tag_ids_decode_back() {
        let vocab = Vocabulary::from_tokens(vec![], false);
        let maps = maps();
        let e = LabeledExample::new(vec!["a", "b", "c"], vec!["O", "B-artist", "O"], "PlayMusic", "en");
        let enc = encode_example(&e, &vocab, &maps, 8).unwrap();
        let back: Vec<&str> = enc.tags[1..].iter().map(|&t| maps.slot_tags[t].as_str()).collect();
        assert_eq!(back, e.tags);
    }

    #[test]
    fn padding() {
        let vocab = Vocabulary::from_tokens(vec![], false);
        let short = LabeledExample::new(vec!["a"], vec!["O"], "PlayMusic", "en");
        let long = LabeledExample::new(vec!["a", "b", "c"], vec!["O", "O", "O"], "PlayMusic", "en");
        let batch = [
            encode_example(&short, &vocab, &maps(), 8).unwrap(),
            encode_example(&long, &vocab, &maps(), 8).unwrap(),
        ];
        let padded = pad_batch(&batch);
        assert_eq!(padded[0].token_ids.ids, vec![CLS_ID, UNK_ID, PAD_ID, PAD_ID]);
        assert_eq!(padded[0].token_ids.attention_mask, vec![true, true, false, false]);
        assert_eq!(padded[0].loss_mask, vec![false, true, false, false]);
        assert_eq!(padded[1], batch[1]);
    }
}
