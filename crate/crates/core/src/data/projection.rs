//! Slot transfer through token alignments and catalog-based entity
//! substitution.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::LabeledExample;
use crate::error::{Error, Result};
use crate::metrics::extract_spans;

/// Slot type → candidate surface strings.
pub type EntityCatalog = BTreeMap<String, Vec<String>>;

/// A labeled source sentence, its translation and `(source, target)` links.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AlignmentPair {
    pub source: LabeledExample,
    pub target_tokens: Vec<String>,
    pub alignment: Vec<(usize, usize)>,
}

/// One line of the projection input file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProjectionRecord {
    pub source_tokens: Vec<String>,
    pub source_tags: Vec<String>,
    pub intent: String,
    pub target_tokens: Vec<String>,
    pub alignment: Vec<[usize; 2]>,
}

impl ProjectionRecord {
    pub fn into_pair(self, source_language: &str) -> AlignmentPair {
        AlignmentPair {
            source: LabeledExample {
                tokens: self.source_tokens,
                tags: self.source_tags,
                intent: self.intent,
                language: source_language.to_string(),
            },
            target_tokens: self.target_tokens,
            alignment: self.alignment.into_iter().map(|[s, t]| (s, t)).collect(),
        }
    }
}

/// Reads JSON lines of [`ProjectionRecord`]; blank lines are skipped.
pub fn read_projection_jsonl(path: impl AsRef<Path>) -> Result<Vec<AlignmentPair>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut pairs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: ProjectionRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        pairs.push(record.into_pair(""));
    }
    Ok(pairs)
}

fn slot_type(tag: &str) -> Option<&str> {
    tag.strip_prefix("B-").or_else(|| tag.strip_prefix("I-"))
}

/// Rewrites a per-token type sequence as IOB: each maximal run of one type
/// becomes `B-x I-x …`.
fn types_to_iob(types: &[Option<&str>]) -> Vec<String> {
    let mut out = Vec::with_capacity(types.len());
    let mut previous: Option<&str> = None;
    for &ty in types {
        match ty {
            None => out.push("O".to_string()),
            Some(t) if previous == Some(t) => out.push(format!("I-{t}")),
            Some(t) => out.push(format!("B-{t}")),
        }
        previous = ty;
    }
    out
}

/// Transfers slot types to the target tokens. A target token linked to
/// several slot-bearing source tokens takes the type of the lowest source
/// index; unlinked tokens become `O`. B/I prefixes are recomputed afterwards.
pub fn project_slots(pair: &AlignmentPair) -> Result<Vec<String>> {
    pair.source.validate()?;
    let n_src = pair.source.tokens.len();
    let n_tgt = pair.target_tokens.len();
    let mut links: Vec<Option<usize>> = vec![None; n_tgt];
    for &(s, t) in &pair.alignment {
        if s >= n_src || t >= n_tgt {
            return Err(Error::input(format!(
                "alignment link ({s}, {t}) out of range for {n_src} source and {n_tgt} target tokens"
            )));
        }
        if slot_type(&pair.source.tags[s]).is_none() {
            continue;
        }
        let best = &mut links[t];
        if best.is_none_or(|b| s < b) {
            *best = Some(s);
        }
    }
    let types: Vec<Option<&str>> = links
        .iter()
        .map(|l| l.and_then(|s| slot_type(&pair.source.tags[s])))
        .collect();
    Ok(types_to_iob(&types))
}

/// Builds the target-language example: projected tags, copied intent.
pub fn project_example(pair: &AlignmentPair, language: &str) -> Result<LabeledExample> {
    Ok(LabeledExample {
        tokens: pair.target_tokens.clone(),
        tags: project_slots(pair)?,
        intent: pair.source.intent.clone(),
        language: language.to_string(),
    })
}

pub fn load_entity_catalog(path: impl AsRef<Path>) -> Result<EntityCatalog> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })
}

/// Replaces every slot span whose type appears in `catalog` with a uniformly
/// chosen entry (split on whitespace) tagged `B-x I-x …`.
pub fn substitute_entities<R: Rng + ?Sized>(
    example: &LabeledExample,
    catalog: &EntityCatalog,
    rng: &mut R,
) -> Result<LabeledExample> {
    example.validate()?;
    let spans = extract_spans(&example.tags)?;
    let mut tokens = Vec::with_capacity(example.tokens.len());
    let mut tags = Vec::with_capacity(example.tags.len());
    let mut cursor = 0;
    for span in spans {
        let Some(entries) = catalog.get(&span.slot_type) else {
            continue;
        };
        if entries.is_empty() {
            return Err(Error::input(format!("entity catalog has no entries for {:?}", span.slot_type)));
        }
        let entry = &entries[rng.random_range(0..entries.len())];
        let words: Vec<&str> = entry.split_whitespace().collect();
        if words.is_empty() {
            return Err(Error::input(format!("empty catalog entry for {:?}", span.slot_type)));
        }
        tokens.extend_from_slice(&example.tokens[cursor..span.start]);
        tags.extend_from_slice(&example.tags[cursor..span.start]);
        for (k, w) in words.iter().enumerate() {
            tokens.push(w.to_string());
            let prefix = if k == 0 { "B" } else { "I" };
            tags.push(format!("{prefix}-{}", span.slot_type));
        }
        cursor = span.end;
    }
    tokens.extend_from_slice(&example.tokens[cursor..]);
    tags.extend_from_slice(&example.tags[cursor..]);
    Ok(LabeledExample {
        tokens,
        tags,
        intent: example.intent.clone(),
        language: example.language.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heads::is_valid_tag;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pair(src_tags: &[&str], n_tgt: usize, alignment: &[(usize, usize)]) -> AlignmentPair {
        AlignmentPair {
            source: LabeledExample::new(
                (0..src_tags.len()).map(|i| format!("s{i}")).collect(),
                src_tags.iter().map(|s| s.to_string()).collect(),
                "PlayMusic",
                "en",
            ),
            target_tokens: (0..n_tgt).map(|i| format!("t{i}")).collect(),
            alignment: alignment.to_vec(),
        }
    }

    /// IOB well-formedness: no I-x after O, at the start, or after another type.
    fn well_formed(tags: &[String]) -> bool {
        tags.iter().enumerate().all(|(i, t)| match t.strip_prefix("I-") {
            Some(ty) => i > 0 && slot_type(&tags[i - 1]) == Some(ty),
            None => is_valid_tag(t),
        })
    }

    #[test]
    fn identity_projection() {
        let p = pair(&["O", "B-artist"], 2, &[(0, 0), (1, 1)]);
        assert_eq!(project_slots(&p).unwrap(), ["O", "B-artist"]);
    }

    #[test]
    fn crossed_alignment_recomputes_prefixes() {
        let p = pair(&["B-song", "I-song"], 2, &[(0, 1), (1, 0)]);
        assert_eq!(project_slots(&p).unwrap(), ["B-song", "I-song"]);
    }

    #[test]
    fn split_span_becomes_two_spans() {
        let p = pair(&["B-song", "I-song"], 3, &[(0, 0), (1, 2)]);
        assert_eq!(project_slots(&p).unwrap(), ["B-song", "O", "B-song"]);
    }

    #[test]
    fn conflicts_take_lowest_source() {
        let p = pair(&["B-artist", "B-song"], 1, &[(1, 0), (0, 0)]);
        assert_eq!(project_slots(&p).unwrap(), ["B-artist"]);
        // an O source link does not override a slot-bearing one
        let p = pair(&["O", "B-song"], 1, &[(0, 0), (1, 0)]);
        assert_eq!(project_slots(&p).unwrap(), ["B-song"]);
    }

    #[test]
    fn out_of_range_link_is_rejected() {
        let p = pair(&["O"], 1, &[(0, 3)]);
        assert!(matches!(project_slots(&p), Err(Error::Input(_))));
    }

    #[test]
    fn substitution_of_movie_name() {
        let e = LabeledExample::new(
            vec!["find", "fish", "story"],
            vec!["O", "B-movie_name", "I-movie_name"],
            "SearchScreeningEvent",
            "it",
        );
        let catalog = EntityCatalog::from([("movie_name".to_string(), vec!["la dolce vita".to_string()])]);
        let out = substitute_entities(&e, &catalog, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(out.tokens, ["find", "la", "dolce", "vita"]);
        assert_eq!(out.tags, ["O", "B-movie_name", "I-movie_name", "I-movie_name"]);
        assert_eq!(out.intent, "SearchScreeningEvent");
    }

    #[test]
    fn substitution_no_op_and_shrinking() {
        let e = LabeledExample::new(
            vec!["play", "with", "or", "without", "you"],
            vec!["O", "B-song", "I-song", "I-song", "I-song"],
            "PlayMusic",
            "en",
        );
        let unrelated = EntityCatalog::from([("city".to_string(), vec!["roma".to_string()])]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(substitute_entities(&e, &unrelated, &mut rng).unwrap(), e);

        let short = EntityCatalog::from([("song".to_string(), vec!["azzurro".to_string()])]);
        let out = substitute_entities(&e, &short, &mut rng).unwrap();
        assert_eq!(out.tokens.len(), e.tokens.len() - 3);
        assert_eq!(out.tokens.len(), out.tags.len());

        let empty = EntityCatalog::from([("song".to_string(), vec![])]);
        assert!(substitute_entities(&e, &empty, &mut rng).is_err());
    }

    #[test]
    fn jsonl_records() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("in.jsonl");
        fs::write(
            &path,
            r#"{"source_tokens":["play","u2"],"source_tags":["O","B-artist"],"intent":"PlayMusic","target_tokens":["suona","u2"],"alignment":[[0,0],[1,1]]}

{"source_tokens":["x"],"source_tags":["O"],"intent":"A","target_tokens":["y"],"alignment":[]}
"#,
        )
        .unwrap();
        let pairs = read_projection_jsonl(&path).unwrap();
        assert_eq!(pairs.len(), 2);
        assert_eq!(project_example(&pairs[0], "it").unwrap().tags, ["O", "B-artist"]);

        fs::write(&path, "{\"source_tokens\": 3}\n").unwrap();
        assert!(matches!(read_projection_jsonl(&path), Err(Error::Parse { line: 1, .. })));
    }

    fn tag_strategy() -> impl Strategy<Value = String> {
        prop_oneof![
            Just("O".to_string()),
            Just("B-a".to_string()),
            Just("I-a".to_string()),
            Just("B-b".to_string()),
            Just("I-b".to_string()),
        ]
    }

    proptest! {
        #[test]
        fn projection_output_is_well_formed(
            src in proptest::collection::vec(tag_strategy(), 1..8),
            n_tgt in 1usize..8,
            links in proptest::collection::vec((0usize..8, 0usize..8), 0..12),
        ) {
            let alignment: Vec<_> = links.into_iter().filter(|&(s, t)| s < src.len() && t < n_tgt).collect();
            let p = pair(&src.iter().map(String::as_str).collect::<Vec<_>>(), n_tgt, &alignment);
            let tags = project_slots(&p).unwrap();
            prop_assert_eq!(tags.len(), n_tgt);
            prop_assert!(well_formed(&tags));
        }

        #[test]
        fn substitution_preserves_lengths_and_iob(
            tags in proptest::collection::vec(tag_strategy(), 1..10),
            seed in any::<u64>(),
        ) {
            let e = LabeledExample {
                tokens: (0..tags.len()).map(|i| format!("w{i}")).collect(),
                tags: tags.clone(),
                intent: "X".into(),
                language: "en".into(),
            };
            let catalog = EntityCatalog::from([
                ("a".to_string(), vec!["one".to_string(), "two words".to_string()]),
                ("b".to_string(), vec!["three more words".to_string()]),
            ]);
            let out = substitute_entities(&e, &catalog, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            prop_assert_eq!(out.tokens.len(), out.tags.len());
            prop_assert!(well_formed(&out.tags));
        }
    }
}
