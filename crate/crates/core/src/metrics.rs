//! Span extraction from IOB tags, slot precision/recall/F1, intent accuracy
//! and sentence accuracy.
//!
//! Chunking follows conlleval: `I-x` without a valid opener (after `O`, at
//! the start, or after a different type) starts a new span.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::LabeledExample;
use crate::error::{Error, Result};
use crate::heads::is_valid_tag;

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Span {
    #[serde(rename = "type")]
    pub slot_type: String,
    pub start: usize,
    pub end: usize,
}

/// Spans in order of their start index.
pub fn extract_spans<S: AsRef<str>>(tags: &[S]) -> Result<Vec<Span>> {
    let mut spans: Vec<Span> = Vec::new();
    let mut open: Option<Span> = None;
    for (i, tag) in tags.iter().enumerate() {
        let tag = tag.as_ref();
        if !is_valid_tag(tag) {
            return Err(Error::input(format!("invalid IOB tag {tag:?} at position {i}")));
        }
        let continues = match (&open, tag.strip_prefix("I-")) {
            (Some(span), Some(ty)) => span.slot_type == ty,
            _ => false,
        };
        if continues {
            continue;
        }
        if let Some(mut span) = open.take() {
            span.end = i;
            spans.push(span);
        }
        if let Some(ty) = tag.strip_prefix("B-").or_else(|| tag.strip_prefix("I-")) {
            open = Some(Span {
                slot_type: ty.to_string(),
                start: i,
                end: i + 1,
            });
        }
    }
    if let Some(mut span) = open {
        span.end = tags.len();
        spans.push(span);
    }
    Ok(spans)
}

/// Canonical IOB tags for a set of spans over `len` tokens.
pub fn spans_to_tags(spans: &[Span], len: usize) -> Vec<String> {
    let mut tags = vec!["O".to_string(); len];
    for s in spans {
        for (k, tag) in tags[s.start..s.end].iter_mut().enumerate() {
            *tag = format!("{}-{}", if k == 0 { "B" } else { "I" }, s.slot_type);
        }
    }
    tags
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpanCounts {
    pub true_positives: usize,
    pub predicted: usize,
    pub gold: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlotScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub counts: SpanCounts,
}

impl SpanCounts {
    pub fn scores(self) -> SlotScores {
        let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        let precision = ratio(self.true_positives, self.predicted);
        let recall = ratio(self.true_positives, self.gold);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        SlotScores {
            precision,
            recall,
            f1,
            counts: self,
        }
    }
}

fn sentence_counts<S: AsRef<str>>(gold: &[S], pred: &[S]) -> Result<SpanCounts> {
    if gold.len() != pred.len() {
        return Err(Error::input(format!(
            "gold has {} tags but prediction has {}",
            gold.len(),
            pred.len()
        )));
    }
    let g: BTreeSet<Span> = extract_spans(gold)?.into_iter().collect();
    let p: BTreeSet<Span> = extract_spans(pred)?.into_iter().collect();
    Ok(SpanCounts {
        true_positives: g.intersection(&p).count(),
        predicted: p.len(),
        gold: g.len(),
    })
}

/// Micro-averaged span precision, recall and F1 over all sentences.
pub fn slot_scores<S: AsRef<str>>(gold: &[Vec<S>], pred: &[Vec<S>]) -> Result<SlotScores> {
    if gold.len() != pred.len() {
        return Err(Error::input(format!(
            "{} gold sentences but {} predicted",
            gold.len(),
            pred.len()
        )));
    }
    let mut total = SpanCounts::default();
    for (g, p) in gold.iter().zip(pred) {
        let c = sentence_counts(g, p)?;
        total.true_positives += c.true_positives;
        total.predicted += c.predicted;
        total.gold += c.gold;
    }
    Ok(total.scores())
}

/// Fraction of exact (case-sensitive) matches.
pub fn intent_accuracy<S: AsRef<str>>(gold: &[S], pred: &[S]) -> Result<f64> {
    if gold.is_empty() {
        return Err(Error::input("intent accuracy of an empty list"));
    }
    if gold.len() != pred.len() {
        return Err(Error::input(format!(
            "{} gold intents but {} predicted",
            gold.len(),
            pred.len()
        )));
    }
    let correct = gold.iter().zip(pred).filter(|(g, p)| g.as_ref() == p.as_ref()).count();
    Ok(correct as f64 / gold.len() as f64)
}

/// How "all the slots are correct" is decided for sentence accuracy.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SentenceMatch {
    /// Equal span sets after conlleval repair.
    #[default]
    Spans,
    /// Identical tag strings.
    RawTags,
}

/// A decoded model output for one utterance.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Decoded {
    pub intent: String,
    pub tags: Vec<String>,
}

fn slots_match(gold: &[String], pred: &[String], mode: SentenceMatch) -> Result<bool> {
    if gold.len() != pred.len() {
        return Err(Error::input(format!(
            "gold has {} tags but prediction has {}",
            gold.len(),
            pred.len()
        )));
    }
    Ok(match mode {
        SentenceMatch::RawTags => gold == pred,
        SentenceMatch::Spans => {
            let g: BTreeSet<Span> = extract_spans(gold)?.into_iter().collect();
            let p: BTreeSet<Span> = extract_spans(pred)?.into_iter().collect();
            g == p
        }
    })
}

fn check_aligned(gold: &[LabeledExample], pred: &[Decoded]) -> Result<()> {
    if gold.len() != pred.len() {
        return Err(Error::input(format!(
            "{} gold sentences but {} predictions",
            gold.len(),
            pred.len()
        )));
    }
    if gold.is_empty() {
        return Err(Error::input("no sentences to score"));
    }
    Ok(())
}

/// Fraction of sentences whose intent and slots are both correct.
pub fn sentence_accuracy(gold: &[LabeledExample], pred: &[Decoded], mode: SentenceMatch) -> Result<f64> {
    check_aligned(gold, pred)?;
    let mut correct = 0;
    for (g, p) in gold.iter().zip(pred) {
        if g.intent == p.intent && slots_match(&g.tags, &p.tags, mode)? {
            correct += 1;
        }
    }
    Ok(correct as f64 / gold.len() as f64)
}

/// Fraction of sentences whose repaired span sets match exactly, ignoring intents.
pub fn span_match_fraction(gold: &[LabeledExample], pred: &[Decoded]) -> Result<f64> {
    check_aligned(gold, pred)?;
    let mut matched = 0;
    for (g, p) in gold.iter().zip(pred) {
        if slots_match(&g.tags, &p.tags, SentenceMatch::Spans)? {
            matched += 1;
        }
    }
    Ok(matched as f64 / gold.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub slot_precision: f64,
    pub slot_recall: f64,
    pub slot_f1: f64,
    pub intent_accuracy: f64,
    pub sentence_accuracy: f64,
    pub true_positives: usize,
    pub predicted_spans: usize,
    pub gold_spans: usize,
    pub sentences: usize,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub per_language: BTreeMap<String, MetricsReport>,
}

impl MetricsReport {
    /// Scores aligned gold examples and predictions. Sub-reports per
    /// language are added when `per_language` is set or the examples carry
    /// more than one language tag.
    pub fn compute(
        gold: &[LabeledExample],
        pred: &[Decoded],
        mode: SentenceMatch,
        per_language: bool,
    ) -> Result<Self> {
        let mut report = Self::compute_flat(gold, pred, mode)?;
        let languages: BTreeSet<&str> = gold.iter().map(|e| e.language.as_str()).collect();
        if per_language || languages.len() > 1 {
            for lang in languages {
                let (g, p): (Vec<_>, Vec<_>) = gold
                    .iter()
                    .zip(pred)
                    .filter(|(e, _)| e.language == lang)
                    .map(|(e, d)| (e.clone(), d.clone()))
                    .unzip();
                report
                    .per_language
                    .insert(lang.to_string(), Self::compute_flat(&g, &p, mode)?);
            }
        }
        Ok(report)
    }

    fn compute_flat(gold: &[LabeledExample], pred: &[Decoded], mode: SentenceMatch) -> Result<Self> {
        check_aligned(gold, pred)?;
        let gold_tags: Vec<&[String]> = gold.iter().map(|e| e.tags.as_slice()).collect();
        let pred_tags: Vec<&[String]> = pred.iter().map(|d| d.tags.as_slice()).collect();
        let mut counts = SpanCounts::default();
        for (g, p) in gold_tags.iter().zip(&pred_tags) {
            let c = sentence_counts(g, p)?;
            counts.true_positives += c.true_positives;
            counts.predicted += c.predicted;
            counts.gold += c.gold;
        }
        let slots = counts.scores();
        let gold_intents: Vec<&str> = gold.iter().map(|e| e.intent.as_str()).collect();
        let pred_intents: Vec<&str> = pred.iter().map(|d| d.intent.as_str()).collect();
        Ok(Self {
            slot_precision: slots.precision,
            slot_recall: slots.recall,
            slot_f1: slots.f1,
            intent_accuracy: intent_accuracy(&gold_intents, &pred_intents)?,
            sentence_accuracy: sentence_accuracy(gold, pred, mode)?,
            true_positives: counts.true_positives,
            predicted_spans: counts.predicted,
            gold_spans: counts.gold,
            sentences: gold.len(),
            per_language: BTreeMap::new(),
        })
    }
}

/// Anything that maps a token sequence to an intent and one tag per token.
pub trait Predictor: Sync {
    fn predict(&self, tokens: &[String]) -> Result<Decoded>;
}

/// Replays gold annotations; scores 1.0 on the examples it was built from.
pub struct ReplayPredictor {
    answers: HashMap<Vec<String>, Decoded>,
}

impl ReplayPredictor {
    pub fn new(examples: &[LabeledExample]) -> Self {
        let answers = examples
            .iter()
            .map(|e| {
                (
                    e.tokens.clone(),
                    Decoded {
                        intent: e.intent.clone(),
                        tags: e.tags.clone(),
                    },
                )
            })
            .collect();
        Self { answers }
    }
}

impl Predictor for ReplayPredictor {
    fn predict(&self, tokens: &[String]) -> Result<Decoded> {
        self.answers
            .get(tokens)
            .cloned()
            .ok_or_else(|| Error::input(format!("no recorded answer for {:?}", tokens.join(" "))))
    }
}

/// Predictions in example order (computed in parallel).
pub fn predict_all<P: Predictor + ?Sized>(predictor: &P, examples: &[LabeledExample]) -> Result<Vec<Decoded>> {
    examples
        .par_iter()
        .map(|e| predictor.predict(&e.tokens))
        .collect()
}

#[derive(Clone, Copy, Debug, Default)]
pub struct EvalOptions {
    pub sentence_match: SentenceMatch,
    pub per_language: bool,
}

pub fn evaluate<P: Predictor + ?Sized>(
    predictor: &P,
    examples: &[LabeledExample],
    options: EvalOptions,
) -> Result<(MetricsReport, Vec<Decoded>)> {
    let preds = predict_all(predictor, examples)?;
    let report = MetricsReport::compute(examples, &preds, options.sentence_match, options.per_language)?;
    Ok((report, preds))
}

/// conlleval-style block: `token gold pred` per line, blank line between sentences.
pub fn write_conll<W: Write>(out: &mut W, gold: &[LabeledExample], pred: &[Decoded]) -> std::io::Result<()> {
    for (g, p) in gold.iter().zip(pred) {
        for ((tok, gt), pt) in g.tokens.iter().zip(&g.tags).zip(&p.tags) {
            writeln!(out, "{tok} {gt} {pt}")?;
        }
        writeln!(out)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tags(s: &str) -> Vec<String> {
        s.split(' ').map(str::to_string).collect()
    }

    fn span(t: &str, start: usize, end: usize) -> Span {
        Span {
            slot_type: t.into(),
            start,
            end,
        }
    }

    #[test]
    fn figure_one_pattern() {
        let spans = extract_spans(&tags("O B-song I-song I-song I-song O")).unwrap();
        assert_eq!(spans, vec![span("song", 1, 5)]);
        assert!(extract_spans(&tags("O O O")).unwrap().is_empty());
    }

    #[test]
    fn repair_rule() {
        assert_eq!(
            extract_spans(&tags("I-artist I-song")).unwrap(),
            vec![span("artist", 0, 1), span("song", 1, 2)]
        );
        assert_eq!(
            extract_spans(&tags("B-a I-a B-a O I-a")).unwrap(),
            vec![span("a", 0, 2), span("a", 2, 3), span("a", 4, 5)]
        );
        assert!(extract_spans(&tags("O X-a")).is_err());
    }

    #[test]
    fn score_arithmetic() {
        let gold = vec![tags("B-a O B-b I-b B-c")];
        let perfect = slot_scores(&gold, &gold).unwrap();
        assert_eq!((perfect.precision, perfect.recall, perfect.f1), (1.0, 1.0, 1.0));

        let gold = vec![tags("B-a O B-b")];
        let pred = vec![tags("B-a O B-c")];
        let s = slot_scores(&gold, &pred).unwrap();
        assert_eq!((s.precision, s.recall, s.f1), (0.5, 0.5, 0.5));

        let empty = slot_scores(&[tags("O")], &[tags("O")]).unwrap();
        assert_eq!((empty.precision, empty.recall, empty.f1), (0.0, 0.0, 0.0));
        assert!(slot_scores(&[tags("O O")], &[tags("O")]).is_err());
    }

    #[test]
    fn intent_accuracy_cases() {
        assert_eq!(intent_accuracy(&["A", "B"], &["A", "B"]).unwrap(), 1.0);
        assert_eq!(intent_accuracy(&["A", "B", "C", "D"], &["A", "X", "X", "X"]).unwrap(), 0.25);
        assert_eq!(intent_accuracy(&["PlayMusic"], &["playmusic"]).unwrap(), 0.0);
        assert!(intent_accuracy::<&str>(&[], &[]).is_err());
    }

    fn ex(intent: &str, t: &str) -> LabeledExample {
        let tg = tags(t);
        LabeledExample {
            tokens: (0..tg.len()).map(|i| format!("w{i}")).collect(),
            tags: tg,
            intent: intent.into(),
            language: "en".into(),
        }
    }

    fn dec(intent: &str, t: &str) -> Decoded {
        Decoded {
            intent: intent.into(),
            tags: tags(t),
        }
    }

    #[test]
    fn sentence_accuracy_cases() {
        let gold = vec![ex("A", "B-song I-song"), ex("B", "O B-x I-x")];
        let same: Vec<_> = gold.iter().map(|e| dec(&e.intent, &e.tags.join(" "))).collect();
        assert_eq!(sentence_accuracy(&gold, &same, SentenceMatch::Spans).unwrap(), 1.0);

        let off = vec![dec("A", "B-song I-song"), dec("B", "O B-x O")];
        assert_eq!(sentence_accuracy(&gold, &off, SentenceMatch::Spans).unwrap(), 0.5);

        let repaired = vec![dec("A", "I-song I-song"), dec("B", "O B-x I-x")];
        assert_eq!(sentence_accuracy(&gold, &repaired, SentenceMatch::Spans).unwrap(), 1.0);
        assert_eq!(sentence_accuracy(&gold, &repaired, SentenceMatch::RawTags).unwrap(), 0.5);
        assert!(sentence_accuracy(&gold, &repaired[..1], SentenceMatch::Spans).is_err());
    }

    #[test]
    fn replay_predictor_scores_one() {
        let gold = vec![ex("A", "B-song I-song"), ex("B", "O B-x I-x")];
        let (report, _) = evaluate(&ReplayPredictor::new(&gold), &gold, EvalOptions::default()).unwrap();
        assert_eq!(report.slot_f1, 1.0);
        assert_eq!(report.intent_accuracy, 1.0);
        assert_eq!(report.sentence_accuracy, 1.0);
        assert!(report.per_language.is_empty());
    }

    #[test]
    fn per_language_partition() {
        let mut gold = vec![ex("A", "B-a"), ex("B", "O"), ex("A", "O")];
        gold[2].tokens[0] = "z".into();
        gold[2].language = "it".into();
        let (report, _) = evaluate(&ReplayPredictor::new(&gold), &gold, EvalOptions::default()).unwrap();
        let total: usize = report.per_language.values().map(|r| r.sentences).sum();
        assert_eq!(total, report.sentences);
        assert!(report.per_language.contains_key("it"));
    }

    #[test]
    fn conll_block() {
        let gold = vec![ex("A", "B-a O")];
        let pred = vec![dec("A", "O O")];
        let mut out = Vec::new();
        write_conll(&mut out, &gold, &pred).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "w0 B-a O\nw1 O O\n\n");
    }

    fn tag_strategy() -> impl Strategy<Value = String> {
        prop_oneof![
            Just("O".to_string()),
            (0..3u8).prop_map(|t| format!("B-t{t}")),
            (0..3u8).prop_map(|t| format!("I-t{t}")),
        ]
    }

    proptest! {
        #[test]
        fn spans_are_disjoint_ordered_and_fixed_point(tg in proptest::collection::vec(tag_strategy(), 0..12)) {
            let spans = extract_spans(&tg).unwrap();
            for w in spans.windows(2) {
                prop_assert!(w[0].end <= w[1].start);
            }
            for s in &spans {
                prop_assert!(s.start < s.end && s.end <= tg.len());
            }
            let canonical = spans_to_tags(&spans, tg.len());
            prop_assert_eq!(extract_spans(&canonical).unwrap(), spans);
        }

        #[test]
        fn swapping_gold_and_pred_swaps_precision_and_recall(
            pairs in proptest::collection::vec(
                (1usize..10).prop_flat_map(|n| (
                    proptest::collection::vec(tag_strategy(), n),
                    proptest::collection::vec(tag_strategy(), n),
                )),
                1..6,
            )
        ) {
            let (gold, pred): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
            let a = slot_scores(&gold, &pred).unwrap();
            let b = slot_scores(&pred, &gold).unwrap();
            prop_assert_eq!(a.precision, b.recall);
            prop_assert_eq!(a.recall, b.precision);
            prop_assert!((a.f1 - b.f1).abs() < 1e-15);
        }
    }
}
