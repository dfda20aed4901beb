//! Span extraction, slot F1, intent and sentence accuracy on a handful of
//! hand-written predictions, plus the CoNLL dump of the same predictions.

use joint_slu::metrics::{
    extract_spans, sentence_accuracy, slot_scores, write_conll, Decoded, MetricsReport, SentenceMatch,
};
use joint_slu::LabeledExample;

fn example(text: &str, tags: &str, intent: &str) -> LabeledExample {
    LabeledExample::new(
        text.split_whitespace().collect(),
        tags.split_whitespace().collect(),
        intent,
        "en",
    )
}

fn decoded(tags: &str, intent: &str) -> Decoded {
    Decoded {
        intent: intent.into(),
        tags: tags.split_whitespace().map(str::to_string).collect(),
    }
}

fn main() -> joint_slu::Result<()> {
    let gold = vec![
        example("play with or without you by u2", "O B-song I-song I-song I-song O B-artist", "PlayMusic"),
        example("weather in rome tomorrow", "O O B-city B-date", "GetWeather"),
        example("book a table for four", "O O O O B-party_size", "BookRestaurant"),
    ];
    let pred = vec![
        decoded("O B-song I-song I-song I-song O B-artist", "PlayMusic"),
        decoded("O O I-city B-date", "GetWeather"),
        decoded("O O O O O", "GetWeather"),
    ];

    for (g, p) in gold.iter().zip(&pred) {
        println!("{}", g.tokens.join(" "));
        println!("  gold spans {:?}", extract_spans(&g.tags)?);
        println!("  pred spans {:?}", extract_spans(&p.tags)?);
    }

    let gold_tags: Vec<Vec<String>> = gold.iter().map(|e| e.tags.clone()).collect();
    let pred_tags: Vec<Vec<String>> = pred.iter().map(|d| d.tags.clone()).collect();
    let scores = slot_scores(&gold_tags, &pred_tags)?;
    println!("slot precision {:.3} recall {:.3} f1 {:.3}", scores.precision, scores.recall, scores.f1);
    println!(
        "sentence accuracy: spans {:.3}, raw tags {:.3}",
        sentence_accuracy(&gold, &pred, SentenceMatch::Spans)?,
        sentence_accuracy(&gold, &pred, SentenceMatch::RawTags)?
    );

    let report = MetricsReport::compute(&gold, &pred, SentenceMatch::Spans, false)?;
    println!("{}", serde_json::to_string_pretty(&report).expect("serializable report"));

    let mut out = std::io::stdout().lock();
    write_conll(&mut out, &gold, &pred).expect("stdout");
    Ok(())
}
