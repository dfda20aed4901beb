//! Seeded template grammar producing a small intent/slot corpus: 3 intents,
//! 6 slot types and a 40-word lexicon.
//!
//! The word "rain" is both a weather carrier word and the tail of the song
//! title "purple rain", so some tags depend on context rather than identity.
//! A second lexicon maps every word one-to-one onto a disjoint vocabulary for
//! multilingual experiments.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{DatasetSplit, LabeledExample};

pub const INTENTS: [&str; 3] = ["BookRestaurant", "GetWeather", "PlayMusic"];
pub const SLOT_TYPES: [&str; 6] = ["artist", "song", "city", "date", "cuisine", "party_size"];

const VALUES: [(&str, &[&str]); 6] = [
    ("artist", &["adele", "queen", "prince"]),
    ("song", &["yesterday", "thunder", "purple rain"]),
    ("city", &["paris", "rome", "boston"]),
    ("date", &["today", "tomorrow", "monday"]),
    ("cuisine", &["sushi", "pizza", "thai"]),
    ("party_size", &["two", "four", "six"]),
];

const TEMPLATES: [(&str, &[&str]); 3] = [
    (
        "PlayMusic",
        &[
            "play {song}",
            "play {song} by {artist}",
            "play some music by {artist}",
            "please play the song {song}",
            "play some {artist} music",
            "play the song {song} by {artist} please",
        ],
    ),
    (
        "GetWeather",
        &[
            "what is the weather in {city}",
            "what is the weather in {city} {date}",
            "will it rain in {city} {date}",
            "will it rain {date}",
            "weather for {city} please",
            "what will the weather be {date} in {city}",
        ],
    ),
    (
        "BookRestaurant",
        &[
            "book a table for {party_size} people",
            "book a table for {party_size} in {city} {date}",
            "book a {cuisine} restaurant in {city}",
            "book a table at a {cuisine} restaurant for {party_size} people",
            "please book a {cuisine} table for {party_size} {date}",
        ],
    ),
];

/// One-to-one word mapping onto a second, disjoint lexicon.
const SECOND_LEXICON: [(&str, &str); 40] = [
    ("play", "suona"),
    ("some", "della"),
    ("music", "musica"),
    ("by", "di"),
    ("the", "il"),
    ("song", "canzone"),
    ("please", "grazie"),
    ("what", "che"),
    ("is", "come"),
    ("weather", "meteo"),
    ("in", "nel"),
    ("will", "farà"),
    ("it", "esso"),
    ("rain", "pioggia"),
    ("be", "sarà"),
    ("for", "per"),
    ("book", "prenota"),
    ("a", "un"),
    ("table", "tavolo"),
    ("people", "persone"),
    ("at", "al"),
    ("restaurant", "ristorante"),
    ("adele", "mina"),
    ("queen", "vasco"),
    ("prince", "zucchero"),
    ("yesterday", "azzurro"),
    ("thunder", "tuono"),
    ("purple", "viola"),
    ("paris", "parigi"),
    ("rome", "roma"),
    ("boston", "milano"),
    ("today", "oggi"),
    ("tomorrow", "domani"),
    ("monday", "lunedì"),
    ("sushi", "carbonara"),
    ("pizza", "lasagna"),
    ("thai", "risotto"),
    ("two", "due"),
    ("four", "quattro"),
    ("six", "sei"),
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Lexicon {
    Primary,
    Second,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticConfig {
    pub sentences: usize,
    pub train: usize,
    pub valid: usize,
    pub seed: u64,
    pub lexicon: Lexicon,
    pub language: String,
}

impl Default for SyntheticConfig {
    /// 800 sentences split 600/100/100.
    fn default() -> Self {
        Self {
            sentences: 800,
            train: 600,
            valid: 100,
            seed: 2019,
            lexicon: Lexicon::Primary,
            language: "en".into(),
        }
    }
}

fn translate(word: &str, lexicon: Lexicon) -> String {
    match lexicon {
        Lexicon::Primary => word.to_string(),
        Lexicon::Second => SECOND_LEXICON
            .iter()
            .find(|(w, _)| *w == word)
            .map(|(_, t)| t.to_string())
            .unwrap_or_else(|| panic!("word {word:?} missing from second lexicon")),
    }
}

fn generate_one<R: Rng>(rng: &mut R, lexicon: Lexicon, language: &str) -> LabeledExample {
    let (intent, templates) = TEMPLATES[rng.random_range(0..TEMPLATES.len())];
    let template = templates[rng.random_range(0..templates.len())];
    let mut tokens = Vec::new();
    let mut tags = Vec::new();
    for piece in template.split(' ') {
        if let Some(slot) = piece.strip_prefix('{').and_then(|p| p.strip_suffix('}')) {
            let values = VALUES.iter().find(|(s, _)| *s == slot).expect("known slot").1;
            let value = values[rng.random_range(0..values.len())];
            for (k, w) in value.split(' ').enumerate() {
                tokens.push(translate(w, lexicon));
                tags.push(format!("{}-{slot}", if k == 0 { "B" } else { "I" }));
            }
        } else {
            tokens.push(translate(piece, lexicon));
            tags.push("O".to_string());
        }
    }
    LabeledExample {
        tokens,
        tags,
        intent: intent.to_string(),
        language: language.to_string(),
    }
}

/// Generates `config.sentences` examples and splits them in order into
/// train, valid and test.
pub fn generate(config: &SyntheticConfig) -> DatasetSplit {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut all: Vec<LabeledExample> = (0..config.sentences)
        .map(|_| generate_one(&mut rng, config.lexicon, &config.language))
        .collect();
    let test = all.split_off((config.train + config.valid).min(all.len()));
    let valid = all.split_off(config.train.min(all.len()));
    DatasetSplit {
        language: config.language.clone(),
        train: all,
        valid,
        test,
    }
}

/// The default 600/100/100 corpus.
pub fn default_corpus() -> DatasetSplit {
    generate(&SyntheticConfig::default())
}

/// The same grammar over the second lexicon, tagged `language`.
pub fn second_language_corpus(seed: u64, language: &str) -> DatasetSplit {
    generate(&SyntheticConfig {
        seed,
        lexicon: Lexicon::Second,
        language: language.to_string(),
        ..SyntheticConfig::default()
    })
}
