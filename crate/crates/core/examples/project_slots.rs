//! Carries slot annotations across a word alignment onto a translated
//! sentence, then swaps entity spans for catalog entries.

use joint_slu::data::{project_example, substitute_entities, AlignmentPair, EntityCatalog};
use joint_slu::LabeledExample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> joint_slu::Result<()> {
    let pairs = [
        AlignmentPair {
            source: LabeledExample::new(
                vec!["find", "fish", "story"],
                vec!["O", "B-movie_name", "I-movie_name"],
                "SearchScreeningEvent",
                "en",
            ),
            target_tokens: ["trova", "storia", "di", "pesce"].map(String::from).to_vec(),
            alignment: vec![(0, 0), (1, 3), (2, 1)],
        },
        AlignmentPair {
            source: LabeledExample::new(
                vec!["play", "thriller", "by", "michael", "jackson"],
                vec!["O", "B-song", "O", "B-artist", "I-artist"],
                "PlayMusic",
                "en",
            ),
            target_tokens: ["metti", "thriller", "di", "michael", "jackson"].map(String::from).to_vec(),
            alignment: vec![(0, 0), (1, 1), (2, 2), (3, 3), (4, 4)],
        },
    ];
    let catalog: EntityCatalog = [("movie_name".to_string(), vec!["la dolce vita".to_string(), "roma".to_string()])]
        .into_iter()
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for pair in &pairs {
        let projected = project_example(pair, "it")?;
        println!("{:?}\n  -> {:?}", pair.source.tags, projected.tags);
        let swapped = substitute_entities(&projected, &catalog, &mut rng)?;
        println!("  {} | {}", swapped.tokens.join(" "), swapped.tags.join(" "));
    }
    Ok(())
}
