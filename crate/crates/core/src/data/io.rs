//! Reader and writer for the `seq.in` / `seq.out` / `label` directory format.

use std::fs;
use std::path::{Path, PathBuf};

use super::{DatasetSplit, LabeledExample};
use crate::error::{Error, Result};
use crate::heads::is_valid_tag;

const SPLITS: [&str; 3] = ["train", "valid", "test"];

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    // str::lines strips both LF and CRLF endings
    Ok(text.lines().map(str::to_string).collect())
}

fn parse_error(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

/// Parses one split directory. Line `i` of the three files forms one example.
pub fn load_split(dir: impl AsRef<Path>, language: &str) -> Result<Vec<LabeledExample>> {
    let dir = dir.as_ref();
    let in_path = dir.join("seq.in");
    let out_path = dir.join("seq.out");
    let label_path = dir.join("label");
    let tokens = read_lines(&in_path)?;
    let tags = read_lines(&out_path)?;
    let labels = read_lines(&label_path)?;
    for (path, lines) in [(&out_path, &tags), (&label_path, &labels)] {
        if lines.len() != tokens.len() {
            return Err(parse_error(
                path,
                lines.len().min(tokens.len()) + 1,
                format!("{} lines, but seq.in has {}", lines.len(), tokens.len()),
            ));
        }
    }
    let mut examples = Vec::with_capacity(tokens.len());
    for (i, ((t, o), c)) in tokens.iter().zip(&tags).zip(&labels).enumerate() {
        let line = i + 1;
        let toks: Vec<String> = t.split_whitespace().map(str::to_string).collect();
        let tgs: Vec<String> = o.split_whitespace().map(str::to_string).collect();
        if toks.is_empty() {
            return Err(parse_error(&in_path, line, "empty utterance"));
        }
        if toks.len() != tgs.len() {
            return Err(parse_error(
                &out_path,
                line,
                format!("{} tags for {} tokens", tgs.len(), toks.len()),
            ));
        }
        if let Some(bad) = tgs.iter().find(|t| !is_valid_tag(t)) {
            return Err(parse_error(&out_path, line, format!("malformed tag {bad:?}")));
        }
        let intent = c.trim();
        if intent.is_empty() {
            return Err(parse_error(&label_path, line, "empty intent label"));
        }
        examples.push(LabeledExample {
            tokens: toks,
            tags: tgs,
            intent: intent.to_string(),
            language: language.to_string(),
        });
    }
    Ok(examples)
}

/// Loads `train/`, `valid/` and `test/` under `dir`.
pub fn load_dataset(dir: impl AsRef<Path>, language: &str) -> Result<DatasetSplit> {
    let dir = dir.as_ref();
    let [train, valid, test] = SPLITS.map(|s| load_split(dir.join(s), language));
    Ok(DatasetSplit {
        language: language.to_string(),
        train: train?,
        valid: valid?,
        test: test?,
    })
}

/// Writes one split directory with single-space separators and LF endings.
pub fn write_split(dir: impl AsRef<Path>, examples: &[LabeledExample]) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut seq_in = String::new();
    let mut seq_out = String::new();
    let mut label = String::new();
    for e in examples {
        seq_in.push_str(&e.tokens.join(" "));
        seq_in.push('\n');
        seq_out.push_str(&e.tags.join(" "));
        seq_out.push('\n');
        label.push_str(&e.intent);
        label.push('\n');
    }
    for (name, body) in [("seq.in", seq_in), ("seq.out", seq_out), ("label", label)] {
        let path: PathBuf = dir.join(name);
        fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

pub fn write_dataset(dir: impl AsRef<Path>, split: &DatasetSplit) -> Result<()> {
    let dir = dir.as_ref();
    write_split(dir.join("train"), &split.train)?;
    write_split(dir.join("valid"), &split.valid)?;
    write_split(dir.join("test"), &split.test)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, body: &str) {
        fs::create_dir_all(dir).unwrap();
        fs::write(dir.join(name), body).unwrap();
    }

    #[test]
    fn parses_example_line() {
        let tmp = tempfile::tempdir().unwrap();
        write(tmp.path(), "seq.in", "find fish story\r\n");
        write(tmp.path(), "seq.out", "O B-movie_name I-movie_name\r\n");
        write(tmp.path(), "label", "SearchScreeningEvent\r\n");
        let examples = load_split(tmp.path(), "en").unwrap();
        assert_eq!(
            examples,
            vec![LabeledExample::new(
                vec!["find", "fish", "story"],
                vec!["O", "B-movie_name", "I-movie_name"],
                "SearchScreeningEvent",
                "en"
            )]
        );
    }

    #[test]
    fn reports_mismatches_with_line_numbers() {
        let tmp = tempfile::tempdir().unwrap();
        write(tmp.path(), "seq.in", "a b\nc d\n");
        write(tmp.path(), "seq.out", "O O\nO\n");
        write(tmp.path(), "label", "X\nY\n");
        match load_split(tmp.path(), "en") {
            Err(Error::Parse { path, line, .. }) => {
                assert!(path.ends_with("seq.out"));
                assert_eq!(line, 2);
            }
            other => panic!("unexpected {other:?}"),
        }

        write(tmp.path(), "seq.out", "O O\nO Q-x\n");
        assert!(matches!(load_split(tmp.path(), "en"), Err(Error::Parse { line: 2, .. })));

        write(tmp.path(), "label", "X\n");
        match load_split(tmp.path(), "en") {
            Err(Error::Parse { path, .. }) => assert!(path.ends_with("label")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_file_names_the_path() {
        let tmp = tempfile::tempdir().unwrap();
        write(tmp.path(), "seq.in", "a\n");
        write(tmp.path(), "label", "X\n");
        let err = load_split(tmp.path(), "en").unwrap_err();
        assert!(err.to_string().contains("seq.out"));
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn dataset_round_trip() {
        let tmp = tempfile::tempdir().unwrap();
        let split = DatasetSplit {
            language: "it".into(),
            train: vec![
                LabeledExample::new(vec!["suona", "vasco"], vec!["O", "B-artist"], "PlayMusic", "it"),
                LabeledExample::new(vec!["che", "tempo"], vec!["O", "O"], "GetWeather", "it"),
            ],
            valid: vec![LabeledExample::new(vec!["x"], vec!["O"], "PlayMusic", "it")],
            test: vec![],
        };
        write_dataset(tmp.path(), &split).unwrap();
        assert_eq!(load_dataset(tmp.path(), "it").unwrap(), split);
    }
}
