//! Datasets: vocabularies, the line-delimited example format, region-feature
//! containers, and the synthetic diagnostic tasks.
//!
//! One example per line:
//!
//! ```text
//! img000017 what color is object3\tred,red,red,red,red,red,red,red,red,red\tred
//! ```
//!
//! The first whitespace-separated word is the image id, the rest of the first
//! field is the question. The second field holds exactly ten human answers
//! and the third the training target.

mod features;
mod synth;

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

pub use features::{
    decode_features, encode_features, load_features, write_features, FeatureContainer,
};
pub use synth::{
    generate_toy_dataset, toy_taxonomy, write_dataset_dir, SynthConfig, Task, ToyDataset,
    ToyLayout, DEFAULT_AMPLITUDE, MAX_COLORS,
};

use crate::encoder::QuestionTokens;
use crate::error::{Error, Result};

pub const UNKNOWN_TOKEN: &str = "<unk>";
pub const HUMAN_ANSWERS: usize = 10;
/// Answer-vocabulary cap used at full scale.
pub const DEFAULT_ANSWER_CAP: usize = 2000;

/// Token list where the line number is the id.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn new<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let tokens: Vec<String> = tokens.into_iter().map(Into::into).collect();
        if tokens.is_empty() {
            return Err(Error::Validation("empty vocabulary".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::Validation(format!(
                    "bad vocabulary entry {t:?} at line {}",
                    i + 1
                )));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Validation(format!(
                    "duplicate vocabulary entry `{t}`"
                )));
            }
        }
        Ok(Vocab { tokens, index })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::new(fs::read_to_string(path)?.lines())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for t in &self.tokens {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        Ok(fs::write(path, self.to_text())?)
    }

    pub fn lookup(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Id of `token`, or 0 (the unknown entry) if it is absent.
    pub fn encode(&self, token: &str) -> usize {
        self.lookup(token).unwrap_or(0)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// An example as stored on disk, before vocabulary lookup.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawExample {
    pub image_id: String,
    pub tokens: Vec<String>,
    pub answers: Vec<String>,
    pub label: String,
}

impl RawExample {
    pub fn to_line(&self) -> String {
        format!(
            "{} {}\t{}\t{}",
            self.image_id,
            self.tokens.join(" "),
            self.answers.join(","),
            self.label
        )
    }

    pub fn parse_line(line: &str, lineno: usize) -> Result<Self> {
        let err = |message: String| Error::Parse {
            line: lineno,
            message,
        };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(err(format!(
                "expected 3 tab-separated fields, found {}",
                fields.len()
            )));
        }
        let mut words = fields[0].split_whitespace();
        let image_id = words
            .next()
            .ok_or_else(|| err("missing image id".into()))?
            .to_string();
        let tokens: Vec<String> = words.map(str::to_string).collect();
        if tokens.is_empty() {
            return Err(err("question has no tokens".into()));
        }
        let answers: Vec<String> = fields[1].split(',').map(|a| a.trim().to_string()).collect();
        if answers.len() != HUMAN_ANSWERS {
            return Err(err(format!(
                "expected {HUMAN_ANSWERS} answers, found {}",
                answers.len()
            )));
        }
        let label = fields[2].trim().to_string();
        if label.is_empty() {
            return Err(err("empty label".into()));
        }
        Ok(RawExample {
            image_id,
            tokens,
            answers,
            label,
        })
    }
}

pub fn parse_examples(text: &str) -> Result<Vec<RawExample>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| RawExample::parse_line(l, i + 1))
        .collect()
}

pub fn load_examples(path: &Path) -> Result<Vec<RawExample>> {
    parse_examples(&fs::read_to_string(path)?)
}

pub fn write_examples(path: &Path, examples: &[RawExample]) -> Result<()> {
    let mut s = String::new();
    for e in examples {
        s.push_str(&e.to_line());
        s.push('\n');
    }
    Ok(fs::write(path, s)?)
}

/// Most frequent answer; ties go to the lexicographically smallest.
pub fn consensus_label(answers: &[String]) -> Option<String> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for a in answers {
        *counts.entry(a.as_str()).or_default() += 1;
    }
    let mut best: Option<(&str, usize)> = None;
    for (a, c) in counts {
        if best.is_none_or(|(_, bc)| c > bc) {
            best = Some((a, c));
        }
    }
    best.map(|(a, _)| a.to_string())
}

/// Question and answer vocabularies: `<unk>` at id 0, then the remaining
/// entries sorted. At most `answer_cap` answers are kept, most frequent
/// first.
pub fn build_vocab(examples: &[RawExample], answer_cap: usize) -> Result<(Vocab, Vocab)> {
    if examples.is_empty() {
        return Err(Error::invalid("cannot build vocabularies from no examples"));
    }
    let mut words: BTreeMap<&str, ()> = BTreeMap::new();
    let mut answers: BTreeMap<&str, usize> = BTreeMap::new();
    for e in examples {
        for t in &e.tokens {
            words.insert(t, ());
        }
        *answers.entry(e.label.as_str()).or_default() += 1;
    }
    words.remove(UNKNOWN_TOKEN);
    answers.remove(UNKNOWN_TOKEN);

    let mut by_freq: Vec<(&str, usize)> = answers.into_iter().collect();
    by_freq.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    by_freq.truncate(answer_cap);
    let mut kept: Vec<&str> = by_freq.into_iter().map(|(a, _)| a).collect();
    kept.sort_unstable();

    let q = Vocab::new(std::iter::once(UNKNOWN_TOKEN).chain(words.into_keys()))?;
    let a = Vocab::new(std::iter::once(UNKNOWN_TOKEN).chain(kept))?;
    Ok((q, a))
}

/// First two question words, e.g. "what color" or "how many".
pub fn question_type(tokens: &[String]) -> String {
    tokens.iter().take(2).cloned().collect::<Vec<_>>().join(" ")
}

/// An example ready for the model.
#[derive(Clone, Debug, PartialEq)]
pub struct VqaExample {
    pub image_id: String,
    pub tokens: QuestionTokens,
    pub answers: Vec<String>,
    pub label: usize,
    pub question_type: String,
}

impl VqaExample {
    pub fn encode(
        raw: &RawExample,
        questions: &Vocab,
        answers: &Vocab,
        max_len: usize,
    ) -> Result<Self> {
        let ids = raw.tokens.iter().map(|t| questions.encode(t)).collect();
        Ok(VqaExample {
            image_id: raw.image_id.clone(),
            tokens: QuestionTokens::new(ids, questions.len(), max_len)?,
            answers: raw.answers.clone(),
            label: answers.encode(&raw.label),
            question_type: question_type(&raw.tokens),
        })
    }
}

/// Everything a training or evaluation run reads from a dataset directory.
#[derive(Clone, Debug)]
pub struct DatasetBundle {
    pub dir: PathBuf,
    pub features: FeatureContainer,
    pub questions: Vocab,
    pub answers: Vocab,
    pub train: Vec<VqaExample>,
    pub test: Vec<VqaExample>,
}

pub const FEATURES_FILE: &str = "features.bin";
pub const TRAIN_FILE: &str = "train.txt";
pub const TEST_FILE: &str = "test.txt";
pub const QUESTION_VOCAB_FILE: &str = "questions.vocab";
pub const ANSWER_VOCAB_FILE: &str = "answers.vocab";
pub const TAXONOMY_FILE: &str = "taxonomy.tsv";

impl DatasetBundle {
    /// Loads a directory laid out as written by [`write_dataset_dir`]. Every
    /// example's image must be present in the feature container.
    pub fn load(dir: &Path, max_len: usize) -> Result<Self> {
        let features = load_features(&dir.join(FEATURES_FILE))?;
        let questions = Vocab::load(&dir.join(QUESTION_VOCAB_FILE))?;
        let answers = Vocab::load(&dir.join(ANSWER_VOCAB_FILE))?;
        let split = |name: &str| -> Result<Vec<VqaExample>> {
            let path = dir.join(name);
            if !path.exists() {
                return Ok(Vec::new());
            }
            let raw = load_examples(&path)?;
            raw.iter()
                .map(|r| {
                    if features.get(&r.image_id).is_none() {
                        return Err(Error::Validation(format!(
                            "{name}: image `{}` has no features",
                            r.image_id
                        )));
                    }
                    VqaExample::encode(r, &questions, &answers, max_len)
                })
                .collect()
        };
        let train = split(TRAIN_FILE)?;
        let test = split(TEST_FILE)?;
        Ok(DatasetBundle {
            dir: dir.to_path_buf(),
            features,
            questions,
            answers,
            train,
            test,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn raw(tokens: &str, label: &str) -> RawExample {
        RawExample {
            image_id: "img1".into(),
            tokens: tokens.split(' ').map(str::to_string).collect(),
            answers: vec![label.to_string(); 10],
            label: label.into(),
        }
    }

    #[test]
    fn line_round_trip() {
        let e = raw("what color is object3", "red");
        let line = e.to_line();
        assert_eq!(
            line,
            "img1 what color is object3\tred,red,red,red,red,red,red,red,red,red\tred"
        );
        assert_eq!(RawExample::parse_line(&line, 1).unwrap(), e);
    }

    #[test]
    fn malformed_lines() {
        assert!(matches!(
            RawExample::parse_line("img1 a b\tx,y\tx", 4),
            Err(Error::Parse { line: 4, .. })
        ));
        assert!(RawExample::parse_line("img1\ta,a,a,a,a,a,a,a,a,a\ta", 1).is_err());
        assert!(RawExample::parse_line("img1 q", 1).is_err());
    }

    #[test]
    fn vocab_layout_and_fallback() {
        let ex = [
            raw("what is the shape", "star"),
            raw("what color is object1", "blue"),
        ];
        let (q, a) = build_vocab(&ex, DEFAULT_ANSWER_CAP).unwrap();
        assert_eq!(q.tokens()[0], UNKNOWN_TOKEN);
        let rest = &q.tokens()[1..];
        assert!(rest.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(a.tokens(), &["<unk>", "blue", "star"]);
        assert_eq!(q.encode("zebra"), 0);
        let again = build_vocab(&ex, DEFAULT_ANSWER_CAP).unwrap();
        assert_eq!(again.0.to_text(), q.to_text());
    }

    #[test]
    fn answer_cap_keeps_most_frequent() {
        let ex = [
            raw("q", "b"),
            raw("q", "b"),
            raw("q", "a"),
            raw("q", "c"),
            raw("q", "c"),
        ];
        let (_, a) = build_vocab(&ex, 2).unwrap();
        assert_eq!(a.tokens(), &["<unk>", "b", "c"]);
        assert!(a.len() <= 3);
    }

    #[test]
    fn consensus_ties_are_lexicographic() {
        let answers: Vec<String> = ["dog", "cat", "dog", "cat", "bird"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        assert_eq!(consensus_label(&answers).as_deref(), Some("cat"));
        assert_eq!(consensus_label(&[]), None);
    }

    #[test]
    fn vocab_rejects_duplicates() {
        assert!(Vocab::new(["a", "b", "a"]).is_err());
        assert!(Vocab::new(Vec::<String>::new()).is_err());
    }
}
