//! Evaluation: consensus accuracy over ten human answers, thresholded
//! Wu-Palmer similarity, multiple-choice ranking, and per-type reports.

mod taxonomy;

use std::collections::BTreeMap;
use std::fmt::Write as _;

pub use taxonomy::{wup_similarity, Taxonomy};

use crate::classifier::AnswerDistribution;
use crate::data::{FeatureContainer, Vocab, VqaExample, HUMAN_ANSWERS};
use crate::error::{Error, Result};
use crate::model::CvaModel;
use crate::train::samples;

/// Scores below the threshold are multiplied by this factor.
pub const WUPS_DOWNWEIGHT: f64 = 0.1;

/// Lowercase, trim, and collapse internal whitespace.
pub fn normalize_answer(s: &str) -> String {
    s.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

/// `min(#humans who gave the answer / 3, 1)`.
pub fn vqa_accuracy(predicted: &str, human_answers: &[String]) -> Result<f64> {
    if human_answers.len() != HUMAN_ANSWERS {
        return Err(Error::invalid(format!(
            "expected {HUMAN_ANSWERS} human answers, got {}",
            human_answers.len()
        )));
    }
    let p = normalize_answer(predicted);
    let matches = human_answers
        .iter()
        .filter(|h| normalize_answer(h) == p)
        .count();
    Ok((matches.min(3) as f64) / 3.0)
}

/// Mean thresholded Wu-Palmer similarity over prediction/truth pairs.
pub fn wups_score(
    predictions: &[String],
    truths: &[String],
    taxonomy: &Taxonomy,
    threshold: f64,
) -> Result<f64> {
    if predictions.len() != truths.len() {
        return Err(Error::invalid(format!(
            "{} predictions for {} ground truths",
            predictions.len(),
            truths.len()
        )));
    }
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::invalid(format!(
            "threshold must be in [0, 1], got {threshold}"
        )));
    }
    if predictions.is_empty() {
        return Err(Error::invalid("no pairs to score"));
    }
    let mut sum = 0.0;
    for (p, t) in predictions.iter().zip(truths) {
        let s = wup_similarity(p, t, taxonomy);
        sum += if s < threshold {
            WUPS_DOWNWEIGHT * s
        } else {
            s
        };
    }
    Ok(sum / predictions.len() as f64)
}

/// The candidate with the highest probability; the lowest index wins ties.
pub fn multiple_choice_pick(p: &AnswerDistribution, choices: &[usize]) -> Result<usize> {
    if choices.is_empty() {
        return Err(Error::invalid("no choices"));
    }
    if let Some(bad) = choices.iter().find(|&&c| c >= p.len()) {
        return Err(Error::invalid(format!(
            "choice {bad} outside {} answers",
            p.len()
        )));
    }
    let probs = p.probs();
    let mut best = choices[0];
    for &c in &choices[1..] {
        if probs[c] > probs[best] || (probs[c] == probs[best] && c < best) {
            best = c;
        }
    }
    Ok(best)
}

/// What a prediction is scored against.
#[derive(Clone, Debug, PartialEq)]
pub struct Reference {
    pub answers: Vec<String>,
    /// Training target, used for exact match.
    pub label: String,
    pub question_type: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TypeScore {
    pub name: String,
    pub count: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub count: usize,
    /// Mean consensus accuracy.
    pub accuracy: f64,
    /// Fraction of predictions equal to the training target.
    pub exact_match: f64,
    pub wups_0_9: Option<f64>,
    pub wups_0_0: Option<f64>,
    pub per_type: Vec<TypeScore>,
    /// Distinct answers (predicted or reference) missing from the taxonomy.
    pub unknown_terms: usize,
}

impl EvalReport {
    pub fn notices(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.wups_0_0.is_none() {
            out.push("no taxonomy given: WUPS omitted".to_string());
        } else if self.unknown_terms > 0 {
            out.push(format!(
                "{} answer terms missing from the taxonomy scored by exact string match",
                self.unknown_terms
            ));
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut rows: Vec<(String, String)> = vec![
            ("questions".into(), self.count.to_string()),
            ("accuracy".into(), format!("{:.4}", self.accuracy)),
            ("exact match".into(), format!("{:.4}", self.exact_match)),
        ];
        if let (Some(w9), Some(w0)) = (self.wups_0_9, self.wups_0_0) {
            rows.push(("WUPS@0.9".into(), format!("{w9:.4}")));
            rows.push(("WUPS@0.0".into(), format!("{w0:.4}")));
        }
        for t in &self.per_type {
            rows.push((
                format!("accuracy [{}] (n={})", t.name, t.count),
                format!("{:.4}", t.accuracy),
            ));
        }
        let width = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
        let mut s = String::new();
        for (k, v) in rows {
            writeln!(s, "{k:<width$}  {v}").unwrap();
        }
        for n in self.notices() {
            writeln!(s, "note: {n}").unwrap();
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,name,value\n");
        writeln!(s, "count,overall,{}", self.count).unwrap();
        writeln!(s, "accuracy,overall,{}", self.accuracy).unwrap();
        writeln!(s, "exact_match,overall,{}", self.exact_match).unwrap();
        if let (Some(w9), Some(w0)) = (self.wups_0_9, self.wups_0_0) {
            writeln!(s, "wups,0.9,{w9}").unwrap();
            writeln!(s, "wups,0.0,{w0}").unwrap();
        }
        for t in &self.per_type {
            writeln!(s, "accuracy,{},{}", csv_field(&t.name), t.accuracy).unwrap();
            writeln!(s, "count,{},{}", csv_field(&t.name), t.count).unwrap();
        }
        s
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Thresholded similarity to the closest of the label and the human answers,
/// so an answer any human gave scores 1.
pub fn best_wups(prediction: &str, r: &Reference, taxonomy: &Taxonomy, threshold: f64) -> f64 {
    std::iter::once(&r.label)
        .chain(&r.answers)
        .map(|t| {
            let s = wup_similarity(prediction, t, taxonomy);
            if s < threshold {
                WUPS_DOWNWEIGHT * s
            } else {
                s
            }
        })
        .fold(0.0, f64::max)
}

/// Aggregates every metric over already-made predictions.
pub fn score_predictions(
    predictions: &[String],
    refs: &[Reference],
    taxonomy: Option<&Taxonomy>,
) -> Result<EvalReport> {
    if refs.is_empty() {
        return Err(Error::invalid("nothing to evaluate"));
    }
    if predictions.len() != refs.len() {
        return Err(Error::invalid(format!(
            "{} predictions for {} references",
            predictions.len(),
            refs.len()
        )));
    }
    let mut acc_sum = 0.0;
    let mut exact = 0usize;
    let mut by_type: BTreeMap<&str, (usize, f64)> = BTreeMap::new();
    for (p, r) in predictions.iter().zip(refs) {
        let a = vqa_accuracy(p, &r.answers)?;
        acc_sum += a;
        if normalize_answer(p) == normalize_answer(&r.label) {
            exact += 1;
        }
        let e = by_type.entry(&r.question_type).or_default();
        e.0 += 1;
        e.1 += a;
    }
    let n = refs.len() as f64;
    let (wups_0_9, wups_0_0, unknown_terms) = match taxonomy {
        Some(tax) => {
            let mut unknown: Vec<String> = predictions
                .iter()
                .chain(
                    refs.iter()
                        .flat_map(|r| std::iter::once(&r.label).chain(&r.answers)),
                )
                .map(|t| normalize_answer(t))
                .filter(|t| !tax.contains(t))
                .collect();
            unknown.sort_unstable();
            unknown.dedup();
            let mean = |threshold: f64| {
                predictions
                    .iter()
                    .zip(refs)
                    .map(|(p, r)| best_wups(p, r, tax, threshold))
                    .sum::<f64>()
                    / n
            };
            (Some(mean(0.9)), Some(mean(0.0)), unknown.len())
        }
        None => (None, None, 0),
    };
    Ok(EvalReport {
        count: refs.len(),
        accuracy: acc_sum / n,
        exact_match: exact as f64 / n,
        wups_0_9,
        wups_0_0,
        per_type: by_type
            .into_iter()
            .map(|(name, (count, sum))| TypeScore {
                name: name.to_string(),
                count,
                accuracy: sum / count as f64,
            })
            .collect(),
        unknown_terms,
    })
}

/// Eval-mode predictions for every example, as answer strings. The
/// unknown-answer entry is never predicted.
pub fn predict_answers(
    model: &CvaModel,
    examples: &[VqaExample],
    features: &FeatureContainer,
    answers: &Vocab,
) -> Result<Vec<String>> {
    let data = samples(examples, features)?;
    // the unknown-answer slot is a placeholder, never a prediction
    let first =
        usize::from(answers.len() > 1 && answers.token(0) == Some(crate::data::UNKNOWN_TOKEN));
    let mut out = Vec::with_capacity(data.len());
    for chunk in data.chunks(256) {
        for dist in model.predict(chunk)? {
            let logits = &dist.logits()[first..];
            let mut id = 0;
            for (i, &x) in logits.iter().enumerate() {
                if x > logits[id] {
                    id = i;
                }
            }
            let id = id + first;
            let word = answers.token(id).ok_or_else(|| {
                Error::Validation(format!("answer id {id} outside the answer vocabulary"))
            })?;
            out.push(word.to_string());
        }
    }
    Ok(out)
}

pub fn references(examples: &[VqaExample], answers: &Vocab) -> Vec<Reference> {
    examples
        .iter()
        .map(|e| Reference {
            answers: e.answers.clone(),
            label: answers
                .token(e.label)
                .unwrap_or(crate::data::UNKNOWN_TOKEN)
                .to_string(),
            question_type: e.question_type.clone(),
        })
        .collect()
}

/// Runs the model in eval mode over `examples` and scores the predictions.
pub fn evaluate(
    model: &CvaModel,
    examples: &[VqaExample],
    features: &FeatureContainer,
    answers: &Vocab,
    taxonomy: Option<&Taxonomy>,
) -> Result<EvalReport> {
    if examples.is_empty() {
        return Err(Error::invalid("evaluation set is empty"));
    }
    let predictions = predict_answers(model, examples, features, answers)?;
    score_predictions(&predictions, &references(examples, answers), taxonomy)
}
