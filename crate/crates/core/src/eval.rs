//! Exact-match evaluation of predictions.
//!
//! Answers are compared after SQuAD-style normalization: lowercase, drop
//! punctuation (ASCII plus every Unicode `P*` category), drop the articles
//! "a", "an", "the" as whole words, collapse whitespace.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use unicode_general_category::{get_general_category, GeneralCategory};

use crate::types::{CategoryMap, KnowledgeCategory, QAPair, Split};

/// Default abstention string for IDK-relabeled variants.
pub const ABSTAIN: &str = "I don't know";

fn is_punctuation(c: char) -> bool {
    c.is_ascii_punctuation()
        || matches!(
            get_general_category(c),
            GeneralCategory::ConnectorPunctuation
                | GeneralCategory::DashPunctuation
                | GeneralCategory::OpenPunctuation
                | GeneralCategory::ClosePunctuation
                | GeneralCategory::InitialPunctuation
                | GeneralCategory::FinalPunctuation
                | GeneralCategory::OtherPunctuation
        )
}

pub fn normalize_answer(s: &str) -> String {
    let lowered = s.to_lowercase();
    let stripped: String = lowered.chars().filter(|&c| !is_punctuation(c)).collect();
    stripped
        .split_whitespace()
        .filter(|w| !matches!(*w, "a" | "an" | "the"))
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn exact_match<S: AsRef<str>>(predicted: &str, gold_answers: &[S]) -> bool {
    let p = normalize_answer(predicted);
    gold_answers.iter().any(|g| normalize_answer(g.as_ref()) == p)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub example_id: String,
    pub predicted: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
    #[serde(default)]
    pub source_tag: String,
}

impl PredictionRecord {
    pub fn new(example_id: impl Into<String>, predicted: impl Into<String>) -> Self {
        Self {
            example_id: example_id.into(),
            predicted: predicted.into(),
            split: None,
            source_tag: String::new(),
        }
    }
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no prediction for {} example(s): {}", .0.len(), preview(.0))]
    MissingPrediction(Vec<String>),
    #[error("duplicate prediction for example {0}")]
    DuplicatePrediction(String),
    #[error("prediction for unknown example {0}")]
    UnknownExample(String),
    #[error("example {0} has no knowledge category")]
    MissingAnnotation(String),
    #[error("nothing to evaluate")]
    Empty,
    #[error("{path}:{line}: {message}")]
    Parse { path: String, line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn preview(ids: &[String]) -> String {
    let mut s = ids.iter().take(5).cloned().collect::<Vec<_>>().join(", ");
    if ids.len() > 5 {
        s.push_str(", ...");
    }
    s
}

/// Correct / total counts. Accuracies are always derived from the counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tally {
    pub n: usize,
    pub correct: usize,
}

impl Tally {
    pub fn add(&mut self, correct: bool) {
        self.n += 1;
        self.correct += usize::from(correct);
    }

    /// 0 for an empty tally.
    pub fn accuracy(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            self.correct as f64 / self.n as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryScore {
    pub n: usize,
    pub correct: usize,
    pub accuracy: f64,
}

impl From<Tally> for CategoryScore {
    fn from(t: Tally) -> Self {
        Self { n: t.n, correct: t.correct, accuracy: t.accuracy() }
    }
}

/// Outcome for one evaluated example.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Judgement {
    pub example_id: String,
    pub relation_id: String,
    pub correct: bool,
    pub answered: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_total: usize,
    pub n_correct: usize,
    pub overall_accuracy: f64,
    pub per_category: BTreeMap<KnowledgeCategory, CategoryScore>,
    pub per_relation: BTreeMap<String, CategoryScore>,
    pub n_answered: usize,
    pub answered_fraction: f64,
    /// 0 when nothing was answered.
    pub accuracy_on_answered: f64,
}

/// Judges each prediction against the gold answers of `pairs`.
///
/// Every pair needs exactly one prediction, and every prediction must name
/// one of the pairs. Output order follows `pairs`.
pub fn judge(
    predictions: &[PredictionRecord],
    pairs: &[QAPair],
    abstain: Option<&str>,
) -> Result<Vec<Judgement>, EvalError> {
    let index: HashMap<&str, &QAPair> = pairs.iter().map(|p| (p.id.as_str(), p)).collect();
    let mut by_id: HashMap<&str, &str> = HashMap::with_capacity(predictions.len());
    for rec in predictions {
        if !index.contains_key(rec.example_id.as_str()) {
            return Err(EvalError::UnknownExample(rec.example_id.clone()));
        }
        if by_id.insert(&rec.example_id, &rec.predicted).is_some() {
            return Err(EvalError::DuplicatePrediction(rec.example_id.clone()));
        }
    }
    let missing: Vec<String> = pairs
        .iter()
        .filter(|p| !by_id.contains_key(p.id.as_str()))
        .map(|p| p.id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(EvalError::MissingPrediction(missing));
    }
    let abstain_norm = abstain.map(normalize_answer);
    Ok(pairs
        .iter()
        .map(|p| {
            let predicted = by_id[p.id.as_str()];
            let answered = match &abstain_norm {
                Some(a) => normalize_answer(predicted) != *a,
                None => true,
            };
            Judgement {
                example_id: p.id.clone(),
                relation_id: p.relation_id.clone(),
                correct: exact_match(predicted, &p.gold_answers),
                answered,
            }
        })
        .collect())
}

/// EM accuracy with per-category and per-relation breakdowns.
///
/// When `categories` is given every pair must have an entry. When `abstain`
/// is given, predictions equal to it after normalization count as
/// unanswered.
pub fn evaluate(
    predictions: &[PredictionRecord],
    pairs: &[QAPair],
    categories: Option<&CategoryMap>,
    abstain: Option<&str>,
) -> Result<EvalReport, EvalError> {
    if pairs.is_empty() {
        return Err(EvalError::Empty);
    }
    let judgements = judge(predictions, pairs, abstain)?;
    let mut overall = Tally::default();
    let mut answered = Tally::default();
    let mut per_category: BTreeMap<KnowledgeCategory, Tally> = BTreeMap::new();
    let mut per_relation: BTreeMap<String, Tally> = BTreeMap::new();
    for j in &judgements {
        overall.add(j.correct);
        if j.answered {
            answered.add(j.correct);
        }
        per_relation.entry(j.relation_id.clone()).or_default().add(j.correct);
        if let Some(cats) = categories {
            let cat = cats
                .get(&j.example_id)
                .ok_or_else(|| EvalError::MissingAnnotation(j.example_id.clone()))?;
            per_category.entry(*cat).or_default().add(j.correct);
        }
    }
    Ok(EvalReport {
        n_total: overall.n,
        n_correct: overall.correct,
        overall_accuracy: overall.accuracy(),
        per_category: per_category.into_iter().map(|(k, v)| (k, v.into())).collect(),
        per_relation: per_relation.into_iter().map(|(k, v)| (k, v.into())).collect(),
        n_answered: answered.n,
        answered_fraction: answered.n as f64 / overall.n as f64,
        accuracy_on_answered: answered.accuracy(),
    })
}

impl EvalReport {
    /// Aligned-column plain-text rendering.
    pub fn to_table(&self) -> String {
        let mut rows: Vec<[String; 4]> = vec![[
            "group".into(),
            "n".into(),
            "correct".into(),
            "accuracy".into(),
        ]];
        let fmt_row = |name: String, s: &CategoryScore| {
            [name, s.n.to_string(), s.correct.to_string(), format!("{:.4}", s.accuracy)]
        };
        rows.push(fmt_row(
            "ALL".into(),
            &CategoryScore { n: self.n_total, correct: self.n_correct, accuracy: self.overall_accuracy },
        ));
        for (c, s) in &self.per_category {
            rows.push(fmt_row(format!("category:{c}"), s));
        }
        for (r, s) in &self.per_relation {
            rows.push(fmt_row(format!("relation:{r}"), s));
        }
        let widths: Vec<usize> = (0..4)
            .map(|i| rows.iter().map(|r| r[i].chars().count()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for row in &rows {
            let _ = writeln!(
                out,
                "{:<w0$}  {:>w1$}  {:>w2$}  {:>w3$}",
                row[0],
                row[1],
                row[2],
                row[3],
                w0 = widths[0],
                w1 = widths[1],
                w2 = widths[2],
                w3 = widths[3]
            );
        }
        let _ = writeln!(
            out,
            "answered: {}/{} ({:.4}), accuracy on answered: {:.4}",
            self.n_answered, self.n_total, self.answered_fraction, self.accuracy_on_answered
        );
        out
    }
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRecord>, EvalError> {
    let file = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| EvalError::Parse {
            path: path.display().to_string(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_predictions(path: &Path, records: &[PredictionRecord]) -> std::io::Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(id: &str, rel: &str, gold: &str) -> QAPair {
        QAPair {
            id: id.into(),
            relation_id: rel.into(),
            subject: "s".into(),
            question: format!("question {id}?"),
            gold_answers: vec![gold.into()],
            split: Split::Test,
        }
    }

    #[test]
    fn normalization_examples() {
        assert_eq!(normalize_answer("France"), "france");
        assert_eq!(normalize_answer("The Hague."), "hague");
        assert_eq!(normalize_answer("  New   York "), "new york");
        assert_eq!(normalize_answer("«Zürich»"), "zürich");
        assert_eq!(normalize_answer("An apple a day"), "apple day");
        assert_eq!(normalize_answer("theory"), "theory");
    }

    #[test]
    fn em_examples() {
        assert!(exact_match("france", &["France"]));
        assert!(!exact_match("Paris", &["France"]));
        assert!(exact_match("the geneticist", &["geneticist"]));
    }

    #[test]
    fn all_correct() {
        let pairs = vec![pair("1", "P1", "a"), pair("2", "P2", "b")];
        let preds = vec![PredictionRecord::new("1", "a"), PredictionRecord::new("2", "B")];
        let cats: CategoryMap = [("1".into(), KnowledgeCategory::HighlyKnown), ("2".into(), KnowledgeCategory::Unknown)]
            .into_iter()
            .collect();
        let r = evaluate(&preds, &pairs, Some(&cats), None).unwrap();
        assert_eq!(r.overall_accuracy, 1.0);
        assert!(r.per_category.values().all(|s| s.accuracy == 1.0));
        assert_eq!(r.answered_fraction, 1.0);
        assert_eq!(r.accuracy_on_answered, r.overall_accuracy);
        assert!(r.to_table().contains("category:HighlyKnown"));
    }

    #[test]
    fn abstentions() {
        let pairs: Vec<_> = (0..10).map(|i| pair(&i.to_string(), "P1", "gold")).collect();
        let preds: Vec<_> = (0..10)
            .map(|i| {
                let text = match i {
                    0..=3 => "I don't know",
                    4..=6 => "Gold",
                    _ => "wrong",
                };
                PredictionRecord::new(i.to_string(), text)
            })
            .collect();
        let r = evaluate(&preds, &pairs, None, Some(ABSTAIN)).unwrap();
        assert_eq!(r.answered_fraction, 0.6);
        assert_eq!(r.accuracy_on_answered, 0.5);
        assert_eq!(r.overall_accuracy, 0.3);
    }

    #[test]
    fn abstention_is_full_string_match() {
        let pairs = vec![pair("1", "P1", "x")];
        let preds = vec![PredictionRecord::new("1", "Well, I don't know really")];
        let r = evaluate(&preds, &pairs, None, Some(ABSTAIN)).unwrap();
        assert_eq!(r.answered_fraction, 1.0);
    }

    #[test]
    fn error_paths() {
        let pairs = vec![pair("1", "P1", "x"), pair("2", "P1", "y")];
        let only_one = vec![PredictionRecord::new("1", "x")];
        assert!(matches!(evaluate(&only_one, &pairs, None, None), Err(EvalError::MissingPrediction(ids)) if ids == ["2"]));
        let dup = vec![PredictionRecord::new("1", "x"), PredictionRecord::new("1", "x"), PredictionRecord::new("2", "y")];
        assert!(matches!(evaluate(&dup, &pairs, None, None), Err(EvalError::DuplicatePrediction(_))));
        let stray = vec![PredictionRecord::new("9", "x")];
        assert!(matches!(evaluate(&stray, &pairs, None, None), Err(EvalError::UnknownExample(_))));
        let preds = vec![PredictionRecord::new("1", "x"), PredictionRecord::new("2", "y")];
        let cats = CategoryMap::new();
        assert!(matches!(evaluate(&preds, &pairs, Some(&cats), None), Err(EvalError::MissingAnnotation(_))));
    }
}
