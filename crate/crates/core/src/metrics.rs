//! Edit distance, ANLS, entity F1 and exact-match accuracy, plus the JSON report.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Result, TiltError};
use crate::objectives::NONE_ANSWER;

pub const ANLS_THRESHOLD: f64 = 0.5;

/// Trim, collapse internal whitespace, lowercase.
pub fn normalize(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

/// Unit-cost insert/delete/substitute distance over characters.
pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

fn normalized_distance(a: &str, b: &str) -> f64 {
    let longest = a.chars().count().max(b.chars().count());
    if longest == 0 {
        0.0
    } else {
        levenshtein(a, b) as f64 / longest as f64
    }
}

/// Best `1 − NL` over the golds, zeroed when `NL > tau`.
pub fn anls_with(pred: &str, golds: &[String], tau: f64) -> Result<f64> {
    if golds.is_empty() {
        return Err(TiltError::Contract("anls needs at least one gold answer".into()));
    }
    let p = normalize(pred);
    Ok(golds
        .iter()
        .map(|g| {
            let nl = normalized_distance(&p, &normalize(g));
            if nl <= tau {
                1.0 - nl
            } else {
                0.0
            }
        })
        .fold(0.0, f64::max))
}

pub fn anls(pred: &str, golds: &[String]) -> Result<f64> {
    anls_with(pred, golds, ANLS_THRESHOLD)
}

pub fn exact_match(pred: &str, gold: &str) -> bool {
    normalize(pred) == normalize(gold)
}

pub fn exact_match_accuracy(preds: &[String], golds: &[String]) -> Result<f64> {
    if preds.len() != golds.len() {
        return Err(TiltError::Contract(format!(
            "{} predictions for {} golds",
            preds.len(),
            golds.len()
        )));
    }
    if preds.is_empty() {
        return Ok(0.0);
    }
    let hits = preds.iter().zip(golds).filter(|(p, g)| exact_match(p, g)).count();
    Ok(hits as f64 / preds.len() as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct F1Report {
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl F1Report {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        F1Report {
            true_positives: tp,
            false_positives: fp,
            false_negatives: fn_,
            precision,
            recall,
            f1,
        }
    }
}

/// Outcome for one `(document, field)` pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FieldOutcome {
    TruePositive,
    /// Wrong value: counts against both precision and recall.
    Mismatch,
    Spurious,
    Missed,
    BothEmpty,
}

fn present(v: Option<&String>) -> Option<String> {
    v.map(|s| normalize(s)).filter(|s| !s.is_empty() && s != &normalize(NONE_ANSWER))
}

pub fn field_outcome(pred: Option<&String>, gold: Option<&String>) -> FieldOutcome {
    match (present(pred), present(gold)) {
        (Some(p), Some(g)) if p == g => FieldOutcome::TruePositive,
        (Some(_), Some(_)) => FieldOutcome::Mismatch,
        (Some(_), None) => FieldOutcome::Spurious,
        (None, Some(_)) => FieldOutcome::Missed,
        (None, None) => FieldOutcome::BothEmpty,
    }
}

fn tally(outcomes: impl IntoIterator<Item = FieldOutcome>) -> F1Report {
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for o in outcomes {
        match o {
            FieldOutcome::TruePositive => tp += 1,
            FieldOutcome::Mismatch => {
                fp += 1;
                fn_ += 1;
            }
            FieldOutcome::Spurious => fp += 1,
            FieldOutcome::Missed => fn_ += 1,
            FieldOutcome::BothEmpty => {}
        }
    }
    F1Report::from_counts(tp, fp, fn_)
}

/// Micro-averaged F1 over all `(document, field)` pairs. A `"None"` prediction abstains.
pub fn entity_f1(preds: &[BTreeMap<String, String>], golds: &[BTreeMap<String, String>]) -> Result<F1Report> {
    if preds.len() != golds.len() {
        return Err(TiltError::Contract(format!(
            "{} predicted documents for {} gold documents",
            preds.len(),
            golds.len()
        )));
    }
    let outcomes = preds.iter().zip(golds).flat_map(|(p, g)| {
        let fields: BTreeSet<&String> = p.keys().chain(g.keys()).collect();
        fields
            .into_iter()
            .map(|f| field_outcome(p.get(f), g.get(f)))
            .collect::<Vec<_>>()
    });
    Ok(tally(outcomes))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    #[default]
    Anls,
    F1,
    Accuracy,
}

impl std::str::FromStr for Metric {
    type Err = TiltError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "anls" => Ok(Metric::Anls),
            "f1" => Ok(Metric::F1),
            "accuracy" => Ok(Metric::Accuracy),
            other => Err(TiltError::Config(format!(
                "unknown metric `{other}` (expected anls, f1 or accuracy)"
            ))),
        }
    }
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Anls => "anls",
            Metric::F1 => "f1",
            Metric::Accuracy => "accuracy",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub id: String,
    pub prompt: String,
    pub prediction: String,
    pub golds: Vec<String>,
    /// ANLS or exact match in [0, 1]; for F1, 1 on a true positive.
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metric: Metric,
    pub value: f64,
    pub records: Vec<EvalRecord>,
}

impl EvalReport {
    /// Scores each record and aggregates: mean for ANLS/accuracy, micro F1 with
    /// `prompt` as the field name otherwise.
    pub fn build(metric: Metric, mut records: Vec<EvalRecord>) -> Result<Self> {
        for r in &mut records {
            r.score = match metric {
                Metric::Anls => anls(&r.prediction, &r.golds)?,
                Metric::Accuracy => {
                    let gold = r.golds.first().map(String::as_str).unwrap_or(NONE_ANSWER);
                    f64::from(u8::from(exact_match(&r.prediction, gold)))
                }
                Metric::F1 => {
                    let o = field_outcome(Some(&r.prediction), r.golds.first());
                    f64::from(u8::from(o == FieldOutcome::TruePositive))
                }
            };
        }
        let mut report = EvalReport {
            metric,
            value: 0.0,
            records,
        };
        report.value = report.aggregate();
        Ok(report)
    }

    /// Recomputes the headline value from the records alone.
    pub fn aggregate(&self) -> f64 {
        match self.metric {
            Metric::Anls | Metric::Accuracy => {
                if self.records.is_empty() {
                    0.0
                } else {
                    self.records.iter().map(|r| r.score).sum::<f64>() / self.records.len() as f64
                }
            }
            Metric::F1 => tally(self.records.iter().map(|r| field_outcome(Some(&r.prediction), r.golds.first()))).f1,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}
