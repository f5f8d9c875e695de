//! Accuracy on single- and multiple-choice answers.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{MetricsError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AnswerFormat {
    SingleChoice,
    MultiChoice,
    Open,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QAEvalRecord {
    pub id: String,
    pub task: String,
    pub format: AnswerFormat,
    pub prediction: String,
    pub references: Vec<String>,
    /// Filled in by the scorer: 0/1 for choices, per-sample CIDEr for open answers.
    #[serde(default)]
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChoiceScores {
    /// `None` when there are no records of that format.
    pub single: Option<f64>,
    pub multi: Option<f64>,
    pub n_single: usize,
    pub n_multi: usize,
    /// Ids of predictions that did not parse as option letters.
    pub unparseable: Vec<String>,
}

/// Option letters in `s` ("b", "A , c", "a,b"), or `None` when anything
/// else is present.
pub fn parse_letters(s: &str) -> Option<BTreeSet<char>> {
    let mut out = BTreeSet::new();
    for tok in s.split(|c: char| c == ',' || c.is_whitespace()).filter(|t| !t.is_empty()) {
        let mut chars = tok.chars();
        match (chars.next(), chars.next()) {
            (Some(c), None) if c.is_ascii_alphabetic() => {
                out.insert(c.to_ascii_lowercase());
            }
            _ => return None,
        }
    }
    if out.is_empty() {
        None
    } else {
        Some(out)
    }
}

/// Exact option (set) match rates; sets `score` on every choice record.
pub fn choice_accuracy(records: &mut [QAEvalRecord]) -> Result<ChoiceScores> {
    let mut out = ChoiceScores {
        single: None,
        multi: None,
        n_single: 0,
        n_multi: 0,
        unparseable: Vec::new(),
    };
    let (mut hit_single, mut hit_multi) = (0usize, 0usize);
    for r in records.iter_mut() {
        if r.format == AnswerFormat::Open {
            continue;
        }
        let reference = r
            .references
            .first()
            .and_then(|s| parse_letters(s))
            .ok_or_else(|| MetricsError::Input(format!("{}: reference is not an option list", r.id)))?;
        let pred = parse_letters(&r.prediction);
        if pred.is_none() {
            out.unparseable.push(r.id.clone());
        }
        let ok = pred.as_ref() == Some(&reference);
        r.score = if ok { 1.0 } else { 0.0 };
        if r.format == AnswerFormat::SingleChoice {
            out.n_single += 1;
            hit_single += ok as usize;
        } else {
            out.n_multi += 1;
            hit_multi += ok as usize;
        }
    }
    if out.n_single + out.n_multi == 0 {
        return Err(MetricsError::Contract("no choice records to score".into()));
    }
    if out.n_single > 0 {
        out.single = Some(hit_single as f64 / out.n_single as f64);
    }
    if out.n_multi > 0 {
        out.multi = Some(hit_multi as f64 / out.n_multi as f64);
    }
    Ok(out)
}
