//! Plain CIDEr (no length penalty, no clipping).
//!
//! Sentences are lower-cased and split on whitespace. For each n in 1..=4 a
//! sentence becomes a vector of n-gram counts weighted by
//! `idf(g) = ln(N) − ln(max(1, df(g)))`, where `N` is the number of reference
//! sets in the corpus and `df(g)` the number of sets containing `g`. A
//! sample scores `10 · mean_n mean_refs cos(pred_n, ref_n)`.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{MetricsError, Result};

pub const MAX_N: usize = 4;

type Grams = BTreeMap<Vec<String>, f64>;

pub fn tokens(s: &str) -> Vec<String> {
    s.split_whitespace().map(|t| t.to_lowercase()).collect()
}

/// n-gram counts of `toks` for n = 1..=MAX_N.
pub fn ngram_counts(toks: &[String]) -> Vec<Grams> {
    (1..=MAX_N)
        .map(|n| {
            let mut m = Grams::new();
            for w in toks.windows(n) {
                *m.entry(w.to_vec()).or_default() += 1.0;
            }
            m
        })
        .collect()
}

/// Document frequencies over reference sets.
#[derive(Clone, Debug)]
pub struct Corpus {
    docs: usize,
    df: BTreeMap<Vec<String>, usize>,
}

impl Corpus {
    pub fn from_references(references: &[Vec<String>]) -> Result<Corpus> {
        if references.is_empty() {
            return Err(MetricsError::Input("empty corpus".into()));
        }
        let mut df = BTreeMap::new();
        for refs in references {
            let mut seen = BTreeSet::new();
            for r in refs {
                for m in ngram_counts(&tokens(r)) {
                    seen.extend(m.into_keys());
                }
            }
            for g in seen {
                *df.entry(g).or_default() += 1;
            }
        }
        Ok(Corpus {
            docs: references.len(),
            df,
        })
    }

    pub fn idf(&self, gram: &[String]) -> f64 {
        let df = self.df.get(gram).copied().unwrap_or(0).max(1);
        (self.docs as f64).ln() - (df as f64).ln()
    }

    fn weigh(&self, counts: Vec<Grams>) -> Vec<Grams> {
        counts
            .into_iter()
            .map(|m| m.into_iter().map(|(g, c)| {
                let w = c * self.idf(&g);
                (g, w)
            }).collect())
            .collect()
    }
}

fn cosine(a: &Grams, b: &Grams) -> f64 {
    let dot: f64 = a.iter().filter_map(|(g, x)| b.get(g).map(|y| x * y)).sum();
    let na = a.values().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.values().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CiderScore {
    pub mean: f64,
    pub per_sample: Vec<f64>,
    /// Indices of empty predictions (scored 0).
    pub empty: Vec<usize>,
}

/// Score of one prediction against its references.
pub fn cider_one(prediction: &str, references: &[String], corpus: &Corpus) -> f64 {
    let p = corpus.weigh(ngram_counts(&tokens(prediction)));
    if references.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for r in references {
        let rv = corpus.weigh(ngram_counts(&tokens(r)));
        let sim: f64 = p.iter().zip(&rv).map(|(a, b)| cosine(a, b)).sum::<f64>() / MAX_N as f64;
        total += sim;
    }
    10.0 * total / references.len() as f64
}

pub fn cider(predictions: &[String], references: &[Vec<String>], corpus: &Corpus) -> Result<CiderScore> {
    if predictions.len() != references.len() {
        return Err(MetricsError::Input(format!(
            "{} predictions for {} reference sets",
            predictions.len(),
            references.len()
        )));
    }
    if predictions.is_empty() {
        return Err(MetricsError::Contract("no open answers to score".into()));
    }
    let mut empty = Vec::new();
    let per_sample: Vec<f64> = predictions
        .iter()
        .zip(references)
        .enumerate()
        .map(|(i, (p, r))| {
            if tokens(p).is_empty() {
                empty.push(i);
                0.0
            } else {
                cider_one(p, r, corpus)
            }
        })
        .collect();
    let mean = per_sample.iter().sum::<f64>() / per_sample.len() as f64;
    Ok(CiderScore {
        mean,
        per_sample,
        empty,
    })
}
