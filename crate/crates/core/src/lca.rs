//! Token-kind bookkeeping and the local causal attention mask.
//!
//! On top of the usual causal rule, a visual token may not attend to a
//! visual token of another phase. Every other kind keeps plain causal
//! attention, so later text still sees all phases.

use numcore::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{ModelError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenKind {
    Text,
    Visual,
    Change,
    Prompt,
    Seg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenEntry {
    pub kind: TokenKind,
    /// 1-based phase; only visual tokens carry one.
    pub phase: Option<usize>,
}

impl TokenEntry {
    pub fn visual(phase: usize) -> Self {
        TokenEntry {
            kind: TokenKind::Visual,
            phase: Some(phase),
        }
    }

    pub fn of(kind: TokenKind) -> Self {
        TokenEntry { kind, phase: None }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TokenSequence {
    pub entries: Vec<TokenEntry>,
}

impl TokenSequence {
    pub fn new() -> Self {
        TokenSequence::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn push(&mut self, e: TokenEntry) {
        self.entries.push(e);
    }

    pub fn extend_visual(&mut self, phases: &[usize]) {
        self.entries
            .extend(phases.iter().map(|&p| TokenEntry::visual(p)));
    }

    pub fn extend_kind(&mut self, kind: TokenKind, n: usize) {
        self.entries
            .extend(std::iter::repeat(TokenEntry::of(kind)).take(n));
    }

    pub fn validate(&self) -> Result<()> {
        for (i, e) in self.entries.iter().enumerate() {
            match (e.kind, e.phase) {
                (TokenKind::Visual, None) => {
                    return Err(ModelError::Contract(format!(
                        "visual token {i} has no phase"
                    )))
                }
                (TokenKind::Visual, Some(0)) => {
                    return Err(ModelError::Contract(format!("visual token {i} has phase 0")))
                }
                (k, Some(p)) if k != TokenKind::Visual => {
                    return Err(ModelError::Contract(format!(
                        "{k:?} token {i} carries phase {p}"
                    )))
                }
                _ => {}
            }
        }
        Ok(())
    }
}

/// Phase of every token of a `side x (phases * side)` grid flattened row-major.
pub fn interleave_flatten(side: usize, phases: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(side * side * phases);
    for _ in 0..side {
        for k in 1..=phases {
            out.extend(std::iter::repeat(k).take(side));
        }
    }
    out
}

/// Additive `n x n` mask with entries 0 or -inf. With `phase_aware` off this
/// is the plain causal mask.
pub fn build_lca_mask(seq: &TokenSequence, phase_aware: bool) -> Result<Tensor> {
    if seq.is_empty() {
        return Err(ModelError::Contract("empty token sequence".into()));
    }
    seq.validate()?;
    let n = seq.len();
    let mut data = vec![f64::NEG_INFINITY; n * n];
    for (i, ei) in seq.entries.iter().enumerate() {
        for (j, ej) in seq.entries[..=i].iter().enumerate() {
            let blocked = phase_aware
                && ei.kind == TokenKind::Visual
                && ej.kind == TokenKind::Visual
                && ei.phase != ej.phase;
            if !blocked {
                data[i * n + j] = 0.0;
            }
        }
    }
    Ok(Tensor::new(vec![n, n], data)?)
}
