//! Evaluation report files: `<stem>.json` and `<stem>_confusion.csv`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::choice::{ChoiceScores, QAEvalRecord};
use crate::cider::CiderScore;
use crate::error::{MetricsError, Result};
use crate::scd::{ScdConfusion, ScdScores, CONVENTIONS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassIou {
    pub class: usize,
    pub name: String,
    pub iou: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub label: String,
    pub settings: serde_json::Value,
    pub scd: ScdScores,
    pub per_class: Vec<ClassIou>,
    pub confusion: ScdConfusion,
    pub choice: Option<ChoiceScores>,
    pub cider: Option<CiderScore>,
    pub conventions: Vec<String>,
    pub records: Vec<QAEvalRecord>,
}

impl EvalReport {
    pub fn new(
        label: &str,
        settings: serde_json::Value,
        confusion: ScdConfusion,
        scd: ScdScores,
        class_names: &[&str],
    ) -> EvalReport {
        let per_class = scd
            .per_class_iou
            .iter()
            .enumerate()
            .map(|(i, &iou)| ClassIou {
                class: i,
                name: class_names.get(i).map_or_else(|| format!("class {i}"), |s| s.to_string()),
                iou,
            })
            .collect();
        EvalReport {
            label: label.to_string(),
            settings,
            scd,
            per_class,
            confusion,
            choice: None,
            cider: None,
            conventions: CONVENTIONS.iter().map(|s| s.to_string()).collect(),
            records: Vec::new(),
        }
    }

    /// Writes both files and returns their paths.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<(PathBuf, PathBuf)> {
        let json = dir.join(format!("{stem}.json"));
        let csv = dir.join(format!("{stem}_confusion.csv"));
        let body = serde_json::to_string_pretty(self).expect("report serializes") + "\n";
        fs::write(&json, body).map_err(|e| MetricsError::io(&json, e))?;
        fs::write(&csv, self.confusion.to_csv()).map_err(|e| MetricsError::io(&csv, e))?;
        Ok((json, csv))
    }

    pub fn read(path: &Path) -> Result<EvalReport> {
        let text = fs::read_to_string(path).map_err(|e| MetricsError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| MetricsError::Input(format!("{}: {e}", path.display())))
    }
}
