//! Semantic change detection scores.
//!
//! With `q` the L×L confusion matrix (rows ground truth, columns prediction,
//! index 0 unchanged) and `N` its total:
//!
//! - `oa = Σ q[i][i] / N`
//! - binary change/no-change counts `tn = q[0][0]`, `fp = Σ_{j≥1} q[0][j]`,
//!   `fn = Σ_{i≥1} q[i][0]`, `tp = Σ_{i,j≥1} q[i][j]`;
//!   `iou_nc = tn / (tn + fp + fn)`, `iou_c = tp / (tp + fp + fn)`,
//!   `miou = (iou_nc + iou_c) / 2`
//! - `q0` is `q` with `q[0][0] = 0`; on `q0`, `po = trace / S`,
//!   `pe = Σ rowᵢ·colᵢ / S²`, `κ = (po − pe) / (1 − pe)`,
//!   `sek = κ · e^(iou_c − 1)`
//! - `hit = Σ_{i≥1} q[i][i]`, `precision = hit / Σ_{j≥1} col_j`,
//!   `recall = hit / Σ_{i≥1} row_i`, `f_scd` their harmonic mean
//! - `per_class_iou[i] = q[i][i] / (rowᵢ + colᵢ − q[i][i])`
//!
//! Any ratio with a zero denominator is 0, κ is 0 when `S = 0` or `pe = 1`.

use serde::{Deserialize, Serialize};

use crate::error::{MetricsError, Result};

/// Conventions applied for degenerate denominators, echoed in reports.
pub const CONVENTIONS: [&str; 3] = [
    "ratio with zero denominator is 0 (iou, precision, recall, f_scd)",
    "kappa is 0 when the matrix without q[0][0] is empty or pe = 1",
    "rows are ground truth, columns prediction, class 0 is unchanged",
];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScdConfusion {
    pub classes: usize,
    pub q: Vec<Vec<u64>>,
}

impl ScdConfusion {
    pub fn new(classes: usize) -> ScdConfusion {
        ScdConfusion {
            classes,
            q: vec![vec![0; classes]; classes],
        }
    }

    /// Adds one prediction/ground-truth label grid pair.
    pub fn add(&mut self, pred: &[u8], gt: &[u8]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(MetricsError::Input(format!(
                "shape mismatch: {} predicted vs {} ground-truth pixels",
                pred.len(),
                gt.len()
            )));
        }
        let l = self.classes;
        if let Some(&bad) = pred.iter().chain(gt).find(|&&v| v as usize >= l) {
            return Err(MetricsError::Input(format!("label {bad} out of range for {l} classes")));
        }
        for (&p, &g) in pred.iter().zip(gt) {
            self.q[g as usize][p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ScdConfusion) -> Result<()> {
        if other.classes != self.classes {
            return Err(MetricsError::Input("class count mismatch".into()));
        }
        for (a, b) in self.q.iter_mut().zip(&other.q) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.q.iter().flatten().sum()
    }

    pub fn row(&self, i: usize) -> u64 {
        self.q[i].iter().sum()
    }

    pub fn col(&self, j: usize) -> u64 {
        self.q.iter().map(|r| r[j]).sum()
    }

    /// Rows of `gt,pred0,pred1,...` with a header line.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("gt");
        for j in 0..self.classes {
            s.push_str(&format!(",pred{j}"));
        }
        s.push('\n');
        for (i, r) in self.q.iter().enumerate() {
            s.push_str(&i.to_string());
            for v in r {
                s.push_str(&format!(",{v}"));
            }
            s.push('\n');
        }
        s
    }
}

/// Confusion matrix over several images.
pub fn scd_confusion(preds: &[Vec<u8>], gts: &[Vec<u8>], classes: usize) -> Result<ScdConfusion> {
    if preds.len() != gts.len() {
        return Err(MetricsError::Input(format!(
            "{} predictions for {} ground-truth maps",
            preds.len(),
            gts.len()
        )));
    }
    let mut c = ScdConfusion::new(classes);
    for (p, g) in preds.iter().zip(gts) {
        c.add(p, g)?;
    }
    Ok(c)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScdScores {
    pub oa: f64,
    pub miou: f64,
    pub iou_unchanged: f64,
    pub iou_change: f64,
    pub kappa: f64,
    pub sek: f64,
    pub precision: f64,
    pub recall: f64,
    pub f_scd: f64,
    pub per_class_iou: Vec<f64>,
}

fn ratio(a: f64, b: f64) -> f64 {
    if b == 0.0 {
        0.0
    } else {
        a / b
    }
}

pub fn scd_scores(c: &ScdConfusion) -> Result<ScdScores> {
    let l = c.classes;
    if l < 2 {
        return Err(MetricsError::Input(format!("need at least 2 classes, got {l}")));
    }
    let total = c.total() as f64;
    if total == 0.0 {
        return Err(MetricsError::Contract("empty confusion matrix".into()));
    }
    let q = |i: usize, j: usize| c.q[i][j] as f64;
    let rows: Vec<f64> = (0..l).map(|i| c.row(i) as f64).collect();
    let cols: Vec<f64> = (0..l).map(|j| c.col(j) as f64).collect();
    let trace: f64 = (0..l).map(|i| q(i, i)).sum();

    let tn = q(0, 0);
    let fp = rows[0] - tn;
    let fn_ = cols[0] - tn;
    let tp = total - tn - fp - fn_;
    let iou_unchanged = ratio(tn, tn + fp + fn_);
    let iou_change = ratio(tp, tp + fp + fn_);

    let s = total - tn;
    let kappa = if s == 0.0 {
        0.0
    } else {
        let po = (trace - tn) / s;
        let mut pe = (rows[0] - tn) * (cols[0] - tn);
        for i in 1..l {
            pe += rows[i] * cols[i];
        }
        pe /= s * s;
        if pe == 1.0 {
            0.0
        } else {
            (po - pe) / (1.0 - pe)
        }
    };
    let sek = kappa * (iou_change - 1.0).exp();

    let hit = trace - tn;
    let precision = ratio(hit, total - cols[0]);
    let recall = ratio(hit, total - rows[0]);
    let f_scd = ratio(2.0 * precision * recall, precision + recall);

    let per_class_iou = (0..l).map(|i| ratio(q(i, i), rows[i] + cols[i] - q(i, i))).collect();
    Ok(ScdScores {
        oa: trace / total,
        miou: (iou_unchanged + iou_change) / 2.0,
        iou_unchanged,
        iou_change,
        kappa,
        sek,
        precision,
        recall,
        f_scd,
        per_class_iou,
    })
}
