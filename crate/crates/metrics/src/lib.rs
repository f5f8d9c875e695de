//! Evaluation kernels: semantic change detection scores from a confusion
//! matrix, multiple-choice accuracy and CIDEr for open answers.

pub mod choice;
pub mod cider;
pub mod error;
pub mod report;
pub mod scd;

pub use choice::{choice_accuracy, AnswerFormat, ChoiceScores, QAEvalRecord};
pub use cider::{cider, CiderScore, Corpus};
pub use error::{MetricsError, Result};
pub use report::EvalReport;
pub use scd::{scd_confusion, scd_scores, ScdConfusion, ScdScores};
