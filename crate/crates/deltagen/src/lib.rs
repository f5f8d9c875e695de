//! Synthetic multi-temporal scenes and the change QA curation pipeline.

pub mod dataset;
pub mod error;
pub mod external;
pub mod grid;
pub mod qa;
pub mod scene;
pub mod transitions;
pub mod trend;

pub use error::{GenError, Result};
