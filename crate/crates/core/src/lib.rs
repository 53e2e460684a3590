//! Stable self-training for source-free unsupervised domain adaptation in
//! semantic segmentation.
//!
//! A source model is adapted to an unlabelled target domain by training on
//! its own pseudo labels. Two additions keep that loop from drifting:
//! weight consolidation (an L1 anchor to the source parameters) and the
//! entropy-increase adaptation loss. Double-threshold pseudo labels filter
//! out low-confidence pixels before training.

pub mod data;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod params;
pub mod pseudolabel;
pub mod trainer;

pub use error::{Error, Result};
pub use losses::{EntropyMode, LossBreakdown, LossConfig, ProbMap, PseudoLabelMap};
pub use params::{ParamTensor, ParameterSnapshot};
pub use pseudolabel::ThresholdConfig;
