//! Transductive inference for generalized few-shot segmentation.
//!
//! A frozen feature extractor and a trained base classifier are given. For
//! each task the classifier is augmented with novel-class prototypes and the
//! whole prototype matrix is optimized on the support images and the single
//! query image under a mutual-information objective with a distillation
//! term that keeps base-class predictions close to the original model.

pub mod baselines;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod inference;
pub mod io;
pub mod labels;
pub mod numeric;
pub mod objective;
pub mod prior;
pub mod taskgen;

pub use error::{DiamError, Result};
pub use evaluation::{ConfusionAccumulator, GfssScores};
pub use inference::{ClassifierState, GfssTask, InferenceTrace, SolverConfig, SupportImage};
pub use io::{read_task, write_task, RunReport, TaskBundle};
pub use labels::{LabelMask, OneHotMap, IGNORE};
pub use numeric::{ClassPartition, FeatureMap, LogitMap, ProbMap, Similarity};
pub use objective::{LossBreakdown, LossWeights};
pub use prior::{PriorKind, PriorPolicy, PriorVector};
