//! Counterfactual image explanations by deep model inversion: strongly
//! regularized image priors optimized against semantics-preservation,
//! manifold-consistency and functional-consistency objectives.

pub mod classifier;
pub mod datasets;
pub mod engine;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod objectives;
pub mod priors;
pub mod seed;

pub use classifier::{ClassifierModel, TrainConfig, TrainMode, TrainedBundle};
pub use datasets::{CorruptionKind, CorruptionSpec, LabeledImageSet, Split};
pub use engine::{batch_generate, generate_cf, warm_start_prior, CFResult, RunSettings, StagePolicy, TargetRule};
pub use error::{DiscError, Result};
pub use metrics::{MetricReport, MeanStd};
pub use objectives::{ConsistencyMode, ObjectiveSpec, SemanticsMode, TargetSpec};
pub use priors::{GeneratorState, PriorConfig, PriorKind};
