//! Measures the distance from samples to a classifier's decision boundary
//! along chosen orthonormal subspaces.

#[cfg(test)]
#[macro_use]
mod test_util;

pub mod attacks;
pub mod datasets;
pub mod error;
pub mod experiments;
pub mod io_util;
pub mod margins;
pub mod models;
pub mod seeding;
pub mod subspace;
pub mod theory;

pub use error::{Error, Result};
pub use attacks::{AttackConfig, ConstraintKind, ConstraintSet, PerturbationResult, Status};
pub use datasets::{LabeledDataset, Source, T1Params, T2Params, TransformOp};
pub use margins::{MarginRecord, MarginSummary, RecordStatus};
pub use models::{EpochStats, LrSchedule, Model, ModelKind, TrainConfig};
pub use subspace::{ImageShape, ImageTensor, OrthonormalMatrix, Subspace, SubspaceSequence};
pub use theory::{TheoryConfig, TheoryReport};
