pub mod alignment;
pub mod checkpoint;
pub mod critic;
pub mod dataset;
pub mod envs2d;
pub mod error;
pub mod field;
pub mod metrics;
pub mod oracle;
pub mod optim;
pub mod pretrain;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod tape;

pub use error::{Error, Result};
pub use field::{FieldConfig, FieldEvaluation, ScalarField};
pub use schedule::DiffusionSchedule;
