pub mod augment;
pub mod boundary_gt;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod oracle;
pub mod tensor;
pub mod trainer;

pub use config::ExperimentConfig;
pub use error::{Error, Result};
pub use tensor::{BatchNormState, ConvSpec, Graph, Mode, Scalar, Tensor, Var};
