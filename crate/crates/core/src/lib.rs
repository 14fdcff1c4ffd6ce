pub mod ablation;
pub mod autograd;
pub mod batch;
pub mod checkpoint;
pub mod combination;
pub mod data;
pub mod destruction;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod optim;
pub mod protocol;
pub mod relation;
pub mod seed;
pub mod tensor;
pub mod train;

pub use error::{DcnError, Result};
pub use tensor::{DType, Scalar, Tensor};
