//! Small-object segmentation with cross-stage axial attention and
//! multi-precision supervision, built on a self-contained autodiff tensor
//! core. Includes a synthetic small-object benchmark, training harness, and
//! brute-force reference checks for every numeric path.

pub mod ablation;
pub mod backbone;
pub mod checkpoint;
pub mod checks;
pub mod config;
pub mod csaa;
pub mod dataio;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod mps;
pub mod netpbm;
pub mod reference;
pub mod loss;
pub mod metrics;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use gradcheck::{finite_diff_check, GradCheckReport};
pub use scalar::Scalar;
pub use tensor::Tensor;
