//! Dense matrices, a reverse-mode autodiff tape, and named parameter storage.
//!
//! Everything is generic over [`Scalar`] so the same model code runs in `f32`
//! for training and in `f64` for finite-difference gradient checks.

mod attention;
pub mod graph;
pub mod params;
mod scalar;
pub mod tensor;

pub use attention::{AttnSegment, LseItem};
pub use graph::{ConvGeom, Graph, Var};
pub use params::ParamStore;
pub use scalar::Scalar;
pub use tensor::{gemm, log_softmax, log_sum_exp, softmax, softmax_in_place, Tensor};
