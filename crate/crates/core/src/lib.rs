//! Image-conditioned masked language modeling and tag-prediction proxy tasks
//! on a desk-scale synthetic corpus.

pub mod caption;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod nn;
pub mod objectives;
pub mod optim;
pub mod registry;
pub mod text;
pub mod trainer;
pub mod vision;

pub use error::{Error, Result};
