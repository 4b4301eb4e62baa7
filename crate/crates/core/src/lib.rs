//! Hierarchical region context for semantic segmentation.
//!
//! A prior stream predicts per-pixel class affiliations; a context stream uses
//! them to run attention inside class regions ([`pcm`]) and between region
//! representatives ([`rcm`]). Everything runs on a small dense [`Tensor`] with
//! hand-written backward passes checked by [`gradcheck`].

pub mod checks;
pub mod conv;
pub mod cost;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod metrics;
pub mod objective;
pub mod pcm;
pub mod piam;
pub mod pipeline;
pub mod prior;
pub mod rcm;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::{DType, Tensor};
