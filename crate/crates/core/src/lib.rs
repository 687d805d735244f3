//! Low-dimensional visual attribute (LDVA) encoding.
//!
//! Images pass through a small convolutional feature extractor, `M` attention
//! maps pick out parts, each part feature is projected onto `K` learned
//! prototypes, and a task head (zero-shot compatibility, few-shot nearest
//! mean, or domain-adaptive classifier) consumes the resulting `M·K` code.
//!
//! The crate is `no_std` + `alloc`. File formats, configuration documents and
//! the command line live in the companion `ldva` crate.
#![cfg_attr(not(any(test, feature = "std")), no_std)]

extern crate alloc;

pub mod adam;
pub mod backbone;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod gradsuite;
pub mod graph;
pub mod heads;
pub mod model;
pub mod params;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use params::{Group, ParamSet};
pub use tensor::Tensor;
