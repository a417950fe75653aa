//! Content-dependent voice style modeling with a fixed-size stylebook.
//!
//! The crate covers the whole pipeline at desk scale: a synthetic feature
//! corpus with known content and speaker factors, k-means content units and a
//! Transformer content encoder, transposed dual attention that summarizes a
//! target speaker into a stylebook and retrieves per-frame style embeddings,
//! a score-based diffusion decoder with classifier-free guidance, a kNN
//! frame-matching baseline, and the training / conversion / evaluation
//! harness.

pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod content;
pub mod corpus;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod knn;
pub mod matrix_io;
pub mod memory;
pub mod model;
pub mod nn;
pub mod params;
pub mod probe;
pub mod stylebook;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use params::{ParamId, ParamStore};
pub use tape::{Tape, Var};
pub use tensor::Scalar;
