//! Multi-grained neural model for sequential recommendation.
//!
//! A user's recent items are linked by a user-aware graph, convolved into
//! several levels of granularity, and each level is summarised by capsule
//! routing into a handful of interest vectors. Candidates are scored by
//! attention over those interests and the best level wins.

pub mod checkpoint;
pub mod cli;
pub mod dataio;
pub mod error;
pub mod evaluator;
pub mod gradsuite;
pub mod graphconv;
pub mod model;
pub mod numerics;
pub mod predictor;
pub mod seeding;
pub mod seqcaps;
pub mod trainer;

pub use error::{Error, Result};
