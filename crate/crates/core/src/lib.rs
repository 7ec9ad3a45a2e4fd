//! Meal recommendation toolkit: dataset construction from user-recipe
//! reviews, the category-constrained meal recommender with BPR training, and
//! leave-one-out top-K evaluation.

pub mod autograd;
pub mod builder;
pub mod ccmr;
pub mod corpus;
pub mod error;
mod kcore;
pub mod rng;
pub mod synthgen;
pub mod trainer;
pub mod evaluator;

pub use error::{Error, Result};
