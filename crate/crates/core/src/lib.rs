//! Open-set domain adaptation with semantic recovery.
//!
//! The pipeline operates on precomputed feature vectors:
//!
//! 1. [`separation`] splits the unlabeled target domain into seen and unseen
//!    candidates with source prototypes, clusters the unseen part and refines
//!    every pseudo label with K-means seeded at the prototypes.
//! 2. [`model`] holds the four small networks (embedding, attribute
//!    projector, open-set classifier and seen/unseen discriminator).
//! 3. [`objective`] evaluates the partial alignment, graph attribute
//!    propagation, attribute, classifier and binary losses on a mixed batch,
//!    together with exact parameter gradients.
//! 4. [`trainer`] runs mini-batch gradient descent with periodic pseudo-label
//!    refreshes.
//! 5. [`eval`] scores open-set recognition (OS, OS*, OS◇) and semantic
//!    recovery (S, U, H).

pub mod dataio;
pub mod error;
pub mod eval;
pub mod model;
pub mod numkernel;
pub mod objective;
pub mod separation;
pub mod trainer;

pub use error::{Error, Result};
pub use numkernel::{Matrix, Rng};
