//! Masked-autoencoder sentence-embedding pre-training at desk scale.
//!
//! An encoder turns a lightly masked sentence into a single embedding; a
//! one-layer decoder has to rebuild the sentence from that embedding and a
//! heavily restricted view of the tokens. Training runs in two stages
//! (generic corpus, then domain data with optional in-batch contrastive
//! learning), and [`eval`] scores the resulting embeddings on retrieval and
//! semantic-similarity tasks against brute-force references.

pub mod corpus;
pub mod error;
pub mod eval;
pub mod fixture;
pub mod gradcheck;
pub mod masking;
pub mod model;
pub mod objectives;
pub mod optim;
pub mod parallel;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use parallel::Exec;
pub use tape::{Tape, Var};
pub use tensor::Tensor;
