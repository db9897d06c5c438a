//! Person re-identification heads built on a BNNeck: the Strong Baseline
//! (triplet loss on the backbone feature) and the Stronger Baseline (triplet
//! loss on the L2-normalized BN feature), with the training recipe, synthetic
//! data, retrieval evaluation and geometric diagnostics around them.

pub mod data;
pub mod diagnostics;
pub mod error;
pub mod eval;
pub mod layers;
pub mod losses;
pub mod numerics;
pub mod pipeline;
pub mod training;

pub use error::{Error, Result};
pub use numerics::{Mat, Rng};
