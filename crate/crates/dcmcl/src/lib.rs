//! Collaborative learning for machine translation at desk scale: one shared
//! encoder feeding an autoregressive and a non-autoregressive decoder,
//! jointly trained with multi-task NLL, token-level mutual KL, a
//! sequence-level contrastive loss, and an optional hybrid teacher.
//!
//! Everything runs on a small `f64` reverse-mode tape ([`tensor`]) so that
//! every loss and every model forward is checkable against central finite
//! differences.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod decoding;
pub mod error;
pub mod losses;
pub mod masking;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod trainer;

pub use error::{DcmclError, Result};
pub use tensor::{grad_check, Tape, Tensor, VarId};

/// RNG used throughout; fixed stream cipher keeps runs reproducible across
/// platforms.
pub type Rng = rand_chacha::ChaCha8Rng;
