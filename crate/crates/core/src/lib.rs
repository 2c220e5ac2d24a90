//! In-context symbol detection with shallow causal transformers.
//!
//! The crate contains everything needed to train and evaluate small
//! decoder-only models that detect QAM symbols over a Rayleigh
//! block-fading channel from a handful of pilot pairs:
//!
//! - [`tensor`]: a dense tensor core with tape-based reverse-mode autodiff.
//! - [`channel`]: constellations, fading tasks, coherence blocks and prompts.
//! - [`model`]: the decoder backbone, latent thought recursion and KV-cached inference.
//! - [`oracle`]: the closed-form conditional-mean (MMSE) detector.
//! - [`experiment`]: training, evaluation, checkpoints, metrics and the CLI.

pub mod channel;
pub mod error;
pub mod experiment;
pub mod model;
pub mod oracle;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
