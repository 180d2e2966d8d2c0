//! Fine-tuning a small autoregressive policy to answer from a grounding
//! knowledge text, with a reward that blends accuracy against a reference and
//! faithfulness to the knowledge.
//!
//! The crate is organized by pipeline stage:
//!
//! - [`corpus`]: records, vocabulary, state encoding, synthetic tasks
//! - [`metrics`]: BLEU, ROUGE-L, embedding F1, token F1 and corpus reports
//! - [`reward`]: blended terminal reward, KL shaping, discriminator baseline
//! - [`calibrate`]: choosing the blend coefficient from pairwise judgments
//! - [`model`]: the recurrent policy/value network, decoding, checkpoints
//! - [`train`]: supervised fine-tuning and PPO

pub mod calibrate;
pub mod corpus;
pub mod error;
pub mod io;
pub mod metrics;
pub mod model;
pub mod par;
pub mod reward;
pub mod train;

pub use error::{Error, Result};
