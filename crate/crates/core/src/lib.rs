//! Sparse parameterization of masked discrete diffusion models.
//!
//! A partially masked sequence is represented by its clean tokens, their
//! positions and the total length. At every sampling step the model only sees
//! the tokens that must be decoded, the tokens decoded on the previous step
//! (which are then appended to a KV cache) and a fixed set of register tokens
//! standing in for everything that was truncated. Training uses a
//! step-causal attention mask that reproduces exactly the attention pattern
//! of cached, truncated inference.
//!
//! Modules:
//!
//! - [`diffusion`]: forward masking, reverse posterior, schedule and loss.
//! - [`sparse`]: sparse sequences, register placement, block assignments.
//! - [`masks`]: inference and step-causal attention masks.
//! - [`backbone`]: a small transformer with a position-keyed KV cache.
//! - [`samplers`]: pre-generated order, semi-autoregressive and dense reference samplers.
//! - [`trainer`]: step-causal training on a synthetic pattern grammar.
//! - [`harness`]: verification suites and the token/latency ablation bench.

pub mod backbone;
pub mod diffusion;
pub mod error;
pub mod harness;
pub mod masks;
pub mod samplers;
pub mod scalar;
pub mod sparse;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Token id. Ordinary ids are `0..vocab.size`, followed by the mask and register ids.
pub type TokenId = u32;
