//! A small pre-norm transformer used as the denoiser `p_theta(X_0 | X_t)`.
//!
//! Tokens are embedded with a shared table that is tied to the output head,
//! a learned absolute-position table is added, and every attention layer
//! applies rotary encoding keyed by the absolute position id. Keys are cached
//! after rotation, so cached entries never need to be revisited.

mod cache;
mod config;
mod forward;
mod grad;
mod params;
mod rope;

pub use cache::KvCache;
pub use config::ModelConfig;
pub use params::{LayerParams, Model, Params};
pub use rope::RopeTable;
