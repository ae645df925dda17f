//! Flow-guided fine-tuning for generative next-item recommendation.
//!
//! Item titles are tokenized into a prefix tree whose leaves carry item-level
//! rewards (training-set frequencies). Flows propagate bottom-up, so every edge
//! gets an exact token-level process reward `F(child) / F(parent)`. A compact
//! autoregressive policy over tree edges is trained with cross-entropy plus a
//! subtrajectory-balance term against those process rewards, and the resulting
//! recommendations are scored for accuracy, popularity fairness and diversity.
//!
//! Module map:
//!
//! - [`catalog`]: interaction ingestion, k-core filtering, chronological split,
//!   tokenization, item frequencies, popularity groups.
//! - [`flownet`]: prefix tree with exact state flows and process rewards.
//! - [`policy`]: per-edge log-linear policy, optionally conditioned on history.
//! - [`prefs`]: first-order co-occurrence preference scorer.
//! - [`training`]: SFT, subtrajectory balance, combined loss, analytic
//!   gradients and the optimization loop.
//! - [`decode`]: exact best-first top-K and sampled recommendation lists.
//! - [`eval`]: HR/NDCG, DGU/MGU, word entropy, TTR, KL/JS.
//! - [`synth`]: seeded synthetic fixtures (Zipf catalogs, clustered logs).

pub mod catalog;
pub mod decode;
pub mod error;
pub mod eval;
pub mod flownet;
pub mod policy;
pub mod prefs;
pub mod synth;
pub mod training;

pub use error::{Error, Result};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The RNG used everywhere a seed is accepted. ChaCha is stable across
/// platforms and crate versions, which keeps seeded runs replayable.
pub type Rng = ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
