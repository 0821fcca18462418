//! Guided spherical diffusion for multi-interest sequential recommendation.
//!
//! A guidance extractor turns a user's behavior sequence into `K` interest
//! vectors. A conditional denoiser, trained with geodesic random-walk noise on
//! the unit sphere, turns those interests into a single next-interest
//! embedding, which is then matched against the item pool by inner product.
//!
//! Module map:
//!
//! - [`numerics`]: fp64 tensors and the reverse-mode tape
//! - [`datapipe`]: interaction logs, user splits, training samples, negatives
//! - [`gem`]: rule-based and self-attentive guidance extraction
//! - [`diffusion`]: noise schedules, forward noising, posterior, reverse step
//! - [`dam`]: the conditional denoiser and its losses
//! - [`trainer`]: joint optimization, checkpoints, training logs
//! - [`inference`]: reverse-process generation and top-N retrieval
//! - [`evaluation`]: Recall/NDCG, linear probing, category diversity

pub mod dam;
pub mod datapipe;
pub mod diffusion;
pub mod error;
pub mod evaluation;
pub mod exec;
pub mod gem;
pub mod inference;
pub mod model;
pub mod numerics;
pub mod rng;
pub mod synthetic;
pub mod trainer;

pub use error::{Error, Result};
pub use exec::Execution;
pub use numerics::{Tape, Tensor, Var};
