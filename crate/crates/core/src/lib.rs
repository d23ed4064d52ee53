//! Class unlearning for joint image-text embedding spaces by closed-form
//! linear projection.
//!
//! Forgetting a set of classes means building a `d x d` transform from the
//! class text embeddings and applying it to image features before
//! zero-shot classification. No model weights are touched.
//!
//! - [`store`]: embedding matrices, manifests and the EMB1 file format
//! - [`projection`]: nullspace, CCUP, ablation and partial projectors
//! - [`classify`]: cosine-similarity zero-shot classification
//! - [`eval`]: before/after accuracy, MIA, splits, sweeps, ablation grid
//! - [`synthetic`]: cluster benchmarks on the unit sphere
//! - [`oracle`]: objective, gradient and a gradient-descent minimizer

pub mod classify;
pub mod error;
pub mod eval;
pub mod oracle;
pub mod par;
pub mod projection;
pub mod store;
pub mod synthetic;

pub use error::{Error, Result};
pub use par::Exec;
