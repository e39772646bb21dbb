//! Near-policy distillation at desk scale: a tiny windowed language model
//! with analytic gradients, student rollout, Δ-IFD filtering, sequence
//! packing, top-k teacher annotation and the sparse-refresh training loop.

pub mod annotation;
pub mod corpus;
pub mod error;
pub mod ifd;
pub mod io;
pub mod model;
pub mod monitor;
pub mod optim;
pub mod packing;
pub mod pretrain;
pub mod sampling;
pub mod trainer;

pub use error::{NpdError, Result};
pub use model::{ModelDims, TinyLmParams};
