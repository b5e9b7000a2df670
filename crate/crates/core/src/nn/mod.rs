//! Minimal dense neural-network toolkit: matrices, a gradient tape and the
//! transformer building blocks the feature extractor is assembled from.

mod matrix;
mod params;
mod tape;
mod transformer;

pub use matrix::{matmul, Matrix};
pub use params::{Gradients, ParamId, ParamStore};
pub use tape::{Tape, Var};
pub use transformer::{sinusoidal_positions, Dropout, LayerNorm, Linear, TransformerLayer};
