//! Fully-connected Gaussian CRF with low-rank pairwise terms.
//!
//! The pairwise matrix is composed from per-variable embeddings as
//! `A = E^T E`, so exact inference is a conjugate-gradient solve that only
//! touches `E` through matrix-vector products, and the backward pass has a
//! closed form built from two outer products.
//!
//! Modules:
//! - [`tensor`]: containers, flattening convention and text I/O
//! - [`cg`]: conjugate gradients over an SPD operator
//! - [`layer`]: the G-CRF layer (energy, forward, backward)
//! - [`oracle`]: brute-force references used to check the layer
//! - [`gradcheck`]: the randomized oracle suite
//! - [`synth`]: synthetic dense-labeling tasks and PGM input
//! - [`train`]: a toy two-stream model and its two-phase training loop
//! - [`config`]: JSON run configuration
//! - [`perf`]: operator and solver timing

pub mod cg;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod layer;
pub mod oracle;
pub mod perf;
pub mod synth;
pub mod tensor;
pub mod train;

pub use cg::{cg_solve, CgConfig, CgReport, SpdOperator};
pub use config::RunConfig;
pub use error::{Error, Result};
pub use layer::{embedding_gradient, EmbeddingMatrix, GcrfLayer, LayerGradients};
pub use tensor::{flat_index, read_matrix, read_vector, write_matrix, write_vector, Dims, Matrix, Vector};
pub use train::{ToyModel, TrainConfig};
