//! Unsupervised binary hashing with pairwise bit mutual-information
//! minimization.
//!
//! A single linear layer maps real feature vectors to `K` continuous outputs
//! that are binarized with `sign`. Training alternates a full-dataset step that
//! lowers the mutual information between every pair of bits with minibatch
//! steps on a cosine-similarity-preserving loss plus a consistency term. Codes
//! are packed into machine words and searched exhaustively in Hamming space.
//!
//! With the default `parallel` feature the data-parallel kernels (matrix
//! products, pair statistics, per-sample gradients, per-query evaluation) run
//! on rayon; without it they run sequentially and produce bit-identical output.

pub mod config;
pub mod convergence;
pub mod encoder;
pub mod error;
pub mod exec;
pub mod io;
pub mod mutual_info;
pub mod objectives;
pub mod pipeline;
pub mod retrieval;
pub mod synthetic;
pub mod tensor;
pub mod training;

pub use encoder::{CodeMatrix, HashModel, PackedCodes};
pub use error::{Error, Result};
pub use mutual_info::{MiReport, PairStats};
pub use retrieval::{EvalReport, HammingIndex, LabelSet};
pub use tensor::{Matrix, SeededRng};
pub use training::TrainConfig;
