//! Refinement contrastive learning for unsupervised cell-type identification.
//!
//! The pipeline couples two heterogeneous cell encoders (an MLP over
//! expression features and a GCN over a cell graph) through symmetric-KL
//! distribution alignment, then refines the embeddings with a learnable
//! cell-gene tri-factorization driven by a gene co-expression graph.
//! Downstream modules provide k-means clustering, ACC/NMI/ARI evaluation,
//! and marker-gene analysis.

pub mod analysis;
pub mod cluster;
pub mod error;
pub mod graphs;
pub mod ingest;
pub mod linalg;
pub mod losses;
pub mod model;
pub mod trainer;

pub use error::{Error, Result};
pub use linalg::Matrix;
