//! Spectral embedding of graphs and joint Bayesian inference of the latent
//! dimension, the number of communities, and node allocations in stochastic
//! blockmodels.
//!
//! The pipeline has four stages, each usable on its own:
//!
//! 1. [`graph`] — edge-list ingestion and adjacency/Laplacian construction;
//! 2. [`embed`] — truncated eigendecompositions and SVDs producing node
//!    embeddings (ASE, LSE, and the paired SVD embedding for directed or
//!    bipartite graphs);
//! 3. [`model`] + [`mcmc`] — a fully collapsed Gaussian blockmodel over the
//!    embedding and a trans-dimensional sampler over `(d, K, z, v, H)`;
//! 4. [`summary`] — posterior similarity, point-estimate clusterings, and
//!    posterior tables from the sampled traces.
//!
//! [`synth`] generates stochastic-blockmodel graphs with a controllable
//! latent rank for end-to-end validation.

pub mod embed;
pub mod error;
pub mod graph;
pub mod kmeans;
pub mod mcmc;
pub mod model;
pub mod summary;
pub mod synth;
pub mod util;

pub use error::{Error, Result};
