//! Multi-source graph domain adaptation for social bot detection.
//!
//! Labeled source graphs are encoded with a shared GCN, enriched by message
//! passing over a cross-source Top-K topology, and adapted to an unlabeled
//! target graph through relevance-weighted Wasserstein training. Target
//! predictions are refined with a feature-space heterophily score.

pub mod autodiff;
pub mod config;
pub mod csd;
pub mod domain;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod graph;
pub mod graphlets;
pub mod matrix;
pub mod nn;
pub mod pipeline;
pub mod synthgen;
pub mod train;

pub use domain::DomainSet;
pub use error::{Error, Result};
pub use graph::{Graph, Label, Subbatch};
pub use matrix::Matrix;
