//! Training, evaluation and serving for the part-segmentation flow model.

pub mod bundle;
pub mod config;
pub mod eval;
pub mod segment;
pub mod service;
pub mod train;
