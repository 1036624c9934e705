//! Graph Kolmogorov–Arnold networks for multi-omics classification.

pub mod data;
pub mod eval;
pub mod graph;
pub mod kan;
pub mod model;
pub mod selection;
pub mod spline;
