//! Self-supervised pixel embeddings by matching an embedding similarity
//! kernel to an optical-flow similarity kernel, with a from-scratch
//! convolutional network, analytic gradients, a direct flow-classification
//! baseline, and a synthetic moving-shapes benchmark.

pub mod flow;
pub mod gradcheck;
pub mod kernel;
pub mod net;
pub mod pnm;
pub mod synth;
pub mod train;
pub mod viz;
