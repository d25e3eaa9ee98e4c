//! Minimal CPU neural-network engine: NCHW tensors, a static layer graph
//! with reverse-mode gradients, and the two optimizers used for training.

pub mod builder;
pub mod graph;
pub mod loss;
pub mod ops;
pub mod optim;
pub mod params;

pub use builder::{BnConfig, GraphBuilder};
pub use graph::{Graph, NodeId, Op, PadSpec, Tape};
pub use ops::{Activation, Padding, Tensor};
pub use optim::{Optimizer, OptimizerKind};
pub use params::{Grads, ParamId, ParamRole, ParamStore};
