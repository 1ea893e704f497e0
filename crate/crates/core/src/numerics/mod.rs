//! Dense tensor arithmetic with tape-based reverse-mode autodiff.
//!
//! [`Tensor`] is plain row-major storage. [`Graph`] records eager operations
//! on a tape and replays them in reverse for gradients; a node's optional
//! gradient buffer always matches its value shape. [`AdamW`] implements the
//! decoupled-weight-decay update used for training.

pub mod adamw;
pub mod graph;
pub mod kernels;
pub mod tensor;

pub use adamw::AdamW;
pub use graph::{Graph, Var};
pub use tensor::Tensor;
