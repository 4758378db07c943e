//! Exact-bit tracking for tensors flowing through a small neural-network engine.
//!
//! Every tensor element carries, next to its floating-point value, a lower bound
//! on how many leading mantissa bits agree with the exact real-number result.

pub mod autograd;
pub mod error;
pub mod linalg;
pub mod nn;
pub mod oracle;
pub mod precision;
pub mod ptensor;

pub use autograd::{Feed, Gradients, Graph, NodeId, Op, Temporary};
pub use error::{Error, Result};
pub use linalg::MatmulStrategy;
pub use precision::{ExactBits, Precision, Tracked, UnaryFn};
pub use ptensor::{BinaryOp, PTensor, ReduceOp};
