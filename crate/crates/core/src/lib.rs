//! Channel pruning with polarized, differentiable gates.
//!
//! Gates `x^2 / (x^2 + eps)` sit in front of every regular convolution and
//! dense layer. A proximal step on an exact bilinear MAC model drives gate
//! arguments to exact zero; the surviving gates are absorbed into the
//! kernels and the zeroed channels are cut out without changing outputs.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod gate;
pub mod graph;
pub mod harness;
pub mod model_io;
pub mod network;
pub mod ops;
pub mod optim;
pub mod prox;
pub mod prune;
pub mod resource;
pub mod tensor;
pub mod zoo;

pub use autodiff::{Tape, Var};
pub use error::{Error, Result};
pub use gate::{gate_grad, gate_value, zero_gate_count, Epsilon, GateMode, GateVector};
pub use graph::{GateInit, InputSpec, LayerKind, NetworkGraph};
pub use tensor::Tensor;
