//! Desk-scale parameter-efficient fine-tuning laboratory.
//!
//! Implements propulsion-style trainable output rescaling of frozen layers
//! (`V' = V ⊙ z^k` per attachment site) alongside LoRA, BitFit, and full
//! fine-tuning baselines on small MLP and transformer-encoder models, with
//! a minimal reverse-mode tensor engine, an Algorithm-style training loop,
//! and empirical Neural Tangent Kernel diagnostics (kernel approximation,
//! Jacobian drift, Johnson–Lindenstrauss concentration).

pub mod budget;
pub mod checkpoint;
pub mod cli;
pub mod gradcheck;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod ntk;
pub mod optim;
pub mod peft;
pub mod tensor;
pub mod trainer;

pub use graph::{Graph, Precision, Var};
pub use tensor::{Parameter, Tensor, TensorError};
