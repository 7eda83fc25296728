//! Reverse-mode automatic differentiation with a tape that keeps only what
//! the backward pass will read.
//!
//! Each layer decides what to save from the differentiability of its
//! parents: a convolution whose kernel is frozen does not need its input, a
//! ReLU can keep a bit mask instead of its output, and dropout can keep a
//! seed instead of its mask. [`StoragePolicy::Naive`] reproduces the
//! conventional choices for comparison.
//!
//! Memory is accounted by an event ledger ([`memwatch`]) and predicted
//! without any arithmetic by the [`planner`]; the two must agree byte for
//! byte.
//!
//! ```
//! use leantape::{exec, network::{BuiltinNet, Scenario}, layers::convert_network, StoragePolicy};
//!
//! let net = BuiltinNet::from_name("deep-cnn", Some(6)).unwrap().build();
//! let net = convert_network(&net, StoragePolicy::MemSave, None);
//! let diff = Scenario::Only(4).resolve(&net);
//! let run = exec::run_dyn(&net, &diff, &exec::RunOptions::default()).unwrap();
//! assert_eq!(run.tape_activation_bytes, 131072);
//! ```

pub mod error;
pub mod exec;
pub mod gradcheck;
pub mod layers;
pub mod memwatch;
pub mod network;
pub mod planner;
pub mod report;
pub mod rng;
pub mod scalar;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::{Dtype, Scalar};
pub use tape::{StoragePolicy, Tape};
pub use tensor::{Shape, Tensor, TensorId};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Tape32 = Tape<f32>;
pub type Tape64 = Tape<f64>;
