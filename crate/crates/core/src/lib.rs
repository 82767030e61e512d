//! Exchangeable neural ODEs.
//!
//! Permutation-equivariant ODE dynamics over sets, used three ways:
//! set classification (equivariant solve followed by max pooling), continuous
//! normalizing flows with exchangeable likelihoods, and a continuous-time VAE
//! for sets that evolve over time. Everything runs on a small reverse-mode
//! differentiation engine over dense `f64` arrays.

pub mod autodiff;
pub mod checks;
pub mod classifier;
pub mod cnf;
pub mod data;
pub mod equivariant;
pub mod nn;
pub mod ode;
pub mod optim;
mod error;
pub mod rng;
pub mod tensor;
pub mod tvae;

pub use autodiff::{Bindings, Checkpoint, GradMap, Graph, ParamStore, Var};
pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::DenseArray;
