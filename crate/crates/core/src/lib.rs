//! Layer-wise Optimal Brain Surgeon pruning.
//!
//! Each layer is pruned against its own reconstruction error
//! `E = (1/n) ||Ŵ^T U - W^T U||_F^2`, whose Hessian is block diagonal with a
//! single shared `Ψ` block. Deleting a parameter comes with the compensating
//! update that keeps `E` minimal, and the per-layer errors bound the drift of
//! the final network output.

pub mod baselines;
pub mod bounds;
pub mod error;
pub mod harness;
pub mod hessian;
pub mod io;
pub mod net;
pub mod par;
pub mod pruner;

pub use error::{LobsError, Result};
