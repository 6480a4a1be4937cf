//! Trace-supervised, gradient-induced SO(3)-equivariant features for
//! electronic-structure Hamiltonian regression.
//!
//! The crate is organised bottom-up:
//!
//! * [`so3`]: rotations, real spherical harmonics, Wigner-D matrices,
//!   Clebsch–Gordan tables and the invariant trace label of a block.
//! * [`autodiff`]: a reverse-mode tape whose adjoints are themselves recorded,
//!   so gradients of gradients are available.
//! * [`block`]: the invariant head `u → z` and the equivariant feature
//!   `v = ∂z/∂f` (plus the gated alternative and residual merge).
//! * [`model`]: a small tensor-product message-passing backbone, stacked
//!   blocks, the equivariant block decoder and the invariant trace decoder.
//! * [`data`]: an exactly equivariant synthetic Hamiltonian oracle and the
//!   dataset file format.
//! * [`train`]: loss with a detached balancing coefficient, Adam training,
//!   metrics, eigen-metrics and the ablation runner.

pub mod error;
pub mod autodiff;
pub mod block;
pub mod data;
pub mod params;
pub mod model;
pub mod so3;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
