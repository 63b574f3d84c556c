//! Observability energies and energy-based model order reduction for linear
//! systems with polynomial outputs,
//!
//! ```text
//! x' = A x + B u,    y = c_1^T x + c_2^T (x ⊗ x) + ... + c_d^T x^{⊗d}.
//! ```
//!
//! The observability energy of such a system is a polynomial whose
//! coefficients solve Kronecker-sum equations. They are computed here in CP
//! (canonical polyadic) form with a sinc quadrature of the matrix
//! exponential, averaged over a ball of states and maximized over the
//! Stiefel manifold to pick a projection subspace.
//!
//! All numerical code is generic over [`Real`] and works with `f32` and
//! `f64`; the aliases below fix the scalar to `f64` or `f32`.
//!
//! ```
//! use lpo_mor::{mor, sim};
//!
//! let sys = sim::build_msd::<f64>(4, 1.0, 1.0, 1.0).unwrap();
//! let rom = mor::qobt_reduce(&sys, 3).unwrap();
//! assert_eq!(rom.order(), 3);
//! assert!(rom.provenance.stable);
//! ```
// `!(x > 0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cp_tensor;
pub mod energy;
pub mod error;
pub mod io;
pub mod kron_solver;
pub mod linalg;
pub mod lyapunov;
pub mod mor;
pub mod scalar;
pub mod sim;
pub mod stiefel;
pub mod system;

pub use cp_tensor::CpVector;
pub use energy::{BallSpec, EnergyFunction, SymmetryPolicy};
pub use error::{Error, Result};
pub use mor::{Method, Provenance, ReducedModel};
pub use scalar::Real;
pub use sim::{InputSignal, Trajectory};
pub use stiefel::{OptimizerConfig, StiefelPoint};
pub use system::LpoSystem;

pub type CpVectorF64 = CpVector<f64>;
pub type CpVectorF32 = CpVector<f32>;
pub type EnergyFunctionF64 = EnergyFunction<f64>;
pub type EnergyFunctionF32 = EnergyFunction<f32>;
pub type LpoSystemF64 = LpoSystem<f64>;
pub type LpoSystemF32 = LpoSystem<f32>;
pub type ReducedModelF64 = ReducedModel<f64>;
pub type ReducedModelF32 = ReducedModel<f32>;
pub type TrajectoryF64 = Trajectory<f64>;
pub type TrajectoryF32 = Trajectory<f32>;
