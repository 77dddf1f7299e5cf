//! FlexHyCA: a design-space exploration toolkit for fault-tolerant
//! deep-learning accelerators.
//!
//! The crate models three layers of a selectively protected accelerator and
//! co-optimizes their parameters:
//!
//! * **algorithm** — gradient-based neuron importance ranking and
//!   important-bit selection ([`importance`]), backed by a fixed-point
//!   quantized inference engine with a float reference model ([`qmodel`]),
//! * **architecture** — an analytical performance/IO model of a 2D systolic
//!   array paired with a dot-product recompute unit ([`archmodel`]),
//! * **circuit** — a gate-level model of bit-protected 8×8 multipliers with
//!   direct or mux-configurable triple modular redundancy ([`bitcircuit`]).
//!
//! Soft errors are injected by [`faultsim`] as per-bit flips at a given bit
//! error rate; [`explorer`] searches the cross-layer parameter space with a
//! pruned Bayesian loop under accuracy/performance/bandwidth constraints.
//!
//! Floating-point reference computations are generic over the scalar type
//! via [`num::Real`]; the quantized datapath is deliberately concrete
//! (`i8` values, 16-bit products, 24-bit accumulators) because its contract
//! is bit-exact.

pub mod archmodel;
pub mod bitcircuit;
pub mod dataset;
pub mod error;
pub mod explorer;
pub mod faultsim;
pub mod importance;
pub mod num;
pub mod qmodel;
pub mod rng;
pub mod stats;

pub use error::CoreError;

/// Default scalar for float-reference computations.
pub type Scalar = f64;

/// Float reference model at the default scalar.
pub type FloatModel = qmodel::FloatModel<Scalar>;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, CoreError>;
