//! Robust sparse-representation classification with incoherence-penalized,
//! hybrid-norm dictionary learning.
//!
//! The crate is organized around a small set of numeric building blocks:
//!
//! - [`norms`] — matrix norms, the hybrid norm, Gram matrices and coherence
//!   metrics;
//! - [`coding`] — sparse coding solvers: an exact coordinate-descent coder
//!   for the convex hybrid-norm objective, and orthogonal matching pursuit
//!   as the Gaussian-noise baseline;
//! - [`learning`] — alternating dictionary learning with a cross-label
//!   incoherence penalty, block coordinate descent over atoms and a
//!   derivative-free random search per column;
//! - [`classifier`] — the two-phase classifier: offline model construction
//!   and online energy-ratio label selection;
//! - [`data`] — dataset ingestion, synthetic generation with outlier
//!   contamination, and participant-group splits;
//! - [`eval`] — precision/recall/F-score metrics, the replicated evaluation
//!   protocol, grid-search cross-validation and a latency benchmark.
//!
//! All numeric kernels are generic over the scalar type through [`Scalar`];
//! `f64` aliases for the main entry points are exported at the crate root.

pub mod classifier;
pub mod coding;
pub mod data;
pub mod error;
pub mod eval;
pub mod learning;
pub mod norms;
pub mod rng;

pub use error::{Error, Result};

use ndarray::NdFloat;
use num_traits::FromPrimitive;

/// Floating-point scalar type accepted by every numeric routine in the crate.
pub trait Scalar: NdFloat + FromPrimitive + std::iter::Sum + Send + Sync {}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Converts an `f64` constant into the active scalar type.
pub(crate) fn scalar<F: Scalar>(v: f64) -> F {
    F::from_f64(v).expect("finite f64 constant converts into every Scalar")
}

/// Column-major sample/atom matrix over `f64`.
pub type Matrix = ndarray::Array2<f64>;
/// Signal or coefficient vector over `f64`.
pub type Vector = ndarray::Array1<f64>;
/// `f64` classifier model.
pub type Model = classifier::ClassifierModel<f64>;
/// `f64` dictionary-learning parameters.
pub type Params = learning::LearnParams<f64>;
