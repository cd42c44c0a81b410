//! On-the-fly Bayesian fine-tuning of small neural interatomic potentials
//! during molecular dynamics.
//!
//! The engine drives an MD trajectory with an ensemble of per-atom neural
//! potentials sampled from a Bayesian posterior. At every step it aggregates
//! the ensemble into a predictive mean and variance for the energy, converts
//! the variance into a calibrated probability that the true error stays
//! below a user threshold, and only consults the expensive reference oracle
//! when that probability drops too low. Each oracle call becomes a new
//! training sample; the posterior ensemble is refreshed by stochastic
//! gradient Hamiltonian Monte Carlo and the calibration statistics are
//! updated from the observed error.
//!
//! Numerical kernels are generic over the floating-point scalar via
//! [`Real`] (instantiable at `f32` or `f64`); concrete `f64` aliases for
//! the main types are exported at the crate root. Probability and
//! post-hoc analysis code ([`calibration`], [`metrics`]) is `f64`
//! throughout: its accuracy contracts are not attainable in single
//! precision and it never touches the simulation hot path.

pub mod calibration;
pub mod data;
pub mod dynamics;
pub mod ensemble;
pub mod error;
pub mod metrics;
pub mod scalar;
pub mod oracle;
pub mod otf;
pub mod sampler;
pub mod special;
pub mod surrogate;

pub use error::{Error, Result};
pub use scalar::Real;

/// `f64` instantiations of the main generic types, for callers that just
/// want the double-precision engine.
pub type Configuration64 = data::AtomicConfiguration<f64>;
pub type Dataset64 = data::Dataset<f64>;
pub type Surrogate64 = surrogate::Surrogate<f64>;
pub type Parameters64 = surrogate::ParameterVector<f64>;
pub type Ensemble64 = sampler::EnsembleState<f64>;
pub type Prediction64 = ensemble::EnsemblePrediction<f64>;
pub type MdState64 = dynamics::MdState<f64>;
pub type OtfEngine64 = otf::OtfEngine<f64>;
