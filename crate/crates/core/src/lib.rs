//! Exact population laboratory for predictive joint-embedding objectives and
//! stop-gradient self-distillation on finite joint distributions.
//!
//! Numerical routines are generic over [`Real`] (`f32` or `f64`); the `*64`
//! aliases below name the double-precision instantiations used by the CLI.

pub mod cca;
pub mod diagnostics;
pub mod distributions;
pub mod equilibria;
pub mod error;
pub mod flows;
pub mod matstack;
pub mod objectives;
pub mod scalar;
pub mod trainer;

pub use error::{LabError, Result};
pub use scalar::Real;

pub type Mat64 = matstack::Mat<f64>;
pub type Mat32 = matstack::Mat<f32>;
pub type JointTable64 = distributions::JointTable<f64>;
pub type JointTable32 = distributions::JointTable<f32>;
pub type EncoderPair64 = objectives::EncoderPair<f64>;
