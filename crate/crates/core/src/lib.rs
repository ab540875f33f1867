//! Smooth additive Cox survival models with frailty.
//!
//! The Cox partial likelihood is fitted through its Poisson pseudo-data
//! equivalent, smoothing parameters (including frailty variances) are chosen by
//! Laplace-approximate marginal likelihood, and terms are selected by
//! alternating component-wise gradient boosting with null-space shrinkage
//! penalties. Fitted smooths support breakpoint estimation from the maximum of
//! the second derivative, with credible intervals by posterior simulation.

pub mod boostsel;
pub mod breakpoint;
pub mod coxpois;
pub mod error;
pub mod kmcurve;
pub mod linalg;
pub mod pirls;
pub mod report;
pub mod simgen;
pub mod smooths;
pub mod survdata;

pub use error::{Error, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
