//! Finite Gaussian processes: Monte Carlo widths, estimation error curves in
//! the additive Gaussian channel, rate distortion under squared distance and
//! majorizing-measure functionals, plus an audit that cross-checks them.

pub mod audit;
pub mod channel;
pub mod error;
pub mod export;
pub mod functionals;
pub mod instance;
pub mod mc;
pub mod prior_search;
pub mod process;
pub mod quad;
pub mod rate_distortion;
pub mod special;
pub mod width;

pub use error::{Error, Result};
