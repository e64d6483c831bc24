//! Predictive-state reconstruction for (1+1)D spatio-temporal fields.
//!
//! A field is cut into past/future light cones ([`stfield`]); a
//! nonparametric EM ([`engine`]) softly clusters past cones by the
//! distribution of the value they precede, merging states until one is
//! left and keeping the weight matrix with the lowest held-out MSE. The
//! fitted model forecasts ([`forecast`]) and simulates new realizations
//! ([`dynamics`]).

pub mod density;
pub mod dynamics;
pub mod engine;
mod error;
pub mod forecast;
pub mod rng;
pub mod stfield;

pub use error::{Error, Result};
