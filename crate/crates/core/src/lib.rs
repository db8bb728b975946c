//! Focus control toolkit: defocus simulation and calibration, small
//! convolutional focus networks, learned autofocus, all-in-focus capture
//! and classical contrast-search baselines.

pub mod allinfocus;
pub mod autofocus;
pub mod baselines;
pub mod defocus;
pub mod error;
pub mod fusion;
pub mod image;
pub mod nn;
pub mod sim;

pub use error::{Error, Result};
