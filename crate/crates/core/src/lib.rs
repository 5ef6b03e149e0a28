//! Tightly-coupled learned inertial odometry for cycling.
//!
//! A sparse mixture-of-experts network regresses body-frame velocity with
//! a diagonal covariance from two-second IMU windows; an error-state EKF
//! fuses those regressions with strapdown mechanization. A synthetic ride
//! simulator provides training data and ground truth.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod config;
pub mod diffkernel;
pub mod ekf;
pub mod error;
pub mod eval;
pub mod geom;
pub mod io;
pub mod moenet;
pub mod pipeline;
pub mod sim;

pub use error::{Error, Result};
