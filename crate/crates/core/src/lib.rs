//! Funnel model predictive control for control-affine systems of higher
//! relative degree, together with robust, learning-based and sampled-data
//! variants and the funnel feedback laws they build on.

pub mod error;
pub mod feedback;
pub mod funnel;
pub mod learning;
pub mod linalg;
pub mod model;
pub mod mpc;
pub mod ocp;
pub mod plants;
pub mod reference;
pub mod scenarios;
pub mod trace;

pub use error::{Error, Result};
