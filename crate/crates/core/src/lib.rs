//! Speech-driven 3D facial motion generation.
//!
//! Motion is represented as per-frame expression and pose coefficients of a
//! linear blendshape head model. A multi-scale residual VQ codec turns fixed
//! length windows of motion into token pyramids; a block-causal autoregressive
//! transformer predicts those pyramids from speech features, a style token and
//! the previous window's finest tokens.

pub mod ar;
pub mod audio;
pub mod checkpoint;
pub mod codec;
pub mod dataset;
pub mod error;
mod io_util;
pub mod nn;
pub mod metrics;
pub mod motion;
pub mod numerics;
pub mod trainer;

pub use error::{Error, Result};
