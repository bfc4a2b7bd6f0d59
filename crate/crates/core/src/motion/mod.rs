//! FLAME-lite motion representation.
//!
//! Each frame carries 50 expression coefficients followed by 6 pose
//! coefficients. The first three pose entries are a global head rotation
//! (axis-angle, radians) applied about the template centroid; all six also
//! drive linear pose-corrective blendshapes.

mod basis;
mod mask;

pub use basis::{read_basis, write_basis, FlameBasis, VertexModel};
pub use mask::{mouth_opening, VertexMask};

pub const EXPR_DIM: usize = 50;
pub const POSE_DIM: usize = 6;
/// Width of one motion frame (expression ‖ pose).
pub const MOTION_DIM: usize = EXPR_DIM + POSE_DIM;
pub const FPS: f32 = 25.0;
/// Column of the global rotation's first component.
pub const ROT_CHANNEL: usize = EXPR_DIM;
/// Column of the jaw coefficient (first pose-corrective entry).
pub const JAW_CHANNEL: usize = EXPR_DIM + 3;

use crate::error::{dim_err, Result};
use crate::numerics::Tensor;

/// One temporal window of motion, `K x 56`.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionWindow {
    frames: Tensor<f32>,
}

impl MotionWindow {
    pub fn new(frames: Tensor<f32>) -> Result<Self> {
        if frames.shape().len() != 2 || frames.cols() != MOTION_DIM {
            return Err(dim_err!("motion window must be K x {}, got {:?}", MOTION_DIM, frames.shape()));
        }
        Ok(MotionWindow { frames })
    }

    /// All-zero window (the template face).
    pub fn neutral(k: usize) -> Self {
        MotionWindow { frames: Tensor::zeros(&[k, MOTION_DIM]) }
    }

    pub fn len(&self) -> usize {
        self.frames.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.rows() == 0
    }

    pub fn frames(&self) -> &Tensor<f32> {
        &self.frames
    }

    pub fn into_frames(self) -> Tensor<f32> {
        self.frames
    }

    pub fn channel(&self, c: usize) -> Vec<f32> {
        (0..self.len()).map(|t| self.frames.at(t, c)).collect()
    }
}
