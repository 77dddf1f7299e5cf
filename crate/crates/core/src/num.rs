//! Scalar abstraction for the float-reference side of the toolkit.

use num_traits::{Float, FromPrimitive, NumAssignOps};

/// Floating-point scalar: f32 or f64.
///
/// Everything that runs on the float reference path (forward, backward,
/// calibration statistics) is generic over this trait; the quantized
/// datapath is fixed-width integer arithmetic and does not use it.
pub trait Real:
    Float + FromPrimitive + NumAssignOps + std::fmt::Debug + Send + Sync + 'static
{
    /// Lossless embed of an `i32` (exact for |v| < 2^24 even in f32).
    fn from_i32_exact(v: i32) -> Self {
        Self::from_i32(v).expect("i32 embeds into any Real")
    }

    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("f64 embeds into any Real")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().expect("Real converts to f64")
    }
}

impl Real for f32 {}
impl Real for f64 {}
