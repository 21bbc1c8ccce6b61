//! Minimal CPU neural-network stack: named parameter stores, a tape-based
//! reverse-mode autodiff graph, and the handful of differentiable ops the
//! segmentation models need (convolution, batch norm, ReLU, add, channel
//! concat, bilinear resize, global average pooling).
//!
//! Everything is generic over [`Scalar`]: training runs in `f32`, gradient
//! checks instantiate the identical code in `f64` so analytic gradients can
//! be compared against central finite differences at tight tolerances.
//!
//! Activations are `B×C×H×W` arrays. Learnable parameters and batch-norm
//! running statistics live in string-keyed stores so checkpoints are plain
//! name→tensor maps.

mod graph;
mod ops;
mod params;

pub use graph::{Gradients, Graph, Var};
pub use params::{read_tensors, write_tensors, Buffers, ParamStore};

use ndarray::NdFloat;

/// Floating-point element type of all tensors. Implemented for `f32`/`f64`.
pub trait Scalar: NdFloat + 'static {
    /// Tag stored in serialized tensor blobs.
    const DTYPE: u8;
    /// Bytes per element in serialized form.
    const BYTE_WIDTH: usize;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;

    fn append_le_bytes(buf: &mut Vec<u8>, v: Self);
    fn from_le_bytes(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const DTYPE: u8 = 0;
    const BYTE_WIDTH: usize = 4;

    fn from_f64(v: f64) -> Self {
        v as f32
    }

    fn to_f64(self) -> f64 {
        f64::from(self)
    }

    fn append_le_bytes(buf: &mut Vec<u8>, v: Self) {
        buf.extend_from_slice(&v.to_le_bytes());
    }

    fn from_le_bytes(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4-byte slice"))
    }
}

impl Scalar for f64 {
    const DTYPE: u8 = 1;
    const BYTE_WIDTH: usize = 8;

    fn from_f64(v: f64) -> Self {
        v
    }

    fn to_f64(self) -> f64 {
        self
    }

    fn append_le_bytes(buf: &mut Vec<u8>, v: Self) {
        buf.extend_from_slice(&v.to_le_bytes());
    }

    fn from_le_bytes(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8-byte slice"))
    }
}
