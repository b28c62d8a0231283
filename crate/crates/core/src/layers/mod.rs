//! Baseline layer operations, forward and backward.

pub mod activation;
pub mod conv;
pub mod dense;
pub mod pool;

pub use activation::{cross_entropy, relu_backward, relu_forward, softmax};
pub use conv::{conv_backward, conv_flops, conv_forward, ConvFilter, ConvGeometry, ConvGrads};
pub use dense::DenseLayer;
pub use pool::{maxpool2x2_backward, maxpool2x2_forward, maxpool2x2_forward_indexed};

/// `y += a * x`
#[inline]
pub(crate) fn axpy(y: &mut [f32], a: f32, x: &[f32]) {
    debug_assert_eq!(y.len(), x.len());
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += a * xv;
    }
}

/// Dot product with eight fixed accumulation lanes.
#[inline]
pub(crate) fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f32; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}
