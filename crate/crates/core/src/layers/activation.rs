use crate::error::{config_err, Result};
use crate::tensor::Tensor;

/// Lower clamp applied to probabilities before taking the log.
pub const PROB_FLOOR: f32 = 1e-7;

pub fn relu_forward(input: &Tensor) -> Tensor {
    input.map(|v| v.max(0.0))
}

/// Pass `grad` through where the forward input was positive.
pub fn relu_backward(grad: &Tensor, input: &Tensor) -> Tensor {
    debug_assert_eq!(grad.shape(), input.shape());
    let mut out = grad.clone();
    for (g, &x) in out.data_mut().iter_mut().zip(input.data()) {
        if x <= 0.0 {
            *g = 0.0;
        }
    }
    out
}

/// Softmax over all values, stabilized by subtracting the maximum.
pub fn softmax(logits: &[f32]) -> Vec<f32> {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let exps: Vec<f32> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum: f32 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Negative log-likelihood of `label`.
pub fn cross_entropy(probs: &[f32], label: usize) -> Result<f32> {
    let p = probs
        .get(label)
        .ok_or_else(|| config_err!("label {label} out of range for {} classes", probs.len()))?;
    Ok(-p.clamp(PROB_FLOOR, 1.0).ln())
}
