use super::{axpy, dot};
use crate::error::{shape_err, Result};

/// Fully connected layer with `[out][in]` row-major weights.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer {
    pub in_features: usize,
    pub out_features: usize,
    pub weights: Vec<f32>,
    pub bias: Vec<f32>,
}

impl DenseLayer {
    pub fn new(in_features: usize, out_features: usize, weights: Vec<f32>, bias: Vec<f32>) -> Result<Self> {
        if in_features == 0 || out_features == 0 {
            return Err(shape_err!("dense layer needs non-zero sizes"));
        }
        if weights.len() != in_features * out_features || bias.len() != out_features {
            return Err(shape_err!(
                "dense {in_features}->{out_features} got {} weights and {} biases",
                weights.len(),
                bias.len()
            ));
        }
        Ok(Self { in_features, out_features, weights, bias })
    }

    pub fn zeros(in_features: usize, out_features: usize) -> Self {
        Self {
            in_features,
            out_features,
            weights: vec![0.0; in_features * out_features],
            bias: vec![0.0; out_features],
        }
    }

    pub fn flops(&self) -> u64 {
        2 * (self.in_features * self.out_features) as u64
    }

    pub fn forward(&self, input: &[f32]) -> Result<Vec<f32>> {
        if input.len() != self.in_features {
            return Err(shape_err!("dense expects {} inputs, got {}", self.in_features, input.len()));
        }
        Ok(self
            .weights
            .chunks(self.in_features)
            .zip(&self.bias)
            .map(|(row, b)| dot(row, input) + b)
            .collect())
    }

    /// Returns `(grad_input, grad_weights, grad_bias)`.
    pub fn backward(&self, input: &[f32], grad_out: &[f32]) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
        let mut gin = vec![0.0; self.in_features];
        let mut gw = vec![0.0; self.weights.len()];
        for (o, &g) in grad_out.iter().enumerate() {
            let row = &self.weights[o * self.in_features..(o + 1) * self.in_features];
            axpy(&mut gin, g, row);
            axpy(&mut gw[o * self.in_features..(o + 1) * self.in_features], g, input);
        }
        (gin, gw, grad_out.to_vec())
    }
}
