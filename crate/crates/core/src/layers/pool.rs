use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

/// Non-overlapping 2x2 max pooling with stride 2.
pub fn maxpool2x2_forward(input: &Tensor) -> Result<Tensor> {
    maxpool2x2_forward_indexed(input).map(|(t, _)| t)
}

/// Like [`maxpool2x2_forward`], also returning the flat input index of each
/// selected maximum (first maximum in row-major order on ties).
pub fn maxpool2x2_forward_indexed(input: &Tensor) -> Result<(Tensor, Vec<u32>)> {
    let (c, h, w) = input.chw()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(shape_err!("2x2 max pooling needs even height and width, got {h}x{w}"));
    }
    let (oh, ow) = (h / 2, w / 2);
    let x = input.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut arg = Vec::with_capacity(c * oh * ow);
    for ci in 0..c {
        for i in 0..oh {
            for j in 0..ow {
                let base = (ci * h + 2 * i) * w + 2 * j;
                let mut best = base;
                for idx in [base + 1, base + w, base + w + 1] {
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                arg.push(best as u32);
            }
        }
    }
    Ok((Tensor::new(vec![c, oh, ow], out)?, arg))
}

pub fn maxpool2x2_backward(grad_out: &Tensor, argmax: &[u32], input_shape: &[usize]) -> Result<Tensor> {
    if grad_out.len() != argmax.len() {
        return Err(shape_err!("pool gradient has {} values, {} indices", grad_out.len(), argmax.len()));
    }
    let mut g = Tensor::zeros(input_shape);
    for (&gv, &idx) in grad_out.data().iter().zip(argmax) {
        g.data_mut()[idx as usize] += gv;
    }
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_block() {
        let t = Tensor::new(vec![1, 2, 2], vec![1., 2., 3., 4.]).unwrap();
        assert_eq!(maxpool2x2_forward(&t).unwrap().data(), &[4.0]);
    }

    #[test]
    fn constant_field() {
        let t = Tensor::filled(&[3, 6, 4], 2.0);
        assert_eq!(maxpool2x2_forward(&t).unwrap(), Tensor::filled(&[3, 3, 2], 2.0));
    }

    #[test]
    fn odd_dims_rejected() {
        assert!(maxpool2x2_forward(&Tensor::zeros(&[1, 3, 4])).is_err());
        assert!(maxpool2x2_forward(&Tensor::zeros(&[1, 4, 5])).is_err());
    }

    #[test]
    fn matches_blockwise_max() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let t = Tensor::from_fn(&[2, 4, 4], |_| rng.random_range(-5.0..5.0));
        let out = maxpool2x2_forward(&t).unwrap();
        for c in 0..2 {
            for i in 0..2 {
                for j in 0..2 {
                    let m = [(0, 0), (0, 1), (1, 0), (1, 1)]
                        .iter()
                        .map(|&(a, b)| t.at(c, 2 * i + a, 2 * j + b))
                        .fold(f32::NEG_INFINITY, f32::max);
                    assert_eq!(out.at(c, i, j), m);
                }
            }
        }
    }

    #[test]
    fn backward_routes_to_argmax() {
        let t = Tensor::new(vec![1, 2, 2], vec![1., 5., 3., 4.]).unwrap();
        let (_, arg) = maxpool2x2_forward_indexed(&t).unwrap();
        let g = maxpool2x2_backward(&Tensor::filled(&[1, 1, 1], 2.0), &arg, t.shape()).unwrap();
        assert_eq!(g.data(), &[0., 2., 0., 0.]);
    }
}
