use serde::{Deserialize, Serialize};

use super::{axpy, dot};
use crate::error::{config_err, shape_err, Result};
use crate::par;
use crate::tensor::Tensor;

/// Shape parameters of a square-kernel 2D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        if in_channels == 0 || out_channels == 0 {
            return Err(config_err!("conv channel counts must be >= 1"));
        }
        if kernel.is_multiple_of(2) {
            return Err(config_err!("conv kernel size must be odd, got {kernel}"));
        }
        if stride == 0 {
            return Err(config_err!("conv stride must be >= 1"));
        }
        Ok(Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        })
    }

    /// Stride 1 with `(kernel - 1) / 2` padding, preserving spatial size.
    pub fn same(in_channels: usize, out_channels: usize, kernel: usize) -> Result<Self> {
        Self::new(in_channels, out_channels, kernel, 1, kernel.saturating_sub(1) / 2)
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (ph, pw) = (h + 2 * self.padding, w + 2 * self.padding);
        if ph < self.kernel || pw < self.kernel {
            return Err(shape_err!(
                "{h}x{w} input with padding {} is smaller than kernel {}",
                self.padding,
                self.kernel
            ));
        }
        Ok((
            (ph - self.kernel) / self.stride + 1,
            (pw - self.kernel) / self.stride + 1,
        ))
    }

    /// Values per output-channel filter, `C * M * M`.
    pub fn fan_in(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    pub fn weight_len(&self) -> usize {
        self.out_channels * self.fan_in()
    }
}

/// FLOPs of a convolution producing an `out_h x out_w` map, counting one
/// multiply-accumulate as two operations. Bias adds are not counted.
pub fn conv_flops(geometry: &ConvGeometry, out_h: usize, out_w: usize) -> u64 {
    2 * (geometry.out_channels as u64)
        * (geometry.in_channels as u64)
        * (geometry.kernel as u64).pow(2)
        * out_h as u64
        * out_w as u64
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvFilter {
    geometry: ConvGeometry,
    weights: Tensor,
    bias: Vec<f32>,
}

impl ConvFilter {
    pub fn new(geometry: ConvGeometry, weights: Vec<f32>, bias: Vec<f32>) -> Result<Self> {
        let g = geometry;
        let weights = Tensor::new(
            vec![g.out_channels, g.in_channels, g.kernel, g.kernel],
            weights,
        )?;
        if bias.len() != g.out_channels {
            return Err(shape_err!(
                "bias has {} values for {} output channels",
                bias.len(),
                g.out_channels
            ));
        }
        Ok(Self {
            geometry,
            weights,
            bias,
        })
    }

    pub fn zeros(geometry: ConvGeometry) -> Self {
        let g = geometry;
        Self {
            geometry,
            weights: Tensor::zeros(&[g.out_channels, g.in_channels, g.kernel, g.kernel]),
            bias: vec![0.0; g.out_channels],
        }
    }

    pub fn geometry(&self) -> &ConvGeometry {
        &self.geometry
    }

    /// Rank 4 `[out, in, kernel, kernel]`.
    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f32] {
        self.weights.data_mut()
    }

    pub fn bias(&self) -> &[f32] {
        &self.bias
    }

    pub fn bias_mut(&mut self) -> &mut [f32] {
        &mut self.bias
    }

    pub(crate) fn parts_mut(&mut self) -> (&mut [f32], &mut [f32]) {
        (self.weights.data_mut(), &mut self.bias)
    }

    /// Weights of one output channel.
    pub fn channel_weights(&self, out_channel: usize) -> &[f32] {
        let k = self.geometry.fan_in();
        &self.weights.data()[out_channel * k..(out_channel + 1) * k]
    }

    fn check_input(&self, input: &Tensor) -> Result<(usize, usize, usize)> {
        let (c, h, w) = input.chw()?;
        if c != self.geometry.in_channels {
            return Err(shape_err!(
                "conv expects {} input channels, got {c}",
                self.geometry.in_channels
            ));
        }
        Ok((c, h, w))
    }
}

/// Output positions along one spatial axis. Output index `a` reads input
/// coordinates `start + a * step + k` for taps `k in 0..kernel`; reads
/// outside the image are zero.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Axis {
    pub start: isize,
    pub step: usize,
    pub len: usize,
}

impl Axis {
    /// The ordinary stride-`s` axis.
    pub fn dense(len: usize, geometry: &ConvGeometry) -> Self {
        Self {
            start: -(geometry.padding as isize),
            step: geometry.stride,
            len,
        }
    }

    /// Every other position of the stride-`s` axis of length `target`,
    /// starting at index 1: `ceil(target / 2)` samples at stride `2s`.
    pub fn doubled(target: usize, geometry: &ConvGeometry) -> Self {
        Self {
            start: geometry.stride as isize - geometry.padding as isize,
            step: 2 * geometry.stride,
            len: target.div_ceil(2),
        }
    }
}

/// Unfold the input into a `[C*M*M, rows.len * cols.len]` column matrix.
fn im2col(input: &[f32], c: usize, h: usize, w: usize, m: usize, rows: Axis, cols: Axis) -> Vec<f32> {
    let p = rows.len * cols.len;
    let mut out = vec![0.0f32; c * m * m * p];
    par::for_each_chunk_mut(&mut out, m * m * p, |ci, block| {
        let plane = &input[ci * h * w..(ci + 1) * h * w];
        for kr in 0..m {
            for kc in 0..m {
                let row_k = &mut block[(kr * m + kc) * p..(kr * m + kc + 1) * p];
                for a in 0..rows.len {
                    let ir = rows.start + (a * rows.step + kr) as isize;
                    if ir < 0 || ir >= h as isize {
                        continue;
                    }
                    let src = &plane[ir as usize * w..(ir as usize + 1) * w];
                    let dst = &mut row_k[a * cols.len..(a + 1) * cols.len];
                    for (b, d) in dst.iter_mut().enumerate() {
                        let ic = cols.start + (b * cols.step + kc) as isize;
                        if ic >= 0 && ic < w as isize {
                            *d = src[ic as usize];
                        }
                    }
                }
            }
        }
    });
    out
}

/// Inverse of [`im2col`]: scatter-add columns back onto the input grid.
fn col2im(cols_mat: &[f32], c: usize, h: usize, w: usize, m: usize, rows: Axis, cols: Axis) -> Vec<f32> {
    let p = rows.len * cols.len;
    let mut out = vec![0.0f32; c * h * w];
    par::for_each_chunk_mut(&mut out, h * w, |ci, plane| {
        let block = &cols_mat[ci * m * m * p..(ci + 1) * m * m * p];
        for kr in 0..m {
            for kc in 0..m {
                let row_k = &block[(kr * m + kc) * p..(kr * m + kc + 1) * p];
                for a in 0..rows.len {
                    let ir = rows.start + (a * rows.step + kr) as isize;
                    if ir < 0 || ir >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[ir as usize * w..(ir as usize + 1) * w];
                    let src = &row_k[a * cols.len..(a + 1) * cols.len];
                    for (b, &g) in src.iter().enumerate() {
                        let ic = cols.start + (b * cols.step + kc) as isize;
                        if ic >= 0 && ic < w as isize {
                            dst[ic as usize] += g;
                        }
                    }
                }
            }
        }
    });
    out
}

/// Convolution evaluated on an arbitrary regular sampling grid.
pub(crate) fn conv_sampled(input: &Tensor, filter: &ConvFilter, rows: Axis, cols: Axis) -> Result<Tensor> {
    let (c, h, w) = filter.check_input(input)?;
    let g = filter.geometry;
    let p = rows.len * cols.len;
    let k = g.fan_in();
    let col = im2col(input.data(), c, h, w, g.kernel, rows, cols);
    let weights = filter.weights.data();
    let mut out = vec![0.0f32; g.out_channels * p];
    par::for_each_chunk_mut(&mut out, p, |co, row| {
        row.fill(filter.bias[co]);
        let wrow = &weights[co * k..(co + 1) * k];
        for (ki, &wv) in wrow.iter().enumerate() {
            axpy(row, wv, &col[ki * p..(ki + 1) * p]);
        }
    });
    Tensor::new(vec![g.out_channels, rows.len, cols.len], out)
}

/// Gradients of a convolution with respect to its input and parameters.
#[derive(Clone, Debug)]
pub struct ConvGrads {
    pub input: Tensor,
    pub weights: Vec<f32>,
    pub bias: Vec<f32>,
}

pub(crate) fn conv_sampled_backward(
    input: &Tensor,
    filter: &ConvFilter,
    rows: Axis,
    cols: Axis,
    grad_out: &Tensor,
    need_input: bool,
) -> Result<(Option<Tensor>, Vec<f32>, Vec<f32>)> {
    let (c, h, w) = filter.check_input(input)?;
    let g = filter.geometry;
    if grad_out.shape() != [g.out_channels, rows.len, cols.len] {
        return Err(shape_err!(
            "conv output gradient {:?}, expected {:?}",
            grad_out.shape(),
            [g.out_channels, rows.len, cols.len]
        ));
    }
    let p = rows.len * cols.len;
    let k = g.fan_in();
    let col = im2col(input.data(), c, h, w, g.kernel, rows, cols);
    let gout = grad_out.data();
    let weights = filter.weights.data();

    let bias: Vec<f32> = gout.chunks(p).map(|r| r.iter().sum()).collect();

    let mut gw = vec![0.0f32; g.out_channels * k];
    par::for_each_chunk_mut(&mut gw, k, |co, wrow| {
        let grow = &gout[co * p..(co + 1) * p];
        for (ki, v) in wrow.iter_mut().enumerate() {
            *v = dot(grow, &col[ki * p..(ki + 1) * p]);
        }
    });

    if !need_input {
        return Ok((None, gw, bias));
    }
    let mut gcol = vec![0.0f32; k * p];
    par::for_each_chunk_mut(&mut gcol, p, |ki, crow| {
        for co in 0..g.out_channels {
            axpy(crow, weights[co * k + ki], &gout[co * p..(co + 1) * p]);
        }
    });
    let gin = col2im(&gcol, c, h, w, g.kernel, rows, cols);
    Ok((Some(Tensor::new(vec![c, h, w], gin)?), gw, bias))
}

fn dense_axes(input: &Tensor, filter: &ConvFilter) -> Result<(Axis, Axis)> {
    let (_, h, w) = filter.check_input(input)?;
    let (oh, ow) = filter.geometry.output_hw(h, w)?;
    Ok((
        Axis::dense(oh, &filter.geometry),
        Axis::dense(ow, &filter.geometry),
    ))
}

/// Zero-padded convolution of a `[C, H, W]` input, producing
/// `[C', (H + 2p - M) / s + 1, (W + 2p - M) / s + 1]`.
pub fn conv_forward(input: &Tensor, filter: &ConvFilter) -> Result<Tensor> {
    let (rows, cols) = dense_axes(input, filter)?;
    conv_sampled(input, filter, rows, cols)
}

pub fn conv_backward(input: &Tensor, filter: &ConvFilter, grad_out: &Tensor) -> Result<ConvGrads> {
    let (rows, cols) = dense_axes(input, filter)?;
    let (gin, weights, bias) = conv_sampled_backward(input, filter, rows, cols, grad_out, true)?;
    Ok(ConvGrads {
        input: gin.expect("requested"),
        weights,
        bias,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Direct six-loop convolution, independent of im2col.
    fn reference_conv(input: &Tensor, f: &ConvFilter) -> Tensor {
        let (c, h, w) = input.chw().unwrap();
        let g = f.geometry();
        let (oh, ow) = g.output_hw(h, w).unwrap();
        let mut out = Tensor::zeros(&[g.out_channels, oh, ow]);
        for co in 0..g.out_channels {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = 0.0f64;
                    for ci in 0..c {
                        for kr in 0..g.kernel {
                            for kc in 0..g.kernel {
                                let r = (i * g.stride + kr) as isize - g.padding as isize;
                                let s = (j * g.stride + kc) as isize - g.padding as isize;
                                if r < 0 || s < 0 || r >= h as isize || s >= w as isize {
                                    continue;
                                }
                                let wi = ((co * c + ci) * g.kernel + kr) * g.kernel + kc;
                                acc += input.at(ci, r as usize, s as usize) as f64
                                    * f.weights().data()[wi] as f64;
                            }
                        }
                    }
                    out.set(co, i, j, (acc + f.bias()[co] as f64) as f32);
                }
            }
        }
        out
    }

    fn random_filter(rng: &mut ChaCha8Rng, g: ConvGeometry) -> ConvFilter {
        let w = (0..g.weight_len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b = (0..g.out_channels).map(|_| rng.random_range(-1.0..1.0)).collect();
        ConvFilter::new(g, w, b).unwrap()
    }

    fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    fn assert_rel_close(a: &Tensor, b: &Tensor, tol: f32) {
        assert_eq!(a.shape(), b.shape());
        for (x, y) in a.data().iter().zip(b.data()) {
            let scale = x.abs().max(y.abs()).max(1.0);
            assert!((x - y).abs() <= tol * scale, "{x} vs {y}");
        }
    }

    #[test]
    fn box_sum_with_zero_padding() {
        let g = ConvGeometry::new(1, 1, 3, 1, 1).unwrap();
        let f = ConvFilter::new(g, vec![1.0; 9], vec![0.0]).unwrap();
        let out = conv_forward(&Tensor::filled(&[1, 3, 3], 1.0), &f).unwrap();
        assert_eq!(out.data(), &[4., 6., 4., 6., 9., 6., 4., 6., 4.]);
    }

    #[test]
    fn identity_filter() {
        let g = ConvGeometry::new(1, 1, 1, 1, 0).unwrap();
        let f = ConvFilter::new(g, vec![1.0], vec![0.0]).unwrap();
        let x = Tensor::from_fn(&[1, 5, 4], |i| i as f32 * 0.5 - 3.0);
        assert_eq!(conv_forward(&x, &f).unwrap(), x);
    }

    #[test]
    fn matches_nested_loop_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let g = ConvGeometry::new(3, 4, 3, 1, 1).unwrap();
        let f = random_filter(&mut rng, g);
        let x = random_tensor(&mut rng, &[3, 8, 8]);
        assert_rel_close(&conv_forward(&x, &f).unwrap(), &reference_conv(&x, &f), 1e-6);
    }

    #[test]
    fn rejects_even_kernel_and_channel_mismatch() {
        assert!(ConvGeometry::new(1, 1, 2, 1, 0).is_err());
        assert!(ConvGeometry::new(0, 1, 3, 1, 0).is_err());
        let f = ConvFilter::zeros(ConvGeometry::same(2, 1, 3).unwrap());
        assert!(conv_forward(&Tensor::zeros(&[3, 4, 4]), &f).is_err());
        let big = ConvFilter::zeros(ConvGeometry::new(1, 1, 5, 1, 0).unwrap());
        assert!(conv_forward(&Tensor::zeros(&[1, 3, 3]), &big).is_err());
    }

    #[test]
    fn flops_examples() {
        let one = ConvGeometry::new(1, 1, 1, 1, 0).unwrap();
        assert_eq!(conv_flops(&one, 1, 1), 2);
        let vgg = ConvGeometry::same(64, 64, 3).unwrap();
        assert_eq!(conv_flops(&vgg, 32, 32), 75_497_472);
        // stride doubling on a 32x32 "same" layer
        let s2 = ConvGeometry::new(64, 64, 3, 2, 1).unwrap();
        let (h1, w1) = vgg.output_hw(32, 32).unwrap();
        let (h2, w2) = s2.output_hw(32, 32).unwrap();
        assert_eq!(conv_flops(&s2, h2, w2) * 4, conv_flops(&vgg, h1, w1));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = ConvGeometry::new(2, 3, 3, 2, 1).unwrap();
        let f = random_filter(&mut rng, g);
        let x = random_tensor(&mut rng, &[2, 5, 6]);
        let out = conv_forward(&x, &f).unwrap();
        let probe = random_tensor(&mut rng, out.shape());
        let loss = |x: &Tensor, f: &ConvFilter| -> f64 {
            let o = conv_forward(x, f).unwrap();
            o.data().iter().zip(probe.data()).map(|(a, b)| (a * b) as f64).sum()
        };
        let grads = conv_backward(&x, &f, &probe).unwrap();
        let eps = 1e-2f32;
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += eps;
            let mut xm = x.clone();
            xm.data_mut()[i] -= eps;
            let fd = (loss(&xp, &f) - loss(&xm, &f)) / (2.0 * eps as f64);
            assert!((fd - grads.input.data()[i] as f64).abs() < 1e-3);
        }
        for i in 0..g.weight_len() {
            let mut fp = f.clone();
            fp.weights_mut()[i] += eps;
            let mut fm = f.clone();
            fm.weights_mut()[i] -= eps;
            let fd = (loss(&x, &fp) - loss(&x, &fm)) / (2.0 * eps as f64);
            assert!((fd - grads.weights[i] as f64).abs() < 1e-3);
        }
        let total: f32 = probe.data()[..out.shape()[1] * out.shape()[2]].iter().sum();
        assert!((grads.bias[0] - total).abs() < 1e-5);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn output_shape_formula(h in 1usize..20, w in 1usize..20, mh in 0usize..3, s in 1usize..4, p in 0usize..3) {
            let m = 2 * mh + 1;
            let g = ConvGeometry::new(1, 2, m, s, p).unwrap();
            let x = Tensor::zeros(&[1, h, w]);
            let f = ConvFilter::zeros(g);
            match conv_forward(&x, &f) {
                Ok(out) => {
                    prop_assert!(h + 2 * p >= m && w + 2 * p >= m);
                    prop_assert_eq!(out.shape(), &[2, (h + 2 * p - m) / s + 1, (w + 2 * p - m) / s + 1]);
                }
                Err(_) => prop_assert!(h + 2 * p < m || w + 2 * p < m),
            }
        }

        #[test]
        fn stride_one_matches_reference(seed in any::<u64>(), c in 1usize..4, co in 1usize..4, h in 1usize..9, w in 1usize..9, mh in 0usize..2) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = ConvGeometry::same(c, co, 2 * mh + 1).unwrap();
            let f = random_filter(&mut rng, g);
            let x = random_tensor(&mut rng, &[c, h, w]);
            assert_rel_close(&conv_forward(&x, &f).unwrap(), &reference_conv(&x, &f), 1e-6);
        }

        #[test]
        fn linear_in_input_without_bias(seed in any::<u64>(), alpha in -3.0f32..3.0, beta in -3.0f32..3.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = ConvGeometry::same(2, 3, 3).unwrap();
            let w = (0..g.weight_len()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let f = ConvFilter::new(g, w, vec![0.0; 3]).unwrap();
            let a = random_tensor(&mut rng, &[2, 6, 7]);
            let b = random_tensor(&mut rng, &[2, 6, 7]);
            let lhs = conv_forward(&a.axpby(alpha, &b, beta).unwrap(), &f).unwrap();
            let rhs = conv_forward(&a, &f).unwrap().axpby(alpha, &conv_forward(&b, &f).unwrap(), beta).unwrap();
            let scale = rhs.l2_norm().max(1.0);
            prop_assert!(lhs.l2_distance(&rhs).unwrap() / scale <= 1e-5);
        }

        #[test]
        fn doubled_stride_quarters_flops(hh in 1usize..20, wh in 1usize..20, c in 1usize..8, co in 1usize..8) {
            let s1 = ConvGeometry::same(c, co, 3).unwrap();
            let s2 = ConvGeometry::new(c, co, 3, 2, 1).unwrap();
            let (h1, w1) = s1.output_hw(2 * hh, 2 * wh).unwrap();
            let (h2, w2) = s2.output_hw(2 * hh, 2 * wh).unwrap();
            prop_assert_eq!(conv_flops(&s2, h2, w2) * 4, conv_flops(&s1, h1, w1));
        }
    }
}
