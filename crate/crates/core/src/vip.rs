//! Virtual pooling: a convolution evaluated at twice its stride, followed by
//! linear interpolation back to the original output size.
//!
//! Coordinates are 0-based. The stride-doubled convolution samples the
//! original output grid at odd rows and columns: reduced value `(a, b)` is
//! the original output at `(2a + 1, 2b + 1)`. A target extent `H` needs
//! `ceil(H / 2)` reduced rows; for odd `H` the last reduced row sits one
//! position past the end of the target grid and is only read by
//! interpolation.
//!
//! Two interpolation kernels are provided. [`interpolate_oracle`] is the
//! literal definition: expand onto a zero-spaced grid and average the
//! structurally exact entries in each 3x3 window. [`interpolate_fast`] is
//! the four-case closed form. Both add the same values in the same order
//! and divide by the same power of two, so they agree bitwise.

use crate::error::{shape_err, Result};
use crate::layers::conv::{conv_sampled, Axis};
use crate::layers::ConvFilter;
use crate::par;
use crate::tensor::Tensor;

/// Output of the stride-doubled convolution plus the shape of the original
/// stride-`s` output it stands in for.
#[derive(Clone, Debug, PartialEq)]
pub struct ReducedMap {
    map: Tensor,
    target_h: usize,
    target_w: usize,
}

impl ReducedMap {
    /// `map` must be `[C, ceil(target_h / 2), ceil(target_w / 2)]`.
    pub fn new(map: Tensor, target_h: usize, target_w: usize) -> Result<Self> {
        let (_, rh, rw) = map.chw()?;
        if target_h == 0 || target_w == 0 || rh != target_h.div_ceil(2) || rw != target_w.div_ceil(2) {
            return Err(shape_err!(
                "reduced map {rh}x{rw} cannot expand to {target_h}x{target_w}"
            ));
        }
        Ok(Self { map, target_h, target_w })
    }

    pub fn tensor(&self) -> &Tensor {
        &self.map
    }

    pub fn tensor_mut(&mut self) -> &mut Tensor {
        &mut self.map
    }

    pub fn into_tensor(self) -> Tensor {
        self.map
    }

    /// `(height, width)` of the expanded output.
    pub fn target(&self) -> (usize, usize) {
        (self.target_h, self.target_w)
    }

    pub fn channels(&self) -> usize {
        self.map.shape()[0]
    }
}

/// Reduced values placed on the full-resolution grid with structural zeros
/// between them.
///
/// The grid is `[C, 2 * ceil(H / 2), 2 * ceil(W / 2)]`: identical to the
/// target for even extents, one row or column larger for odd ones so every
/// reduced value has a slot. `mask` marks the slots holding reduced values
/// (both indices odd) and is shared by all channels.
#[derive(Clone, Debug, PartialEq)]
pub struct ZeroSpacedMap {
    grid: Tensor,
    mask: Vec<bool>,
    target_h: usize,
    target_w: usize,
}

impl ZeroSpacedMap {
    pub fn tensor(&self) -> &Tensor {
        &self.grid
    }

    pub fn is_exact(&self, row: usize, col: usize) -> bool {
        self.mask[row * self.grid.shape()[2] + col]
    }

    pub fn target(&self) -> (usize, usize) {
        (self.target_h, self.target_w)
    }

    /// The grid restricted to the target extent.
    pub fn cropped(&self) -> Tensor {
        let (c, gh, gw) = (self.grid.shape()[0], self.grid.shape()[1], self.grid.shape()[2]);
        let mut out = Tensor::zeros(&[c, self.target_h, self.target_w]);
        for ci in 0..c {
            for i in 0..self.target_h.min(gh) {
                for j in 0..self.target_w.min(gw) {
                    out.set(ci, i, j, self.grid.at(ci, i, j));
                }
            }
        }
        out
    }
}

/// The convolution at stride `2s`, sampled at the odd positions of the
/// stride-`s` output grid.
pub fn reduced_conv(input: &Tensor, filter: &ConvFilter) -> Result<ReducedMap> {
    let (_, h, w) = input.chw()?;
    let g = filter.geometry();
    let (oh, ow) = g.output_hw(h, w)?;
    let map = conv_sampled(input, filter, Axis::doubled(oh, g), Axis::doubled(ow, g))?;
    ReducedMap::new(map, oh, ow)
}

pub fn zero_space(reduced: &ReducedMap) -> ZeroSpacedMap {
    let (c, rh, rw) = reduced.map.chw().expect("validated at construction");
    let (gh, gw) = (2 * rh, 2 * rw);
    let mut grid = Tensor::zeros(&[c, gh, gw]);
    let mut mask = vec![false; gh * gw];
    for a in 0..rh {
        for b in 0..rw {
            mask[(2 * a + 1) * gw + 2 * b + 1] = true;
        }
    }
    for ci in 0..c {
        for a in 0..rh {
            for b in 0..rw {
                grid.set(ci, 2 * a + 1, 2 * b + 1, reduced.map.at(ci, a, b));
            }
        }
    }
    ZeroSpacedMap {
        grid,
        mask,
        target_h: reduced.target_h,
        target_w: reduced.target_w,
    }
}

/// Mean of the structurally exact entries in each in-bounds 3x3 window.
///
/// The denominator counts mask positions, so a reduced value that happens
/// to be exactly zero still takes part in the mean.
pub fn interpolate_oracle(zs: &ZeroSpacedMap) -> Tensor {
    let (c, gh, gw) = zs.grid.chw().expect("rank 3");
    let (h, w) = zs.target();
    let mut out = Tensor::zeros(&[c, h, w]);
    for ci in 0..c {
        for i in 0..h {
            for j in 0..w {
                let mut sum = 0.0f32;
                let mut count = 0u32;
                for r in i.saturating_sub(1)..=(i + 1).min(gh - 1) {
                    for s in j.saturating_sub(1)..=(j + 1).min(gw - 1) {
                        if zs.is_exact(r, s) {
                            sum += zs.grid.at(ci, r, s);
                            count += 1;
                        }
                    }
                }
                assert!(count > 0, "interpolation window at ({i}, {j}) has no exact entry");
                out.set(ci, i, j, sum / count as f32);
            }
        }
    }
    out
}

/// Reduced-map indices feeding one output coordinate: a single source at
/// odd coordinates and at 0, two neighbours elsewhere.
#[derive(Clone, Copy, Debug)]
struct Sources {
    lo: usize,
    hi: usize,
    two: bool,
}

fn axis_sources(target: usize) -> Vec<Sources> {
    (0..target)
        .map(|i| {
            if i % 2 == 1 {
                Sources { lo: i / 2, hi: i / 2, two: false }
            } else if i == 0 {
                Sources { lo: 0, hi: 0, two: false }
            } else {
                Sources { lo: i / 2 - 1, hi: i / 2, two: true }
            }
        })
        .collect()
}

/// Four-case closed-form interpolation.
pub fn interpolate_fast(reduced: &ReducedMap) -> Tensor {
    let (c, rh, rw) = reduced.map.chw().expect("rank 3");
    let (h, w) = reduced.target();
    let rows = axis_sources(h);
    let cols = axis_sources(w);
    let src = reduced.map.data();
    let mut out = vec![0.0f32; c * h * w];
    par::for_each_chunk_mut(&mut out, h * w, |ci, plane| {
        let red = &src[ci * rh * rw..(ci + 1) * rh * rw];
        for (i, r) in rows.iter().enumerate() {
            let top = &red[r.lo * rw..(r.lo + 1) * rw];
            let bottom = &red[r.hi * rw..(r.hi + 1) * rw];
            let dst = &mut plane[i * w..(i + 1) * w];
            for (d, s) in dst.iter_mut().zip(&cols) {
                *d = match (r.two, s.two) {
                    (false, false) => top[s.lo],
                    (false, true) => (top[s.lo] + top[s.hi]) * 0.5,
                    (true, false) => (top[s.lo] + bottom[s.lo]) * 0.5,
                    (true, true) => (top[s.lo] + top[s.hi] + bottom[s.lo] + bottom[s.hi]) * 0.25,
                };
            }
        }
    });
    Tensor::new(vec![c, h, w], out).expect("consistent shape")
}

/// Transpose of [`interpolate_fast`]: each reduced position accumulates the
/// weighted gradients of the output positions it contributed to.
pub fn interpolate_backward(grad: &Tensor, reduced_h: usize, reduced_w: usize) -> Result<Tensor> {
    let (c, h, w) = grad.chw()?;
    if reduced_h != h.div_ceil(2) || reduced_w != w.div_ceil(2) {
        return Err(shape_err!(
            "gradient {h}x{w} does not come from a {reduced_h}x{reduced_w} reduced map"
        ));
    }
    let rows = axis_sources(h);
    let cols = axis_sources(w);
    let g = grad.data();
    let mut out = vec![0.0f32; c * reduced_h * reduced_w];
    par::for_each_chunk_mut(&mut out, reduced_h * reduced_w, |ci, red| {
        let plane = &g[ci * h * w..(ci + 1) * h * w];
        for (i, r) in rows.iter().enumerate() {
            for (j, s) in cols.iter().enumerate() {
                let v = plane[i * w + j];
                match (r.two, s.two) {
                    (false, false) => red[r.lo * reduced_w + s.lo] += v,
                    (false, true) => {
                        let v = v * 0.5;
                        red[r.lo * reduced_w + s.lo] += v;
                        red[r.lo * reduced_w + s.hi] += v;
                    }
                    (true, false) => {
                        let v = v * 0.5;
                        red[r.lo * reduced_w + s.lo] += v;
                        red[r.hi * reduced_w + s.lo] += v;
                    }
                    (true, true) => {
                        let v = v * 0.25;
                        red[r.lo * reduced_w + s.lo] += v;
                        red[r.lo * reduced_w + s.hi] += v;
                        red[r.hi * reduced_w + s.lo] += v;
                        red[r.hi * reduced_w + s.hi] += v;
                    }
                }
            }
        }
    });
    Tensor::new(vec![c, reduced_h, reduced_w], out)
}

/// Floating-point operations spent by [`interpolate_fast`] on a
/// `channels x h x w` output: nothing for copied values, one add and one
/// multiply for two-source positions, three adds and one multiply for
/// four-source positions.
pub fn interpolation_flops(channels: usize, h: usize, w: usize) -> u64 {
    let two = |n: usize| axis_sources(n).iter().filter(|s| s.two).count() as u64;
    let (tr, tc) = (two(h), two(w));
    let (sr, sc) = (h as u64 - tr, w as u64 - tc);
    channels as u64 * (2 * (sr * tc + tr * sc) + 4 * tr * tc)
}

/// Stride-doubled convolution followed by interpolation; same output shape
/// as [`conv_forward`](crate::layers::conv_forward).
pub fn vip_conv_forward(input: &Tensor, filter: &ConvFilter) -> Result<Tensor> {
    Ok(interpolate_fast(&reduced_conv(input, filter)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::{conv_flops, conv_forward, ConvGeometry};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn reduced(rows: &[&[f32]], target_h: usize, target_w: usize) -> ReducedMap {
        let data: Vec<f32> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        let t = Tensor::new(vec![1, rows.len(), rows[0].len()], data).unwrap();
        ReducedMap::new(t, target_h, target_w).unwrap()
    }

    fn random_map(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize, zero_frac: f64) -> ReducedMap {
        let t = Tensor::from_fn(&[c, h.div_ceil(2), w.div_ceil(2)], |_| {
            if rng.random_bool(zero_frac) {
                0.0
            } else {
                rng.random_range(-4.0..4.0)
            }
        });
        ReducedMap::new(t, h, w).unwrap()
    }

    #[test]
    fn reduced_shape_is_validated() {
        assert!(ReducedMap::new(Tensor::zeros(&[1, 2, 2]), 4, 4).is_ok());
        assert!(ReducedMap::new(Tensor::zeros(&[1, 2, 2]), 3, 4).is_ok());
        assert!(ReducedMap::new(Tensor::zeros(&[1, 2, 2]), 5, 3).is_err());
        assert!(ReducedMap::new(Tensor::zeros(&[1, 2, 2]), 2, 4).is_err());
    }

    #[test]
    fn identity_kernel_samples_odd_positions() {
        let g = ConvGeometry::new(1, 1, 1, 1, 0).unwrap();
        let f = ConvFilter::new(g, vec![1.0], vec![0.0]).unwrap();
        let x = Tensor::from_fn(&[1, 4, 4], |i| i as f32);
        let red = reduced_conv(&x, &f).unwrap();
        assert_eq!(red.target(), (4, 4));
        assert_eq!(red.tensor().data(), &[5.0, 7.0, 13.0, 15.0]);
    }

    #[test]
    fn reduced_flops_quarter() {
        let g = ConvGeometry::same(8, 16, 3).unwrap();
        let x = Tensor::zeros(&[8, 12, 16]);
        let red = reduced_conv(&x, &ConvFilter::zeros(g)).unwrap();
        let (_, rh, rw) = red.tensor().chw().unwrap();
        assert_eq!(conv_flops(&g, rh, rw) * 4, conv_flops(&g, 12, 16));
    }

    #[test]
    fn zero_space_placement() {
        let zs = zero_space(&reduced(&[&[7.0]], 2, 2));
        assert_eq!(zs.tensor().data(), &[0., 0., 0., 7.]);
        assert!(zs.is_exact(1, 1) && !zs.is_exact(0, 0) && !zs.is_exact(0, 1) && !zs.is_exact(1, 0));

        let zs = zero_space(&reduced(&[&[0.0, 0.0], &[0.0, 0.0]], 4, 4));
        assert!(zs.tensor().data().iter().all(|&v| v == 0.0));
        assert_eq!(zs.mask.iter().filter(|&&m| m).count(), 4);
        assert!(zs.is_exact(1, 3) && zs.is_exact(3, 1));

        let zs = zero_space(&reduced(&[&[1.0, 2.0], &[3.0, 4.0]], 4, 4));
        let g = zs.tensor();
        assert_eq!((g.at(0, 1, 1), g.at(0, 1, 3), g.at(0, 3, 1), g.at(0, 3, 3)), (1., 2., 3., 4.));
        assert_eq!(g.data().iter().filter(|&&v| v != 0.0).count(), 4);
    }

    #[test]
    fn oracle_examples() {
        let out = interpolate_oracle(&zero_space(&reduced(&[&[5.0, 5.0], &[5.0, 5.0]], 4, 4)));
        assert_eq!(out, Tensor::filled(&[1, 4, 4], 5.0));

        let red = reduced(&[&[1.0, 2.0], &[3.0, 4.0]], 4, 4);
        let expected = [
            1.0, 1.0, 1.5, 2.0, //
            1.0, 1.0, 1.5, 2.0, //
            2.0, 2.0, 2.5, 3.0, //
            3.0, 3.0, 3.5, 4.0,
        ];
        assert_eq!(interpolate_oracle(&zero_space(&red)).data(), &expected);
        assert_eq!(interpolate_fast(&red).data(), &expected);
    }

    #[test]
    fn exact_zero_counts_in_mean() {
        let red = reduced(&[&[0.0, 4.0]], 2, 4);
        let out = interpolate_oracle(&zero_space(&red));
        assert_eq!(out.data(), &[0.0, 0.0, 2.0, 4.0, 0.0, 0.0, 2.0, 4.0]);
        assert_eq!(interpolate_fast(&red), out);
    }

    #[test]
    fn odd_target_uses_clamped_borders() {
        let red = reduced(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0], &[7.0, 8.0, 9.0]], 5, 5);
        let fast = interpolate_fast(&red);
        assert_eq!(fast, interpolate_oracle(&zero_space(&red)));
        // last row (4) averages reduced rows 1 and 2
        assert_eq!(fast.at(0, 4, 1), 5.5);
        assert_eq!(fast.at(0, 0, 0), 1.0);
        assert_eq!(fast.at(0, 4, 4), 7.0);
        let single = reduced(&[&[3.0]], 1, 1);
        assert_eq!(interpolate_fast(&single).data(), &[3.0]);
        assert_eq!(interpolate_oracle(&zero_space(&single)).data(), &[3.0]);
    }

    #[test]
    fn backward_is_matrix_transpose() {
        // Materialize the 16x4 interpolation matrix column by column.
        let mut matrix = vec![[0.0f32; 4]; 16];
        for k in 0..4 {
            let mut unit = vec![0.0; 4];
            unit[k] = 1.0;
            let red = ReducedMap::new(Tensor::new(vec![1, 2, 2], unit).unwrap(), 4, 4).unwrap();
            for (p, v) in interpolate_fast(&red).data().iter().enumerate() {
                matrix[p][k] = *v;
            }
        }
        // every row is a convex combination
        for row in &matrix {
            assert_eq!(row.iter().sum::<f32>(), 1.0);
        }
        let col_sums: Vec<f32> = (0..4).map(|k| matrix.iter().map(|r| r[k]).sum()).collect();
        let back = interpolate_backward(&Tensor::filled(&[1, 4, 4], 1.0), 2, 2).unwrap();
        assert_eq!(back.data(), col_sums.as_slice());
        // Row weights of reduced row 0 are [1, 1, 0.5, 0], of row 1 [0, 0, 0.5, 1].
        assert_eq!(col_sums, vec![6.25, 3.75, 3.75, 2.25]);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let y = Tensor::from_fn(&[1, 4, 4], |_| rng.random_range(-1.0..1.0));
        let back = interpolate_backward(&y, 2, 2).unwrap();
        for k in 0..4 {
            let expect: f32 = (0..16).map(|p| matrix[p][k] * y.data()[p]).sum();
            assert!((back.data()[k] - expect).abs() < 1e-6);
        }
    }

    #[test]
    fn flops_count_matches_cases() {
        // 4x4: rows/cols 0, 1, 3 have one source, row/col 2 has two
        assert_eq!(interpolation_flops(1, 4, 4), 6 * 2 + 4);
        assert_eq!(interpolation_flops(3, 1, 1), 0);
        assert_eq!(interpolation_flops(2, 4, 4), 2 * interpolation_flops(1, 4, 4));
    }

    #[test]
    fn constant_input_averaging_kernel_is_exact_inside() {
        let g = ConvGeometry::same(2, 3, 3).unwrap();
        let f = ConvFilter::new(g, vec![1.0 / 18.0; g.weight_len()], vec![0.1; 3]).unwrap();
        let x = Tensor::filled(&[2, 10, 10], 2.0);
        let exact = conv_forward(&x, &f).unwrap();
        let vip = vip_conv_forward(&x, &f).unwrap();
        for c in 0..3 {
            for i in 2..8 {
                for j in 2..8 {
                    assert!((exact.at(c, i, j) - vip.at(c, i, j)).abs() < 1e-6);
                }
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn fast_equals_oracle(seed in any::<u64>(), c in 1usize..3, h in 1usize..12, w in 1usize..12, zf in 0.0f64..0.5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let red = random_map(&mut rng, c, h, w, zf);
            prop_assert_eq!(interpolate_fast(&red), interpolate_oracle(&zero_space(&red)));
        }

        #[test]
        fn interpolation_is_linear(seed in any::<u64>(), h in 1usize..10, w in 1usize..10, alpha in -2.0f32..2.0, beta in -2.0f32..2.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_map(&mut rng, 2, h, w, 0.0);
            let b = random_map(&mut rng, 2, h, w, 0.0);
            let mix = ReducedMap::new(a.tensor().axpby(alpha, b.tensor(), beta).unwrap(), h, w).unwrap();
            let lhs = interpolate_fast(&mix);
            let rhs = interpolate_fast(&a).axpby(alpha, &interpolate_fast(&b), beta).unwrap();
            prop_assert!(lhs.max_abs_diff(&rhs).unwrap() <= 1e-5);
            let lhs_o = interpolate_oracle(&zero_space(&mix));
            prop_assert!(lhs_o.max_abs_diff(&rhs).unwrap() <= 1e-5);
        }

        #[test]
        fn values_stay_in_range(seed in any::<u64>(), h in 1usize..12, w in 1usize..12) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let red = random_map(&mut rng, 1, h, w, 0.1);
            let (lo, hi) = red.tensor().min_max();
            let out = interpolate_fast(&red);
            prop_assert!(out.data().iter().all(|&v| v >= lo && v <= hi));
        }

        #[test]
        fn backward_is_adjoint(seed in any::<u64>(), c in 1usize..3, h in 1usize..12, w in 1usize..12) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random_map(&mut rng, c, h, w, 0.0);
            let y = Tensor::from_fn(&[c, h, w], |_| rng.random_range(-1.0..1.0));
            let ax = interpolate_fast(&x);
            let lhs: f64 = ax.data().iter().zip(y.data()).map(|(&a, &b)| a as f64 * b as f64).sum();
            let xt = interpolate_backward(&y, h.div_ceil(2), w.div_ceil(2)).unwrap();
            let rhs: f64 = x.tensor().data().iter().zip(xt.data()).map(|(&a, &b)| a as f64 * b as f64).sum();
            prop_assert!((lhs - rhs).abs() <= 1e-6 * ax.l2_norm() * y.l2_norm());
        }

        #[test]
        fn shape_and_subsampling(seed in any::<u64>(), c in 1usize..4, co in 1usize..4, h in 1usize..14, w in 1usize..14, mh in 0usize..3, s in 1usize..3) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = 2 * mh + 1;
            let g = ConvGeometry::new(c, co, m, s, mh).unwrap();
            let wts = (0..g.weight_len()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let bias = (0..co).map(|_| rng.random_range(-1.0..1.0)).collect();
            let f = ConvFilter::new(g, wts, bias).unwrap();
            let x = Tensor::from_fn(&[c, h, w], |_| rng.random_range(-1.0..1.0));
            let exact = conv_forward(&x, &f).unwrap();
            let red = reduced_conv(&x, &f).unwrap();
            let vip = interpolate_fast(&red);
            prop_assert_eq!(vip.shape(), exact.shape());
            let (_, oh, ow) = exact.chw().unwrap();
            for ci in 0..co {
                for a in 0..oh / 2 {
                    for b in 0..ow / 2 {
                        prop_assert_eq!(red.tensor().at(ci, a, b), exact.at(ci, 2 * a + 1, 2 * b + 1));
                        prop_assert_eq!(vip.at(ci, 2 * a + 1, 2 * b + 1), exact.at(ci, 2 * a + 1, 2 * b + 1));
                    }
                }
            }
        }
    }
}
