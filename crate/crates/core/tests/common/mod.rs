//! Helpers shared by the integration tests and the acceptance suite.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vipnet::layers::{ConvFilter, ConvGeometry, DenseLayer};
use vipnet::{Layer, Network, Tensor};

pub const FD_EPS: f64 = 1e-3;
pub const FD_REL: f64 = 1e-2;
pub const FD_ABS: f64 = 1e-4;

/// A random net of up to three parametrized layers: one or two convs
/// (optionally with pooling), a dense head and softmax. Spatial size may
/// be odd. Returns the net, an input and a label.
pub fn tiny_net(seed: u64, vip: &[usize]) -> (Network, Tensor, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = rng.random_range(1..=2);
    let two_convs = rng.random_bool(0.7);
    let pool = rng.random_bool(0.4);
    let h = if pool { 2 * rng.random_range(2..=3) } else { rng.random_range(4..=7) };
    let w = if pool { 2 * rng.random_range(2..=3) } else { rng.random_range(4..=7) };
    let classes = rng.random_range(2..=3);
    let conv = |ci: usize, co: usize, rng: &mut ChaCha8Rng| {
        let k = [1, 3, 3][rng.random_range(0..3)];
        let g = ConvGeometry::same(ci, co, k).unwrap();
        let ws = (0..g.weight_len()).map(|_| rng.random_range(-0.8..0.8)).collect();
        let bs = (0..co).map(|_| rng.random_range(-0.2..0.2)).collect();
        Layer::conv(ConvFilter::new(g, ws, bs).unwrap())
    };
    let c1 = rng.random_range(1..=3);
    let mut layers = vec![conv(c, c1, &mut rng), Layer::Relu];
    let mut ch = c1;
    if two_convs {
        let c2 = rng.random_range(1..=3);
        layers.push(conv(c1, c2, &mut rng));
        layers.push(Layer::Relu);
        ch = c2;
    }
    let (mut hh, mut ww) = (h, w);
    if pool {
        layers.push(Layer::MaxPool2x2);
        hh /= 2;
        ww /= 2;
    }
    let n = ch * hh * ww;
    let ws = (0..n * classes).map(|_| rng.random_range(-0.5..0.5)).collect();
    let bs = (0..classes).map(|_| rng.random_range(-0.1..0.1)).collect();
    layers.push(Layer::Dense(DenseLayer::new(n, classes, ws, bs).unwrap()));
    layers.push(Layer::Softmax);
    let net = Network::new("tiny", [c, h, w], classes, layers).unwrap();
    let convs = net.conv_count();
    let vip: Vec<usize> = vip.iter().copied().filter(|&o| o < convs).collect();
    let net = net.with_vip(&vip).unwrap();
    let x = Tensor::from_fn(&[c, h, w], |_| rng.random_range(-1.0..1.0));
    (net, x, rng.random_range(0..classes))
}

/// Feature map in f64, `[c][y][x]`.
#[derive(Clone, Debug)]
pub struct Map {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub v: Vec<f64>,
}

impl Map {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Map { c, h, w, v: vec![0.0; c * h * w] }
    }

    pub fn from_tensor(t: &Tensor) -> Self {
        let s = t.shape();
        Map {
            c: s[0],
            h: s[1],
            w: s[2],
            v: t.data().iter().map(|&x| x as f64).collect(),
        }
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.v[(c * self.h + y) * self.w + x]
    }

    fn put(&mut self, c: usize, y: usize, x: usize, val: f64) {
        self.v[(c * self.h + y) * self.w + x] = val;
    }
}

/// Stride-1 output of a conv at (possibly out-of-range) position `(y, x)`,
/// with zero padding.
fn conv_at(input: &Map, g: &ConvGeometry, w: &[f64], b: &[f64], co: usize, y: usize, x: usize) -> f64 {
    let k = g.kernel;
    let mut acc = b[co];
    for ci in 0..g.in_channels {
        for ky in 0..k {
            for kx in 0..k {
                let iy = (y * g.stride + ky) as isize - g.padding as isize;
                let ix = (x * g.stride + kx) as isize - g.padding as isize;
                if iy >= 0 && ix >= 0 && (iy as usize) < input.h && (ix as usize) < input.w {
                    acc += w[((co * g.in_channels + ci) * k + ky) * k + kx] * input.at(ci, iy as usize, ix as usize);
                }
            }
        }
    }
    acc
}

pub fn ref_conv(input: &Map, g: &ConvGeometry, w: &[f64], b: &[f64]) -> Map {
    let (oh, ow) = g.output_hw(input.h, input.w).unwrap();
    let mut out = Map::zeros(g.out_channels, oh, ow);
    for co in 0..g.out_channels {
        for y in 0..oh {
            for x in 0..ow {
                out.put(co, y, x, conv_at(input, g, w, b, co, y, x));
            }
        }
    }
    out
}

/// Keep the conv output at odd positions `(2a+1, 2b+1)` of an extended
/// `2*ceil(H/2) x 2*ceil(W/2)` grid, optionally rectify, then give every
/// output position the mean of the kept values in its 3x3 window.
pub fn ref_vip_conv(input: &Map, g: &ConvGeometry, w: &[f64], b: &[f64], relu: bool) -> Map {
    let (oh, ow) = g.output_hw(input.h, input.w).unwrap();
    let (rh, rw) = (oh.div_ceil(2), ow.div_ceil(2));
    let mut out = Map::zeros(g.out_channels, oh, ow);
    for co in 0..g.out_channels {
        let mut kept = vec![0.0; rh * rw];
        for a in 0..rh {
            for bb in 0..rw {
                let v = conv_at(input, g, w, b, co, 2 * a + 1, 2 * bb + 1);
                kept[a * rw + bb] = if relu { v.max(0.0) } else { v };
            }
        }
        for y in 0..oh {
            for x in 0..ow {
                let (mut sum, mut n) = (0.0, 0usize);
                for gy in y.saturating_sub(1)..=y + 1 {
                    for gx in x.saturating_sub(1)..=x + 1 {
                        if gy % 2 == 1 && gx % 2 == 1 && gy < 2 * rh && gx < 2 * rw {
                            sum += kept[(gy / 2) * rw + gx / 2];
                            n += 1;
                        }
                    }
                }
                out.put(co, y, x, sum / n as f64);
            }
        }
    }
    out
}

/// Output probabilities of `net` computed in f64 with nested loops, using
/// `params` (in [`Network::params`] order) instead of the net's own weights.
pub fn ref_forward(net: &Network, params: &[Vec<f64>], x: &Tensor) -> Vec<f64> {
    let mut m = Map::from_tensor(x);
    let mut p = params.iter();
    let layers = net.layers();
    for (i, layer) in layers.iter().enumerate() {
        m = match layer {
            Layer::Conv { filter, vip } => {
                let (w, b) = (p.next().unwrap(), p.next().unwrap());
                if *vip {
                    let relu = matches!(layers.get(i + 1), Some(Layer::Relu));
                    ref_vip_conv(&m, filter.geometry(), w, b, relu)
                } else {
                    ref_conv(&m, filter.geometry(), w, b)
                }
            }
            Layer::Relu => Map {
                v: m.v.iter().map(|v| v.max(0.0)).collect(),
                ..m
            },
            Layer::MaxPool2x2 => {
                let mut out = Map::zeros(m.c, m.h / 2, m.w / 2);
                for c in 0..m.c {
                    for y in 0..m.h / 2 {
                        for xx in 0..m.w / 2 {
                            let v = [(0, 0), (0, 1), (1, 0), (1, 1)]
                                .iter()
                                .map(|&(dy, dx)| m.at(c, 2 * y + dy, 2 * xx + dx))
                                .fold(f64::NEG_INFINITY, f64::max);
                            out.put(c, y, xx, v);
                        }
                    }
                }
                out
            }
            Layer::Dense(d) => {
                let (w, b) = (p.next().unwrap(), p.next().unwrap());
                let mut out = Map::zeros(d.out_features, 1, 1);
                for o in 0..d.out_features {
                    out.v[o] = b[o] + (0..d.in_features).map(|k| w[o * d.in_features + k] * m.v[k]).sum::<f64>();
                }
                out
            }
            Layer::Softmax => {
                let mx = m.v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = m.v.iter().map(|v| (v - mx).exp()).collect();
                let s: f64 = e.iter().sum();
                Map {
                    v: e.iter().map(|v| v / s).collect(),
                    ..m
                }
            }
        };
    }
    m.v
}

pub fn params_f64(net: &Network) -> Vec<Vec<f64>> {
    net.params().iter().map(|b| b.iter().map(|&v| v as f64).collect()).collect()
}

#[derive(Debug, Default)]
pub struct GradReport {
    pub checked: usize,
    /// Mismatches explained by a ReLU or max-pool switch inside the step
    /// (the one-sided slopes differ by more than the tolerance).
    pub kinks: usize,
    pub failures: Vec<String>,
}

/// Compare every analytic parameter gradient with a central difference of
/// the f64 reference loss. A gradient passes when
/// `|analytic - numeric| <= max(FD_REL * max(|a|, |n|), FD_ABS)`.
pub fn check_gradients(net: &Network, x: &Tensor, label: usize) -> GradReport {
    let trace = net.trace(x).unwrap();
    let (_, grads) = net.loss_gradients(&trace, label).unwrap();
    let mut params = params_f64(net);
    let loss = |p: &[Vec<f64>]| -ref_forward(net, p, x)[label].ln();
    let base = loss(&params);
    let mut report = GradReport::default();
    for (b, g) in grads.iter().enumerate() {
        for i in 0..g.len() {
            let w0 = params[b][i];
            params[b][i] = w0 + FD_EPS;
            let lp = loss(&params);
            params[b][i] = w0 - FD_EPS;
            let lm = loss(&params);
            params[b][i] = w0;
            let numeric = (lp - lm) / (2.0 * FD_EPS);
            let analytic = g[i] as f64;
            let tol = (FD_REL * analytic.abs().max(numeric.abs())).max(FD_ABS);
            report.checked += 1;
            if (analytic - numeric).abs() <= tol {
                continue;
            }
            let (fwd, bwd) = ((lp - base) / FD_EPS, (base - lm) / FD_EPS);
            if (fwd - bwd).abs() > tol {
                report.kinks += 1;
            } else {
                report.failures.push(format!(
                    "buffer {b} index {i}: analytic {analytic:.6e} numeric {numeric:.6e}"
                ));
            }
        }
    }
    report
}
