//! Analytical bound on the output error introduced by one ViP layer, and
//! an empirical check of it on concrete networks.
//!
//! For ViP at conv layer `s`, observed after conv layer `e >= s`:
//!
//! ```text
//! |O_vip - O_exact|_2 <= sqrt(2) * L * sqrt(C' H W) * prod_{l=s+1..e} sqrt(C_l) * M_l * B_l
//! ```
//!
//! `L` is the spatial Lipschitz constant of layer `s`'s exact output,
//! `C' x H x W` the output shape of layer `e`, and `C_l`, `M_l`, `B_l` the
//! input channels, kernel size and filter-norm bound of each later layer.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, Result};
use crate::layers::ConvFilter;
use crate::network::Network;
use crate::tensor::Tensor;
use crate::{par, zoo};

/// How a filter's weights are reduced to the scalar `B`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FilterNorm {
    /// `sqrt(mean^2 + var)` with population variance, i.e. the RMS.
    #[default]
    Rms,
    /// `sqrt(sum w^2)`.
    Sum,
}

impl std::str::FromStr for FilterNorm {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rms" => Ok(Self::Rms),
            "sum" => Ok(Self::Sum),
            other => Err(config_err!("unknown filter norm '{other}' (expected rms or sum)")),
        }
    }
}

/// `sqrt(mean^2 + std^2)` of the weights, std being the population value.
pub fn filter_norm(weights: &[f32]) -> f64 {
    if weights.is_empty() {
        return 0.0;
    }
    let k = weights.len() as f64;
    let mean = weights.iter().map(|&w| w as f64).sum::<f64>() / k;
    let var = weights.iter().map(|&w| (w as f64 - mean).powi(2)).sum::<f64>() / k;
    (mean * mean + var).sqrt()
}

pub fn filter_sum_norm(weights: &[f32]) -> f64 {
    weights.iter().map(|&w| (w as f64).powi(2)).sum::<f64>().sqrt()
}

/// `B` for a whole layer: the largest per-output-channel norm.
pub fn layer_norm_bound(filter: &ConvFilter, norm: FilterNorm) -> f64 {
    let f = match norm {
        FilterNorm::Rms => filter_norm,
        FilterNorm::Sum => filter_sum_norm,
    };
    (0..filter.geometry().out_channels)
        .map(|co| f(filter.channel_weights(co)))
        .fold(0.0, f64::max)
}

fn spatial(activation: &Tensor) -> Result<(usize, usize, usize)> {
    activation.chw()
}

/// Smallest `L` with `|f(p) - f(q)| <= L |p - q|_2` over every channel and
/// every pair of distinct grid positions. A 1x1 map gives 0.
pub fn estimate_lipschitz(activation: &Tensor) -> Result<f64> {
    let (c, h, w) = spatial(activation)?;
    let plane = h * w;
    // inverse distances depend only on the offset
    let inv: Vec<f64> = (0..h * w)
        .map(|k| {
            let (dy, dx) = ((k / w) as f64, (k % w) as f64);
            if k == 0 {
                0.0
            } else {
                1.0 / (dy * dy + dx * dx).sqrt()
            }
        })
        .collect();
    let per_channel = par::map_range(c, |ci| {
        let f = &activation.data()[ci * plane..(ci + 1) * plane];
        let mut best = 0.0f64;
        for p in 0..plane {
            let (py, px) = (p / w, p % w);
            let fp = f[p] as f64;
            for q in p + 1..plane {
                let (qy, qx) = (q / w, q % w);
                let d = inv[(qy - py) * w + px.abs_diff(qx)];
                best = best.max((fp - f[q] as f64).abs() * d);
            }
        }
        best
    });
    Ok(per_channel.into_iter().fold(0.0, f64::max))
}

/// Lower estimate of [`estimate_lipschitz`] using only axis-adjacent and
/// diagonal neighbours. Linear in the map size.
pub fn estimate_lipschitz_local(activation: &Tensor) -> Result<f64> {
    let (c, h, w) = spatial(activation)?;
    let diag = std::f64::consts::FRAC_1_SQRT_2;
    let mut best = 0.0f64;
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                let v = activation.at(ci, y, x) as f64;
                let mut see = |yy: usize, xx: usize, s: f64| {
                    best = best.max((v - activation.at(ci, yy, xx) as f64).abs() * s);
                };
                if x + 1 < w {
                    see(y, x + 1, 1.0);
                }
                if y + 1 < h {
                    see(y + 1, x, 1.0);
                    if x + 1 < w {
                        see(y + 1, x + 1, diag);
                    }
                    if x > 0 {
                        see(y + 1, x - 1, diag);
                    }
                }
            }
        }
    }
    Ok(best)
}

/// Inputs of one layer after the ViP layer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerFactor {
    pub in_channels: usize,
    pub kernel: usize,
    pub norm_bound: f64,
}

impl LayerFactor {
    /// `sqrt(C) * M * B`.
    pub fn factor(&self) -> f64 {
        (self.in_channels as f64).sqrt() * self.kernel as f64 * self.norm_bound
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundInput {
    pub lipschitz: f64,
    pub start_layer: usize,
    pub end_layer: usize,
    /// One entry per conv layer in `(start_layer, end_layer]`.
    pub layers: Vec<LayerFactor>,
    pub out_channels: usize,
    pub out_height: usize,
    pub out_width: usize,
}

impl BoundInput {
    pub fn validate(&self) -> Result<()> {
        if self.start_layer > self.end_layer || self.layers.len() != self.end_layer - self.start_layer {
            return Err(config_err!(
                "layer range ({}, {}] needs {} factors, got {}",
                self.start_layer,
                self.end_layer,
                self.end_layer.saturating_sub(self.start_layer),
                self.layers.len()
            ));
        }
        let counts_ok = self.out_channels >= 1
            && self.out_height >= 1
            && self.out_width >= 1
            && self.layers.iter().all(|l| l.in_channels >= 1 && l.kernel >= 1);
        let finite_ok = self.lipschitz >= 0.0 && self.layers.iter().all(|l| l.norm_bound >= 0.0);
        if !counts_ok || !finite_ok {
            return Err(config_err!("bound inputs need positive counts and non-negative L and B"));
        }
        Ok(())
    }

    /// True when every layer factor is above one, in which case moving the
    /// ViP layer earlier can only raise the bound.
    pub fn factors_exceed_one(&self) -> bool {
        self.layers.iter().all(|l| l.factor() > 1.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundResult {
    pub bound: f64,
    pub measured_error: Option<f64>,
    pub holds: Option<bool>,
}

impl BoundResult {
    pub fn with_measurement(bound: f64, measured: f64) -> Self {
        Self {
            bound,
            measured_error: Some(measured),
            holds: Some(measured <= bound),
        }
    }
}

pub fn compute_bound(b: &BoundInput) -> BoundResult {
    let size = (b.out_channels * b.out_height * b.out_width) as f64;
    let product: f64 = b.layers.iter().map(LayerFactor::factor).product();
    BoundResult {
        bound: std::f64::consts::SQRT_2 * b.lipschitz * size.sqrt() * product,
        measured_error: None,
        holds: None,
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundOptions {
    pub norm: FilterNorm,
    /// Take `L` from the conv output before its ReLU instead of after.
    pub pre_activation: bool,
    /// Use [`estimate_lipschitz_local`] instead of the all-pairs search.
    pub local_lipschitz: bool,
}

/// Assemble the bound inputs for ViP at conv `vip` observed after conv
/// `observe`, with a given `L`.
pub fn bound_input(net: &Network, vip: usize, observe: usize, lipschitz: f64, norm: FilterNorm) -> Result<BoundInput> {
    if vip > observe {
        return Err(config_err!("ViP layer {vip} comes after observed layer {observe}"));
    }
    let layers = (vip + 1..=observe)
        .map(|o| {
            let f = net.conv_filter(o)?;
            Ok(LayerFactor {
                in_channels: f.geometry().in_channels,
                kernel: f.geometry().kernel,
                norm_bound: layer_norm_bound(f, norm),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let conv_pos = net.conv_layers()[observe];
    let [c, h, w] = net.output_shape(conv_pos);
    let b = BoundInput {
        lipschitz,
        start_layer: vip,
        end_layer: observe,
        layers,
        out_channels: c,
        out_height: h,
        out_width: w,
    };
    b.validate()?;
    Ok(b)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Verification {
    pub input: BoundInput,
    pub result: BoundResult,
}

/// Run `net` without ViP and with ViP at conv `vip` only, measure the
/// output difference after conv block `observe`, and compare it with the
/// bound built from the exact activation of `vip`.
pub fn verify_bound(net: &Network, vip: usize, input: &Tensor, observe: usize, opts: BoundOptions) -> Result<Verification> {
    let exact_net = net.with_vip(&[])?;
    let vip_net = net.with_vip(&[vip])?;
    let exact = exact_net.trace(input)?;
    let approx = vip_net.trace(input)?;
    let end = exact_net.block_end(observe)?;
    let missing = || shape_err!("no activation recorded after layer {end}");
    let measured = exact
        .after_layer(end)
        .ok_or_else(missing)?
        .l2_distance(approx.after_layer(end).ok_or_else(missing)?)?;
    let l_pos = if opts.pre_activation {
        exact_net.conv_layers()[vip]
    } else {
        exact_net.block_end(vip)?
    };
    let act = exact
        .after_layer(l_pos)
        .ok_or_else(|| shape_err!("no activation recorded after layer {l_pos}"))?;
    let lipschitz = if opts.local_lipschitz {
        estimate_lipschitz_local(act)?
    } else {
        estimate_lipschitz(act)?
    };
    let b = bound_input(net, vip, observe, lipschitz, opts.norm)?;
    let result = BoundResult::with_measurement(compute_bound(&b).bound, measured);
    Ok(Verification { input: b, result })
}

/// One trial of the verification campaign, in the report's field names.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct TrialRecord {
    pub seed: u64,
    pub vip_layer: usize,
    pub observe_layer: usize,
    #[serde(rename = "L")]
    pub lipschitz: f64,
    pub bound: f64,
    pub measured_error: f64,
    pub holds: bool,
    pub norm: FilterNorm,
    pub relu: bool,
    pub conv_layers: usize,
    /// Set when this trial failed with the RMS norm: the outcome of the
    /// same trial with the sum norm.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sum_norm_rerun: Option<Box<TrialRecord>>,
}

/// A seeded random network from [`zoo::random_conv_net`] and a seeded
/// choice of ViP layer and observed layer.
pub fn run_trial(seed: u64, opts: BoundOptions) -> Result<TrialRecord> {
    let (net, input) = zoo::random_conv_net(seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0b5e);
    let n = net.conv_count();
    let vip = rng.random_range(0..n);
    let observe = rng.random_range(vip..n);
    let v = verify_bound(&net, vip, &input, observe, opts)?;
    Ok(TrialRecord {
        seed,
        vip_layer: vip,
        observe_layer: observe,
        lipschitz: v.input.lipschitz,
        bound: v.result.bound,
        measured_error: v.result.measured_error.unwrap_or(0.0),
        holds: v.result.holds.unwrap_or(true),
        norm: opts.norm,
        relu: net.layers().iter().any(|l| l.kind() == "relu"),
        conv_layers: n,
        sum_norm_rerun: None,
    })
}

/// Run trials for `seeds`, in parallel. Trials that fail with the RMS norm
/// are repeated with the sum norm and both outcomes are kept.
pub fn run_campaign(seeds: impl IntoIterator<Item = u64>, opts: BoundOptions) -> Result<Vec<TrialRecord>> {
    let seeds: Vec<u64> = seeds.into_iter().collect();
    par::map_range(seeds.len(), |i| {
        let mut rec = run_trial(seeds[i], opts)?;
        if !rec.holds && opts.norm == FilterNorm::Rms {
            let rerun = run_trial(seeds[i], BoundOptions { norm: FilterNorm::Sum, ..opts })?;
            rec.sum_norm_rerun = Some(Box::new(rerun));
        }
        Ok(rec)
    })
    .into_iter()
    .collect()
}
