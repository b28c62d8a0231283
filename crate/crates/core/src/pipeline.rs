//! Sensitivity-ordered ViP insertion: score every conv layer by the
//! accuracy it keeps with ViP alone, group layers least-sensitive first,
//! then enable each group in turn with a warm-started finetune, measuring
//! accuracy, FLOPs and latency after every round.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{config_err, shape_err, Error, Result};
use crate::network::Network;
use crate::tensor::Tensor;
use crate::trainer::{top_k_accuracy, train, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensitivityRecord {
    /// Conv ordinal.
    pub layer: usize,
    /// Accuracy with ViP at this layer only, no finetuning.
    pub accuracy: f64,
    pub accuracy_drop: f64,
    pub precedes_pooling: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensitivityReport {
    pub baseline_accuracy: f64,
    /// Accuracy is top-k with this k.
    pub top_k: usize,
    /// Most accurate (least sensitive) first.
    pub records: Vec<SensitivityRecord>,
}

impl SensitivityReport {
    /// Position of each conv ordinal in the sorted order.
    pub fn rank_of(&self, layer: usize) -> Option<usize> {
        self.records.iter().position(|r| r.layer == layer)
    }
}

/// Sort by accuracy descending; equal accuracies put the deeper layer first.
pub fn sort_records(records: &mut [SensitivityRecord]) {
    records.sort_by(|a, b| b.accuracy.total_cmp(&a.accuracy).then(b.layer.cmp(&a.layer)));
}

/// Accuracy of `net` with ViP enabled at each conv layer on its own.
pub fn sensitivity_analysis(net: &Network, eval: &Dataset, top_k: usize) -> Result<SensitivityReport> {
    if eval.is_empty() {
        return Err(config_err!("sensitivity analysis needs a non-empty evaluation set"));
    }
    if eval.shape() != net.input_shape() {
        return Err(shape_err!(
            "evaluation data {:?} does not match network input {:?}",
            eval.shape(),
            net.input_shape()
        ));
    }
    let baseline = top_k_accuracy(&net.with_vip(&[])?, eval, top_k)?;
    let mut records = Vec::with_capacity(net.conv_count());
    for layer in 0..net.conv_count() {
        let accuracy = top_k_accuracy(&net.with_vip(&[layer])?, eval, top_k)?;
        records.push(SensitivityRecord {
            layer,
            accuracy,
            accuracy_drop: baseline - accuracy,
            precedes_pooling: net.precedes_pooling(layer)?,
        });
    }
    sort_records(&mut records);
    Ok(SensitivityReport {
        baseline_accuracy: baseline,
        top_k,
        records,
    })
}

/// Groups of conv ordinals; round `r` runs with ViP on groups `0..=r`.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct VipPlan {
    pub rounds: Vec<Vec<usize>>,
}

impl VipPlan {
    /// Layers with ViP enabled after round `round` (0-based).
    pub fn cumulative(&self, round: usize) -> Vec<usize> {
        let mut out: Vec<usize> = self.rounds[..=round].iter().flatten().copied().collect();
        out.sort_unstable();
        out
    }

    pub fn validate(&self, conv_count: usize) -> Result<()> {
        let mut seen = vec![false; conv_count];
        for (r, group) in self.rounds.iter().enumerate() {
            if group.is_empty() {
                return Err(config_err!("round {r} has no layers"));
            }
            for &l in group {
                match seen.get_mut(l) {
                    None => return Err(config_err!("round {r}: conv layer {l} does not exist")),
                    Some(true) => return Err(config_err!("conv layer {l} appears in more than one round")),
                    Some(s) => *s = true,
                }
            }
        }
        Ok(())
    }
}

/// Split the sorted order into consecutive groups of the given sizes.
pub fn build_plan(records: &[SensitivityRecord], group_sizes: &[usize]) -> Result<VipPlan> {
    if group_sizes.contains(&0) {
        return Err(config_err!("group sizes must be positive, got {group_sizes:?}"));
    }
    let total: usize = group_sizes.iter().sum();
    if total > records.len() {
        return Err(config_err!(
            "groups {group_sizes:?} cover {total} layers but only {} are ranked",
            records.len()
        ));
    }
    let mut rest = records;
    let rounds = group_sizes
        .iter()
        .map(|&n| {
            let (head, tail) = rest.split_at(n);
            rest = tail;
            head.iter().map(|r| r.layer).collect()
        })
        .collect();
    Ok(VipPlan { rounds })
}

/// Time source for [`benchmark_latency`].
pub trait Clock {
    /// Seconds since an arbitrary fixed origin.
    fn now(&mut self) -> f64;
}

pub struct WallClock(Instant);

impl Default for WallClock {
    fn default() -> Self {
        Self(Instant::now())
    }
}

impl Clock for WallClock {
    fn now(&mut self) -> f64 {
        self.0.elapsed().as_secs_f64()
    }
}

/// Mean and noise-to-signal ratio (population std over mean).
pub fn latency_stats(times: &[f64]) -> (f64, f64) {
    if times.is_empty() {
        return (0.0, 0.0);
    }
    let n = times.len() as f64;
    let mean = times.iter().sum::<f64>() / n;
    let var = times.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / n;
    let nsr = if mean > 0.0 { var.sqrt() / mean } else { 0.0 };
    (mean, nsr)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Latency {
    pub mean_s: f64,
    pub nsr: f64,
    pub repeats: usize,
}

/// Time `repeats` forward passes after `warmup` untimed ones. A rank-4
/// `input` is run as a batch and each timed run covers the whole batch.
pub fn benchmark_latency(
    net: &Network,
    input: &Tensor,
    repeats: usize,
    warmup: usize,
    clock: &mut dyn Clock,
) -> Result<Latency> {
    if repeats < 2 {
        return Err(config_err!("latency needs at least 2 timed runs, got {repeats}"));
    }
    let batch = if input.rank() == 4 { input.unstack() } else { vec![input.clone()] };
    let run = || -> Result<()> {
        std::hint::black_box(net.forward_batch(&batch)?);
        Ok(())
    };
    for _ in 0..warmup {
        run()?;
    }
    let mut times = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let t0 = clock.now();
        run()?;
        times.push(clock.now() - t0);
    }
    let (mean_s, nsr) = latency_stats(&times);
    Ok(Latency { mean_s, nsr, repeats })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TradeoffPoint {
    /// 0 is the baseline without ViP.
    pub round: usize,
    pub vip_layers: Vec<usize>,
    pub accuracy: f64,
    pub accuracy_drop: f64,
    pub flops: u64,
    pub latency: Latency,
    pub speedup: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanConfig {
    /// Training settings of each round's finetune. The round number is
    /// mixed into the seed.
    pub finetune: TrainConfig,
    pub repeats: usize,
    pub warmup: usize,
    pub top_k: usize,
}

impl Default for PlanConfig {
    fn default() -> Self {
        Self {
            finetune: TrainConfig::default().finetune(2),
            repeats: 50,
            warmup: 3,
            top_k: 1,
        }
    }
}

#[derive(Clone, Debug)]
pub struct PlanOutcome {
    /// Baseline first, then one point per round.
    pub points: Vec<TradeoffPoint>,
    /// Weights after the last round, ViP enabled on every planned layer.
    pub network: Network,
}

/// Run every round of `plan`, each finetuning from the previous round's
/// weights. Latency is measured on `bench_input`.
pub fn run_plan(
    net: &Network,
    plan: &VipPlan,
    train_set: &Dataset,
    eval: &Dataset,
    bench_input: &Tensor,
    cfg: &PlanConfig,
    clock: &mut dyn Clock,
) -> Result<PlanOutcome> {
    plan.validate(net.conv_count())?;
    cfg.finetune.validate()?;
    let mut current = net.with_vip(&[])?;
    let baseline_acc = top_k_accuracy(&current, eval, cfg.top_k)?;
    let baseline_lat = benchmark_latency(&current, bench_input, cfg.repeats, cfg.warmup, clock)?;
    let mut points = vec![TradeoffPoint {
        round: 0,
        vip_layers: Vec::new(),
        accuracy: baseline_acc,
        accuracy_drop: 0.0,
        flops: current.flops().total(),
        latency: baseline_lat,
        speedup: 1.0,
    }];
    for r in 0..plan.rounds.len() {
        let layers = plan.cumulative(r);
        current = current.with_vip(&layers)?;
        let ft = TrainConfig {
            seed: cfg.finetune.seed ^ (r as u64 + 1).wrapping_mul(0xA24B_AED4_963E_E407),
            ..cfg.finetune.clone()
        };
        train(&mut current, train_set, None, &ft).map_err(|e| match e {
            Error::Diverged(msg) => Error::Diverged(format!("round {} with ViP on {layers:?}: {msg}", r + 1)),
            other => other,
        })?;
        let accuracy = top_k_accuracy(&current, eval, cfg.top_k)?;
        let latency = benchmark_latency(&current, bench_input, cfg.repeats, cfg.warmup, clock)?;
        points.push(TradeoffPoint {
            round: r + 1,
            vip_layers: layers,
            accuracy,
            accuracy_drop: baseline_acc - accuracy,
            flops: current.flops().total(),
            speedup: baseline_lat.mean_s / latency.mean_s,
            latency,
        });
    }
    Ok(PlanOutcome {
        points,
        network: current,
    })
}
