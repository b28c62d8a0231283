use std::fs;
use std::io::{self, Write};
use std::path::Path;

use anyhow::{Context, Result};
use serde::Serialize;
use vipnet::bound::{self, BoundOptions, FilterNorm};
use vipnet::data::Dataset;
use vipnet::model_io::{load_model, save_model};
use vipnet::pipeline::{self, PlanConfig, WallClock};
use vipnet::trainer::{self, TrainConfig};
use vipnet::{par, zoo, Error, Network, Tensor};

use crate::data;
use crate::manifest::{model_hash, ExperimentManifest};
use crate::report::{layer_list, write_csv, write_json};
use crate::{BenchArgs, BoundCheckArgs, DataArgs, InferArgs, NormArg, PlanRunArgs, SensitivityArgs, TimingArgs, TrainArgs};

/// Apply `--threads`. `serial_default` picks one thread when the flag is
/// absent, for commands that measure latency.
fn setup_threads(requested: Option<usize>, serial_default: bool) -> Result<usize> {
    let n = requested.unwrap_or(if serial_default { 1 } else { 0 });
    if n == 1 {
        par::set_parallel(false);
        return Ok(1);
    }
    #[cfg(feature = "parallel")]
    {
        if n > 0 {
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        }
        par::set_parallel(true);
        Ok(rayon::current_num_threads())
    }
    #[cfg(not(feature = "parallel"))]
    {
        par::set_parallel(false);
        Ok(1)
    }
}

fn out_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn open_model(dir: &Path) -> Result<(Network, String)> {
    let net = load_model(dir).with_context(|| format!("loading model from {}", dir.display()))?;
    Ok((net, model_hash(dir)?))
}

/// Load both splits and center them with the model's stored channel means.
fn load_for(net: &Network, args: &DataArgs) -> Result<(Dataset, Dataset)> {
    let (mut train, mut test) = data::load(&args.data, args.train_samples, args.test_samples)?;
    if let Some(mean) = net.input_mean() {
        train.subtract_channel_means(mean)?;
        test.subtract_channel_means(mean)?;
    }
    Ok((train, test))
}

/// Deterministic batch for latency runs; timing does not depend on values.
fn bench_batch(net: &Network, batch: usize) -> Result<Tensor> {
    let [c, h, w] = net.input_shape();
    let n = c * h * w;
    let images: Vec<Tensor> = (0..batch.max(1))
        .map(|b| Tensor::from_fn(&[c, h, w], |i| (((b * n + i) * 37 % 101) as f32 / 101.0) - 0.5))
        .collect();
    Ok(Tensor::stack(&images)?)
}

#[derive(Serialize)]
struct EpochRow {
    epoch: usize,
    loss: f32,
    accuracy: Option<f64>,
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let threads = setup_threads(a.common.threads, false)?;
    let mut manifest = ExperimentManifest::new("train", a, Some(a.seed), threads)?;
    let (mut train_set, mut test_set) = data::load(&a.data.data, a.data.train_samples, a.data.test_samples)?;
    let mean = train_set.channel_means();
    train_set.subtract_channel_means(&mean)?;
    test_set.subtract_channel_means(&mean)?;

    let mut net = zoo::reference_net(train_set.shape(), train_set.classes(), a.seed)?;
    net.set_input_mean(Some(mean));
    let cfg = TrainConfig {
        learning_rate: a.lr as f32,
        momentum: a.momentum as f32,
        batch_size: a.batch_size,
        epochs: a.epochs,
        seed: a.seed,
    };
    let log = trainer::train(&mut net, &train_set, Some(&test_set), &cfg)?;
    for e in &log {
        eprintln!("epoch {:>3}  loss {:.4}  accuracy {:.4}", e.epoch, e.loss, e.accuracy.unwrap_or(f64::NAN));
    }

    out_dir(&a.common.out)?;
    let model_dir = a.common.out.join("model");
    save_model(&net, &model_dir)?;
    manifest.model_hash = Some(model_hash(&model_dir)?);
    manifest.finish();
    let rows: Vec<EpochRow> = log
        .iter()
        .map(|e| EpochRow {
            epoch: e.epoch,
            loss: e.loss,
            accuracy: e.accuracy,
        })
        .collect();
    write_csv(&a.common.out.join("train_log.csv"), &manifest, &["epoch", "loss", "accuracy"], &rows)?;
    println!("{}", model_dir.display());
    Ok(())
}

#[derive(Serialize)]
struct SensitivityRow {
    layer: usize,
    accuracy: f64,
    acc_drop: f64,
    precedes_pooling: bool,
}

pub fn sensitivity(a: &SensitivityArgs) -> Result<()> {
    let threads = setup_threads(a.common.threads, false)?;
    let mut manifest = ExperimentManifest::new("sensitivity", a, None, threads)?;
    let (net, hash) = open_model(&a.model)?;
    manifest.model_hash = Some(hash);
    let (_, test) = load_for(&net, &a.data)?;
    let report = pipeline::sensitivity_analysis(&net, &test, a.top_k)?;
    manifest.finish();

    let rows: Vec<SensitivityRow> = report
        .records
        .iter()
        .map(|r| SensitivityRow {
            layer: r.layer,
            accuracy: r.accuracy,
            acc_drop: r.accuracy_drop,
            precedes_pooling: r.precedes_pooling,
        })
        .collect();
    out_dir(&a.common.out)?;
    write_csv(
        &a.common.out.join("sensitivity.csv"),
        &manifest,
        &["layer", "accuracy", "acc_drop", "precedes_pooling"],
        &rows,
    )?;
    println!("baseline accuracy {:.4}", report.baseline_accuracy);
    for r in &rows {
        println!("conv {:>2}  accuracy {:.4}  drop {:+.4}", r.layer, r.accuracy, r.acc_drop);
    }
    Ok(())
}

#[derive(Serialize)]
struct TradeoffRow {
    round: usize,
    vip_layers: String,
    accuracy: f64,
    acc_drop: f64,
    flops: u64,
    latency_mean_s: f64,
    latency_nsr: f64,
    speedup: f64,
}

pub fn plan_run(a: &PlanRunArgs) -> Result<()> {
    let threads = setup_threads(a.common.threads, true)?;
    let mut manifest = ExperimentManifest::new("plan-run", a, Some(a.seed), threads)?;
    let (net, hash) = open_model(&a.model)?;
    manifest.model_hash = Some(hash);
    let (train_set, test) = load_for(&net, &a.data)?;

    let report = pipeline::sensitivity_analysis(&net, &test, a.top_k)?;
    let plan = pipeline::build_plan(&report.records, &a.groups)?;
    let cfg = PlanConfig {
        finetune: TrainConfig {
            learning_rate: a.lr as f32,
            momentum: a.momentum as f32,
            batch_size: a.batch_size,
            epochs: a.epochs,
            seed: a.seed,
        },
        repeats: a.timing.repeats,
        warmup: a.timing.warmup,
        top_k: a.top_k,
    };
    let input = bench_batch(&net, a.timing.batch)?;
    let outcome = pipeline::run_plan(&net, &plan, &train_set, &test, &input, &cfg, &mut WallClock::default())?;
    manifest.finish();

    let rows: Vec<TradeoffRow> = outcome
        .points
        .iter()
        .map(|p| TradeoffRow {
            round: p.round,
            vip_layers: layer_list(&p.vip_layers),
            accuracy: p.accuracy,
            acc_drop: p.accuracy_drop,
            flops: p.flops,
            latency_mean_s: p.latency.mean_s,
            latency_nsr: p.latency.nsr,
            speedup: p.speedup,
        })
        .collect();
    out_dir(&a.common.out)?;
    write_csv(
        &a.common.out.join("tradeoff.csv"),
        &manifest,
        &["round", "vip_layers", "accuracy", "acc_drop", "flops", "latency_mean_s", "latency_nsr", "speedup"],
        &rows,
    )?;
    save_model(&outcome.network, &a.common.out.join("model"))?;
    for r in &rows {
        println!(
            "round {}  vip [{}]  accuracy {:.4}  flops {}  latency {:.3} ms (nsr {:.1}%)  speedup {:.2}x",
            r.round,
            r.vip_layers,
            r.accuracy,
            r.flops,
            r.latency_mean_s * 1e3,
            r.latency_nsr * 100.0,
            r.speedup
        );
    }
    Ok(())
}

#[derive(Serialize)]
struct BenchReport<'a> {
    model: String,
    vip_layers: Vec<usize>,
    batch: usize,
    repeats: usize,
    warmup: usize,
    flops: u64,
    mean_s: f64,
    nsr: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    note: Option<&'a str>,
}

pub fn bench(a: &BenchArgs) -> Result<()> {
    let threads = setup_threads(a.common.threads, true)?;
    let mut manifest = ExperimentManifest::new("bench", a, None, threads)?;
    let (mut net, hash) = open_model(&a.model)?;
    manifest.model_hash = Some(hash);
    if let Some(vip) = &a.vip {
        net = net.with_vip(vip)?;
    }
    let TimingArgs { repeats, warmup, batch } = a.timing;
    let input = bench_batch(&net, batch)?;
    let lat = pipeline::benchmark_latency(&net, &input, repeats, warmup, &mut WallClock::default())?;
    manifest.finish();

    let report = BenchReport {
        model: net.name().to_string(),
        vip_layers: net.vip_layers(),
        batch,
        repeats,
        warmup,
        flops: net.flops().total() * batch as u64,
        mean_s: lat.mean_s,
        nsr: lat.nsr,
        note: (lat.nsr >= 0.05).then_some("noise above 5%; the machine was not quiet"),
    };
    out_dir(&a.common.out)?;
    write_json(&a.common.out.join("bench.json"), &manifest, &report)?;
    println!("mean {:.4} ms  nsr {:.2}%", lat.mean_s * 1e3, lat.nsr * 100.0);
    Ok(())
}

#[derive(Serialize)]
struct BoundSummary {
    trials: Vec<bound::TrialRecord>,
    holds: usize,
    violations: usize,
    worst_ratio: f64,
}

pub fn bound_check(a: &BoundCheckArgs) -> Result<()> {
    let threads = setup_threads(a.common.threads, false)?;
    let mut manifest = ExperimentManifest::new("bound-check", a, Some(a.seed), threads)?;
    let opts = BoundOptions {
        norm: match a.norm {
            NormArg::Rms => FilterNorm::Rms,
            NormArg::Sum => FilterNorm::Sum,
        },
        pre_activation: a.pre_activation,
        local_lipschitz: a.local_lipschitz,
    };
    let end = a
        .seed
        .checked_add(a.trials)
        .ok_or_else(|| Error::Config("seed range overflows".into()))?;
    let trials = bound::run_campaign(a.seed..end, opts)?;
    manifest.finish();

    let mut stdout = io::stdout().lock();
    for t in &trials {
        match writeln!(stdout, "{}", serde_json::to_string(t)?) {
            Err(e) if e.kind() == io::ErrorKind::BrokenPipe => break,
            r => r?,
        }
    }
    drop(stdout);
    let holds = trials.iter().filter(|t| t.holds).count();
    let worst_ratio = trials
        .iter()
        .filter(|t| t.bound > 0.0)
        .map(|t| t.measured_error / t.bound)
        .fold(0.0, f64::max);
    let summary = BoundSummary {
        violations: trials.len() - holds,
        holds,
        worst_ratio,
        trials,
    };
    out_dir(&a.common.out)?;
    write_json(&a.common.out.join("bound.json"), &manifest, &summary)?;
    eprintln!(
        "bound held in {}/{} trials, worst measured/bound {:.4}",
        summary.holds,
        summary.trials.len(),
        worst_ratio
    );
    Ok(())
}

#[derive(Serialize)]
struct Prediction {
    index: usize,
    label: usize,
    predicted: usize,
    confidence: f32,
}

pub fn infer(a: &InferArgs) -> Result<()> {
    let threads = setup_threads(a.common.threads, false)?;
    let mut manifest = ExperimentManifest::new("infer", a, None, threads)?;
    let (net, hash) = open_model(&a.model)?;
    manifest.model_hash = Some(hash);
    let (_, test) = load_for(&net, &a.data)?;
    if test.shape() != net.input_shape() {
        return Err(Error::Shape(format!(
            "data shape {:?} does not match model input {:?}",
            test.shape(),
            net.input_shape()
        ))
        .into());
    }
    let images: Vec<Tensor> = (0..test.len()).map(|i| test.image(i)).collect();
    let outputs = net.forward_batch(&images)?;
    manifest.finish();

    let rows: Vec<Prediction> = outputs
        .iter()
        .enumerate()
        .map(|(i, out)| {
            let predicted = trainer::argmax(out.data());
            Prediction {
                index: i,
                label: test.label(i),
                predicted,
                confidence: out.data()[predicted],
            }
        })
        .collect();
    let correct = rows.iter().filter(|r| r.label == r.predicted).count();
    out_dir(&a.common.out)?;
    write_csv(
        &a.common.out.join("predictions.csv"),
        &manifest,
        &["index", "label", "predicted", "confidence"],
        &rows,
    )?;
    println!("accuracy {:.4} ({correct}/{})", correct as f64 / rows.len().max(1) as f64, rows.len());
    Ok(())
}
