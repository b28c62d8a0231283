//! Minibatch momentum SGD with softmax cross-entropy.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{config_err, shape_err, Error, Result};
use crate::network::{Layer, Network};
use crate::par;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f32,
    pub momentum: f32,
    pub batch_size: usize,
    pub epochs: usize,
    /// Drives weight initialization and per-epoch shuffling.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            momentum: 0.9,
            batch_size: 32,
            epochs: 10,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(config_err!("learning rate must be finite and >= 0"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(config_err!("momentum must be in [0, 1)"));
        }
        if self.batch_size == 0 {
            return Err(config_err!("batch size must be >= 1"));
        }
        Ok(())
    }

    /// Settings for warm-started finetuning: learning rate divided by 10.
    pub fn finetune(&self, epochs: usize) -> Self {
        Self {
            learning_rate: self.learning_rate / 10.0,
            epochs,
            ..self.clone()
        }
    }
}

/// Fan-in scaled uniform initialization: weights in
/// `±sqrt(6 / fan_in)`, biases zero.
pub fn init_weights(net: &mut Network, seed: u64) {
    let fans: Vec<usize> = net
        .layers()
        .iter()
        .filter_map(|l| match l {
            Layer::Conv { filter, .. } => Some(filter.geometry().fan_in()),
            Layer::Dense(d) => Some(d.in_features),
            _ => None,
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (i, p) in net.params_mut().into_iter().enumerate() {
        if i % 2 == 1 {
            p.fill(0.0);
            continue;
        }
        let limit = (6.0 / fans[i / 2] as f32).sqrt();
        p.iter_mut().for_each(|v| *v = rng.random_range(-limit..limit));
    }
}

/// Loss and parameter gradients of a single sample.
pub fn backward(net: &Network, input: &crate::Tensor, label: usize) -> Result<(f32, Vec<Vec<f32>>)> {
    let trace = net.trace(input)?;
    net.loss_gradients(&trace, label)
}

/// Mean loss and mean gradients over `indices`, computed in parallel per
/// sample and reduced in index order.
pub fn batch_gradients(net: &Network, data: &Dataset, indices: &[usize]) -> Result<(f32, Vec<Vec<f32>>)> {
    if indices.is_empty() {
        return Err(config_err!("empty batch"));
    }
    let per_sample = par::map_range(indices.len(), |k| {
        let i = indices[k];
        backward(net, &data.image(i), data.label(i))
    });
    let mut total = 0.0f32;
    let mut sum: Option<Vec<Vec<f32>>> = None;
    for r in per_sample {
        let (loss, grads) = r?;
        total += loss;
        match &mut sum {
            None => sum = Some(grads),
            Some(acc) => {
                for (a, g) in acc.iter_mut().zip(&grads) {
                    a.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
            }
        }
    }
    let scale = 1.0 / indices.len() as f32;
    let mut grads = sum.expect("non-empty batch");
    grads.iter_mut().flatten().for_each(|v| *v *= scale);
    Ok((total * scale, grads))
}

/// Momentum buffers matching [`Network::params`].
#[derive(Clone, Debug, Default)]
pub struct Momentum {
    velocity: Vec<Vec<f32>>,
}

/// `v = momentum * v + g; w -= learning_rate * v`.
pub fn sgd_step(net: &mut Network, grads: &[Vec<f32>], state: &mut Momentum, cfg: &TrainConfig) -> Result<()> {
    if let Some((i, _)) = grads
        .iter()
        .enumerate()
        .find(|(_, g)| g.iter().any(|v| !v.is_finite()))
    {
        return Err(Error::Diverged(format!("non-finite gradient in parameter buffer {i}")));
    }
    let mut params = net.params_mut();
    if grads.len() != params.len() {
        return Err(shape_err!("{} gradient buffers for {} parameter buffers", grads.len(), params.len()));
    }
    if state.velocity.is_empty() {
        state.velocity = grads.iter().map(|g| vec![0.0; g.len()]).collect();
    }
    for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut state.velocity) {
        if p.len() != g.len() {
            return Err(shape_err!("gradient buffer has {} values for {}", g.len(), p.len()));
        }
        for ((w, &gv), vv) in p.iter_mut().zip(g).zip(v.iter_mut()) {
            *vv = cfg.momentum * *vv + gv;
            *w -= cfg.learning_rate * *vv;
        }
    }
    Ok(())
}

/// Index of the largest value (first on ties).
pub fn argmax(values: &[f32]) -> usize {
    values
        .iter()
        .enumerate()
        .fold((0, f32::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

/// Top-1 accuracy over the whole set.
pub fn accuracy(net: &Network, data: &Dataset) -> Result<f64> {
    top_k_accuracy(net, data, 1)
}

pub fn top_k_accuracy(net: &Network, data: &Dataset, k: usize) -> Result<f64> {
    if data.is_empty() {
        return Err(config_err!("cannot evaluate on an empty set"));
    }
    let hits = par::map_range(data.len(), |i| -> Result<bool> {
        let out = net.forward(&data.image(i))?;
        let target = out.data()[data.label(i)];
        let better = out.data().iter().filter(|&&v| v > target).count();
        Ok(better < k)
    });
    let mut correct = 0usize;
    for h in hits {
        correct += usize::from(h?);
    }
    Ok(correct as f64 / data.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f32,
    pub accuracy: Option<f64>,
}

/// Train in place. Each epoch visits the training set in a seeded shuffled
/// order; `eval` (when given) is scored after every epoch.
pub fn train(net: &mut Network, train_set: &Dataset, eval: Option<&Dataset>, cfg: &TrainConfig) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(config_err!("training set is empty"));
    }
    if train_set.shape() != net.input_shape() {
        return Err(shape_err!(
            "data shape {:?} does not match network input {:?}",
            train_set.shape(),
            net.input_shape()
        ));
    }
    let mut state = Momentum::default();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0f64;
        let mut batches = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let (loss, grads) = batch_gradients(net, train_set, batch)?;
            if !loss.is_finite() {
                return Err(Error::Diverged(format!("epoch {epoch}: loss is {loss}")));
            }
            sgd_step(net, &grads, &mut state, cfg)?;
            loss_sum += loss as f64;
            batches += 1;
        }
        let accuracy = eval.map(|e| accuracy(net, e)).transpose()?;
        history.push(EpochLog {
            epoch,
            loss: (loss_sum / batches as f64) as f32,
            accuracy,
        });
    }
    Ok(history)
}
