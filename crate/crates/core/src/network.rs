//! Sequential layer graph with per-conv virtual pooling flags.

use crate::error::{config_err, shape_err, Result};
use crate::layers::conv::{conv_sampled, conv_sampled_backward, Axis};
use crate::layers::{
    conv_flops, maxpool2x2_backward, maxpool2x2_forward_indexed, relu_backward, relu_forward,
    softmax, ConvFilter, DenseLayer,
};
use crate::par;
use crate::tensor::Tensor;
use crate::vip::{interpolate_backward, interpolate_fast, interpolation_flops, ReducedMap};

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    /// With `vip` set the convolution runs at twice its stride and its
    /// output (after the trailing ReLU, if any) is interpolated back.
    Conv { filter: ConvFilter, vip: bool },
    Relu,
    MaxPool2x2,
    Dense(DenseLayer),
    /// Only valid as the last layer.
    Softmax,
}

impl Layer {
    pub fn conv(filter: ConvFilter) -> Self {
        Layer::Conv { filter, vip: false }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Conv { .. } => "conv",
            Layer::Relu => "relu",
            Layer::MaxPool2x2 => "maxpool2x2",
            Layer::Dense(_) => "dense",
            Layer::Softmax => "softmax",
        }
    }
}

/// A shape-checked sequence of layers over `[C, H, W]` inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    name: String,
    input_shape: [usize; 3],
    classes: usize,
    layers: Vec<Layer>,
    shapes: Vec<[usize; 3]>,
    input_mean: Option<Vec<f32>>,
}

/// FLOPs of one layer under its current ViP setting.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LayerFlops {
    pub layer: usize,
    pub conv: u64,
    pub dense: u64,
    pub interpolation: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FlopReport {
    pub per_layer: Vec<LayerFlops>,
    pub conv: u64,
    pub dense: u64,
    pub interpolation: u64,
}

impl FlopReport {
    pub fn total(&self) -> u64 {
        self.conv + self.dense + self.interpolation
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Step {
    Conv(usize),
    VipConv { layer: usize, relu: bool },
    Relu(usize),
    Pool(usize),
    Dense(usize),
    Softmax(usize),
}

impl Step {
    fn last_layer(self) -> usize {
        match self {
            Step::VipConv { layer, relu: true } => layer + 1,
            Step::Conv(l)
            | Step::VipConv { layer: l, .. }
            | Step::Relu(l)
            | Step::Pool(l)
            | Step::Dense(l)
            | Step::Softmax(l) => l,
        }
    }
}

#[derive(Clone, Debug)]
enum Cache {
    None,
    /// Pre-activation stride-doubled output.
    Reduced(Tensor),
    Argmax(Vec<u32>),
}

/// Activations recorded by [`Network::trace`] for backpropagation.
#[derive(Clone, Debug)]
pub struct Trace {
    input: Tensor,
    steps: Vec<Step>,
    caches: Vec<Cache>,
    outputs: Vec<Tensor>,
}

impl Trace {
    /// Final network output.
    pub fn output(&self) -> &Tensor {
        self.outputs.last().unwrap_or(&self.input)
    }

    /// Activation after layer `layer`, if that layer ends a step.
    pub fn after_layer(&self, layer: usize) -> Option<&Tensor> {
        self.steps
            .iter()
            .position(|s| s.last_layer() == layer)
            .map(|k| &self.outputs[k])
    }

    fn step_input(&self, k: usize) -> &Tensor {
        if k == 0 {
            &self.input
        } else {
            &self.outputs[k - 1]
        }
    }
}

impl Network {
    pub fn new(
        name: impl Into<String>,
        input_shape: [usize; 3],
        classes: usize,
        layers: Vec<Layer>,
    ) -> Result<Self> {
        if input_shape.contains(&0) || classes == 0 {
            return Err(shape_err!("input shape {input_shape:?} and class count {classes} must be non-zero"));
        }
        let mut shapes = Vec::with_capacity(layers.len());
        let mut cur = input_shape;
        for (i, layer) in layers.iter().enumerate() {
            let [c, h, w] = cur;
            cur = match layer {
                Layer::Conv { filter, .. } => {
                    let g = filter.geometry();
                    if g.in_channels != c {
                        return Err(shape_err!(
                            "layer {i}: conv expects {} channels, previous layer yields {c}",
                            g.in_channels
                        ));
                    }
                    let (oh, ow) = g
                        .output_hw(h, w)
                        .map_err(|e| shape_err!("layer {i}: {e}"))?;
                    [g.out_channels, oh, ow]
                }
                Layer::Relu => cur,
                Layer::MaxPool2x2 => {
                    if h % 2 != 0 || w % 2 != 0 {
                        return Err(shape_err!("layer {i}: max pooling needs even extents, got {h}x{w}"));
                    }
                    [c, h / 2, w / 2]
                }
                Layer::Dense(d) => {
                    if d.in_features != c * h * w {
                        return Err(shape_err!(
                            "layer {i}: dense expects {} inputs, previous layer yields {}",
                            d.in_features,
                            c * h * w
                        ));
                    }
                    [d.out_features, 1, 1]
                }
                Layer::Softmax => {
                    if i + 1 != layers.len() {
                        return Err(shape_err!("layer {i}: softmax must be the last layer"));
                    }
                    cur
                }
            };
            shapes.push(cur);
        }
        let out: usize = cur.iter().product();
        if out != classes {
            return Err(shape_err!("network produces {out} outputs for {classes} classes"));
        }
        Ok(Self {
            name: name.into(),
            input_shape,
            classes,
            layers,
            shapes,
            input_mean: None,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Output shape of layer `i`; dense outputs are `[n, 1, 1]`.
    pub fn output_shape(&self, i: usize) -> [usize; 3] {
        self.shapes[i]
    }

    pub fn layer_input_shape(&self, i: usize) -> [usize; 3] {
        if i == 0 {
            self.input_shape
        } else {
            self.shapes[i - 1]
        }
    }

    /// Per-channel mean subtracted from inputs during preprocessing.
    pub fn input_mean(&self) -> Option<&[f32]> {
        self.input_mean.as_deref()
    }

    pub fn set_input_mean(&mut self, mean: Option<Vec<f32>>) {
        self.input_mean = mean;
    }

    /// Layer positions of the conv layers, in order. Conv layers are
    /// addressed elsewhere by their ordinal in this list.
    pub fn conv_layers(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l, Layer::Conv { .. }))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn conv_count(&self) -> usize {
        self.conv_layers().len()
    }

    fn conv_position(&self, ordinal: usize) -> Result<usize> {
        self.conv_layers()
            .get(ordinal)
            .copied()
            .ok_or_else(|| config_err!("conv layer {ordinal} does not exist"))
    }

    pub fn conv_filter(&self, ordinal: usize) -> Result<&ConvFilter> {
        match &self.layers[self.conv_position(ordinal)?] {
            Layer::Conv { filter, .. } => Ok(filter),
            _ => unreachable!(),
        }
    }

    /// Layer position whose output is the conv block's output: the trailing
    /// ReLU when present, otherwise the conv itself.
    pub fn block_end(&self, ordinal: usize) -> Result<usize> {
        let pos = self.conv_position(ordinal)?;
        Ok(if matches!(self.layers.get(pos + 1), Some(Layer::Relu)) {
            pos + 1
        } else {
            pos
        })
    }

    /// True when the conv block is immediately followed by max pooling.
    pub fn precedes_pooling(&self, ordinal: usize) -> Result<bool> {
        let end = self.block_end(ordinal)?;
        Ok(matches!(self.layers.get(end + 1), Some(Layer::MaxPool2x2)))
    }

    pub fn set_vip(&mut self, ordinal: usize, enabled: bool) -> Result<()> {
        let pos = self.conv_position(ordinal)?;
        if let Layer::Conv { vip, .. } = &mut self.layers[pos] {
            *vip = enabled;
        }
        Ok(())
    }

    /// Clone with ViP enabled on exactly the given conv ordinals.
    pub fn with_vip(&self, ordinals: &[usize]) -> Result<Network> {
        let mut net = self.clone();
        for o in 0..net.conv_count() {
            net.set_vip(o, false)?;
        }
        for &o in ordinals {
            net.set_vip(o, true)?;
        }
        Ok(net)
    }

    pub fn vip_layers(&self) -> Vec<usize> {
        self.layers
            .iter()
            .filter(|l| matches!(l, Layer::Conv { .. }))
            .enumerate()
            .filter(|(_, l)| matches!(l, Layer::Conv { vip: true, .. }))
            .map(|(o, _)| o)
            .collect()
    }

    pub fn flops(&self) -> FlopReport {
        let mut report = FlopReport::default();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut lf = LayerFlops {
                layer: i,
                ..Default::default()
            };
            match layer {
                Layer::Conv { filter, vip } => {
                    let [c, h, w] = self.shapes[i];
                    if *vip {
                        lf.conv = conv_flops(filter.geometry(), h.div_ceil(2), w.div_ceil(2));
                        lf.interpolation = interpolation_flops(c, h, w);
                    } else {
                        lf.conv = conv_flops(filter.geometry(), h, w);
                    }
                }
                Layer::Dense(d) => lf.dense = d.flops(),
                _ => continue,
            }
            report.conv += lf.conv;
            report.dense += lf.dense;
            report.interpolation += lf.interpolation;
            report.per_layer.push(lf);
        }
        report
    }

    fn steps(&self) -> Vec<Step> {
        let mut steps = Vec::with_capacity(self.layers.len());
        let mut i = 0;
        while i < self.layers.len() {
            let step = match &self.layers[i] {
                Layer::Conv { vip: true, .. } => Step::VipConv {
                    layer: i,
                    relu: matches!(self.layers.get(i + 1), Some(Layer::Relu)),
                },
                Layer::Conv { .. } => Step::Conv(i),
                Layer::Relu => Step::Relu(i),
                Layer::MaxPool2x2 => Step::Pool(i),
                Layer::Dense(_) => Step::Dense(i),
                Layer::Softmax => Step::Softmax(i),
            };
            i = step.last_layer() + 1;
            steps.push(step);
        }
        steps
    }

    fn check_input(&self, input: &Tensor) -> Result<()> {
        if input.shape() != self.input_shape {
            return Err(shape_err!(
                "network expects input {:?}, got {:?}",
                self.input_shape,
                input.shape()
            ));
        }
        Ok(())
    }

    fn filter_at(&self, layer: usize) -> &ConvFilter {
        match &self.layers[layer] {
            Layer::Conv { filter, .. } => filter,
            _ => unreachable!("step/layer mismatch"),
        }
    }

    fn run_step(&self, step: Step, x: &Tensor) -> Result<(Tensor, Cache)> {
        Ok(match step {
            Step::Conv(l) => {
                let f = self.filter_at(l);
                let [_, oh, ow] = self.shapes[l];
                let g = f.geometry();
                (conv_sampled(x, f, Axis::dense(oh, g), Axis::dense(ow, g))?, Cache::None)
            }
            Step::VipConv { layer, relu } => {
                let f = self.filter_at(layer);
                let [_, oh, ow] = self.shapes[layer];
                let g = f.geometry();
                let pre = conv_sampled(x, f, Axis::doubled(oh, g), Axis::doubled(ow, g))?;
                let act = if relu { relu_forward(&pre) } else { pre.clone() };
                let out = interpolate_fast(&ReducedMap::new(act, oh, ow)?);
                (out, Cache::Reduced(pre))
            }
            Step::Relu(_) => (relu_forward(x), Cache::None),
            Step::Pool(_) => {
                let (t, arg) = maxpool2x2_forward_indexed(x)?;
                (t, Cache::Argmax(arg))
            }
            Step::Dense(l) => {
                let Layer::Dense(d) = &self.layers[l] else {
                    unreachable!()
                };
                let n = d.out_features;
                (Tensor::new(vec![n, 1, 1], d.forward(x.data())?)?, Cache::None)
            }
            Step::Softmax(_) => {
                let p = softmax(x.data());
                (Tensor::new(x.shape().to_vec(), p)?, Cache::None)
            }
        })
    }

    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        self.check_input(input)?;
        let mut x = input.clone();
        for step in self.steps() {
            x = self.run_step(step, &x)?.0;
        }
        Ok(x)
    }

    /// Forward a `[N, C, H, W]` batch or a slice of samples, in parallel
    /// over samples.
    pub fn forward_batch(&self, inputs: &[Tensor]) -> Result<Vec<Tensor>> {
        par::map_range(inputs.len(), |i| self.forward(&inputs[i]))
            .into_iter()
            .collect()
    }

    pub fn trace(&self, input: &Tensor) -> Result<Trace> {
        self.check_input(input)?;
        let steps = self.steps();
        let mut caches = Vec::with_capacity(steps.len());
        let mut outputs: Vec<Tensor> = Vec::with_capacity(steps.len());
        for &step in &steps {
            let x = outputs.last().unwrap_or(input);
            let (y, cache) = self.run_step(step, x)?;
            outputs.push(y);
            caches.push(cache);
        }
        Ok(Trace {
            input: input.clone(),
            steps,
            caches,
            outputs,
        })
    }

    /// Parameter buffers in a fixed order: weights then bias of each conv
    /// and dense layer, in layer order.
    pub fn params(&self) -> Vec<&[f32]> {
        let mut out = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::Conv { filter, .. } => {
                    out.push(filter.weights().data());
                    out.push(filter.bias());
                }
                Layer::Dense(d) => {
                    out.push(d.weights.as_slice());
                    out.push(d.bias.as_slice());
                }
                _ => {}
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f32]> {
        let mut out: Vec<&mut [f32]> = Vec::new();
        for layer in &mut self.layers {
            match layer {
                Layer::Conv { filter, .. } => {
                    let (w, b) = filter.parts_mut();
                    out.push(w);
                    out.push(b);
                }
                Layer::Dense(d) => {
                    out.push(d.weights.as_mut_slice());
                    out.push(d.bias.as_mut_slice());
                }
                _ => {}
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Backpropagate `grad_output` (gradient with respect to the network
    /// output) through a trace. Returns parameter gradients in
    /// [`params`](Self::params) order.
    pub fn backward(&self, trace: &Trace, grad_output: &Tensor) -> Result<Vec<Vec<f32>>> {
        self.backward_steps(trace, grad_output.clone(), trace.steps.len())
    }

    /// Softmax cross-entropy loss of a trace and its parameter gradients.
    /// The loss is taken on the output directly when the last layer is a
    /// softmax, otherwise on the softmax of the output.
    pub fn loss_gradients(&self, trace: &Trace, label: usize) -> Result<(f32, Vec<Vec<f32>>)> {
        if label >= self.classes {
            return Err(config_err!("label {label} out of range for {} classes", self.classes));
        }
        let ends_in_softmax = matches!(trace.steps.last(), Some(Step::Softmax(_)));
        let out = trace.output();
        let probs = if ends_in_softmax {
            out.data().to_vec()
        } else {
            softmax(out.data())
        };
        let loss = crate::layers::cross_entropy(&probs, label)?;
        let mut g = probs;
        g[label] -= 1.0;
        let shape = if ends_in_softmax {
            trace.step_input(trace.steps.len() - 1).shape().to_vec()
        } else {
            out.shape().to_vec()
        };
        let upto = trace.steps.len() - usize::from(ends_in_softmax);
        let grads = self.backward_steps(trace, Tensor::new(shape, g)?, upto)?;
        Ok((loss, grads))
    }

    fn backward_steps(&self, trace: &Trace, grad: Tensor, upto: usize) -> Result<Vec<Vec<f32>>> {
        // slot of each parameterized layer in params() order
        let mut slot = vec![usize::MAX; self.layers.len()];
        let mut n = 0;
        for (i, l) in self.layers.iter().enumerate() {
            if matches!(l, Layer::Conv { .. } | Layer::Dense(_)) {
                slot[i] = n;
                n += 2;
            }
        }
        let mut grads: Vec<Vec<f32>> = self.params().iter().map(|p| vec![0.0; p.len()]).collect();
        let mut g = grad;
        for k in (0..upto).rev() {
            let x = trace.step_input(k);
            let need_input = k > 0;
            g = match trace.steps[k] {
                Step::Conv(l) => {
                    let f = self.filter_at(l);
                    let [_, oh, ow] = self.shapes[l];
                    let geo = f.geometry();
                    let (gin, gw, gb) = conv_sampled_backward(
                        x,
                        f,
                        Axis::dense(oh, geo),
                        Axis::dense(ow, geo),
                        &g,
                        need_input,
                    )?;
                    grads[slot[l]] = gw;
                    grads[slot[l] + 1] = gb;
                    match gin {
                        Some(t) => t,
                        None => break,
                    }
                }
                Step::VipConv { layer, relu } => {
                    let Cache::Reduced(pre) = &trace.caches[k] else {
                        unreachable!()
                    };
                    let f = self.filter_at(layer);
                    let [_, oh, ow] = self.shapes[layer];
                    let geo = f.geometry();
                    let (_, rh, rw) = pre.chw()?;
                    let mut gr = interpolate_backward(&g, rh, rw)?;
                    if relu {
                        gr = relu_backward(&gr, pre);
                    }
                    let (gin, gw, gb) = conv_sampled_backward(
                        x,
                        f,
                        Axis::doubled(oh, geo),
                        Axis::doubled(ow, geo),
                        &gr,
                        need_input,
                    )?;
                    grads[slot[layer]] = gw;
                    grads[slot[layer] + 1] = gb;
                    match gin {
                        Some(t) => t,
                        None => break,
                    }
                }
                Step::Relu(_) => relu_backward(&g, x),
                Step::Pool(_) => {
                    let Cache::Argmax(arg) = &trace.caches[k] else {
                        unreachable!()
                    };
                    maxpool2x2_backward(&g, arg, x.shape())?
                }
                Step::Dense(l) => {
                    let Layer::Dense(d) = &self.layers[l] else {
                        unreachable!()
                    };
                    let (gin, gw, gb) = d.backward(x.data(), g.data());
                    grads[slot[l]] = gw;
                    grads[slot[l] + 1] = gb;
                    Tensor::new(x.shape().to_vec(), gin)?
                }
                Step::Softmax(_) => {
                    let p = trace.outputs[k].data();
                    let dot: f32 = p.iter().zip(g.data()).map(|(a, b)| a * b).sum();
                    let gin = p.iter().zip(g.data()).map(|(pi, gi)| pi * (gi - dot)).collect();
                    Tensor::new(x.shape().to_vec(), gin)?
                }
            };
        }
        Ok(grads)
    }
}
