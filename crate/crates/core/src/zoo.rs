//! Network builders used by the experiments.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::layers::{ConvFilter, ConvGeometry, DenseLayer};
use crate::network::{Layer, Network};
use crate::tensor::Tensor;
use crate::trainer::init_weights;

/// Four-conv reference network for 3x32x32 inputs:
/// `conv8-relu-conv16-relu-pool-conv32-relu-pool-conv32-relu-dense-softmax`,
/// all convs 3x3 with "same" padding. Weights are fan-in initialized.
pub fn reference_net(input_shape: [usize; 3], classes: usize, seed: u64) -> Result<Network> {
    let [c, h, w] = input_shape;
    let conv = |i, o| -> Result<Layer> { Ok(Layer::conv(ConvFilter::zeros(ConvGeometry::same(i, o, 3)?))) };
    let mut net = Network::new(
        "reference-4conv",
        input_shape,
        classes,
        vec![
            conv(c, 8)?,
            Layer::Relu,
            conv(8, 16)?,
            Layer::Relu,
            Layer::MaxPool2x2,
            conv(16, 32)?,
            Layer::Relu,
            Layer::MaxPool2x2,
            conv(32, 32)?,
            Layer::Relu,
            Layer::Dense(DenseLayer::zeros(32 * (h / 4) * (w / 4), classes)),
            Layer::Softmax,
        ],
    )?;
    init_weights(&mut net, seed);
    Ok(net)
}

/// Conv geometries of VGG16 at 224x224 with their stride-1 output sizes.
pub fn vgg16_convs() -> Vec<(ConvGeometry, usize, usize)> {
    let plan: [(usize, usize, usize); 13] = [
        (3, 64, 224),
        (64, 64, 224),
        (64, 128, 112),
        (128, 128, 112),
        (128, 256, 56),
        (256, 256, 56),
        (256, 256, 56),
        (256, 512, 28),
        (512, 512, 28),
        (512, 512, 28),
        (512, 512, 14),
        (512, 512, 14),
        (512, 512, 14),
    ];
    plan.iter()
        .map(|&(i, o, s)| (ConvGeometry::same(i, o, 3).expect("valid"), s, s))
        .collect()
}

/// A random conv-only network with a random input, for checking the
/// output-error bound. 2 to 4 stride-1 "same" convs with 1 to 6 channels,
/// kernels of 1, 3 or 5, even spatial extents from 6 to 16, and ReLU after
/// every conv or after none.
pub fn random_conv_net(seed: u64) -> Result<(Network, Tensor)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let depth = rng.random_range(2..=4);
    let with_relu = rng.random_bool(0.5);
    let h = 2 * rng.random_range(3..=8);
    let w = 2 * rng.random_range(3..=8);
    let mut c = rng.random_range(1..=4);
    let input_shape = [c, h, w];
    let mut layers = Vec::new();
    for _ in 0..depth {
        let co = rng.random_range(1..=6);
        let k = [1, 3, 3, 5][rng.random_range(0..4)];
        let g = ConvGeometry::same(c, co, k)?;
        let lim = (6.0 / g.fan_in() as f32).sqrt();
        let wts = (0..g.weight_len()).map(|_| rng.random_range(-lim..lim)).collect();
        let bias = (0..co).map(|_| rng.random_range(-0.1..0.1)).collect();
        layers.push(Layer::conv(ConvFilter::new(g, wts, bias)?));
        if with_relu {
            layers.push(Layer::Relu);
        }
        c = co;
    }
    let net = Network::new(format!("bound-trial-{seed}"), input_shape, c * h * w, layers)?;
    let input = Tensor::from_fn(&input_shape, |_| rng.random_range(-1.0..1.0));
    Ok((net, input))
}
