//! Model directories: `manifest.json` describing the layers and
//! `weights.bin` holding every parameter as little-endian `f32`.
//!
//! Parameters are written in layer order. Conv weights are laid out
//! `[out][in][row][col]`, dense weights `[out][in]`; each layer's bias
//! follows its weights. The manifest records the byte offset and value
//! count of every buffer.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{ConvFilter, ConvGeometry, DenseLayer};
use crate::network::{Layer, Network};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const WEIGHTS_FILE: &str = "weights.bin";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub format_version: u32,
    pub name: String,
    pub input_shape: [usize; 3],
    pub classes: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_mean: Option<Vec<f32>>,
    pub weights_file: String,
    pub weights_bytes: u64,
    pub layers: Vec<LayerEntry>,
}

/// Location of one parameter buffer inside `weights.bin`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub offset: u64,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerEntry {
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        vip: bool,
        output_shape: [usize; 3],
        weights: Span,
        bias: Span,
    },
    Relu,
    #[serde(rename = "maxpool2x2")]
    MaxPool2x2,
    Dense {
        in_features: usize,
        out_features: usize,
        weights: Span,
        bias: Span,
    },
    Softmax,
}

fn push(buf: &mut Vec<u8>, values: &[f32]) -> Span {
    let span = Span {
        offset: buf.len() as u64,
        len: values.len(),
    };
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    span
}

/// Serialize to `(manifest, weights.bin bytes)`.
pub fn encode(net: &Network) -> (ModelManifest, Vec<u8>) {
    let mut buf = Vec::with_capacity(net.param_count() * 4);
    let layers = net
        .layers()
        .iter()
        .enumerate()
        .map(|(i, l)| match l {
            Layer::Conv { filter, vip } => {
                let g = filter.geometry();
                LayerEntry::Conv {
                    in_channels: g.in_channels,
                    out_channels: g.out_channels,
                    kernel: g.kernel,
                    stride: g.stride,
                    padding: g.padding,
                    vip: *vip,
                    output_shape: net.output_shape(i),
                    weights: push(&mut buf, filter.weights().data()),
                    bias: push(&mut buf, filter.bias()),
                }
            }
            Layer::Relu => LayerEntry::Relu,
            Layer::MaxPool2x2 => LayerEntry::MaxPool2x2,
            Layer::Dense(d) => LayerEntry::Dense {
                in_features: d.in_features,
                out_features: d.out_features,
                weights: push(&mut buf, &d.weights),
                bias: push(&mut buf, &d.bias),
            },
            Layer::Softmax => LayerEntry::Softmax,
        })
        .collect();
    let manifest = ModelManifest {
        format_version: FORMAT_VERSION,
        name: net.name().to_string(),
        input_shape: net.input_shape(),
        classes: net.classes(),
        input_mean: net.input_mean().map(<[f32]>::to_vec),
        weights_file: WEIGHTS_FILE.to_string(),
        weights_bytes: buf.len() as u64,
        layers,
    };
    (manifest, buf)
}

fn read_span(bytes: &[u8], span: Span) -> Result<Vec<f32>> {
    let start = span.offset as usize;
    let end = start + span.len * 4;
    if !start.is_multiple_of(4) || end > bytes.len() {
        return Err(Error::Model(format!(
            "buffer at byte {start} with {} values is outside the {}-byte weights file",
            span.len,
            bytes.len()
        )));
    }
    Ok(bytes[start..end]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub fn decode(manifest: &ModelManifest, weights: &[u8]) -> Result<Network> {
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Model(format!("unsupported format version {}", manifest.format_version)));
    }
    if manifest.weights_bytes != weights.len() as u64 {
        return Err(Error::Model(format!(
            "manifest expects {} weight bytes, file has {}",
            manifest.weights_bytes,
            weights.len()
        )));
    }
    let model_err = |e: Error| Error::Model(e.to_string());
    let mut layers = Vec::with_capacity(manifest.layers.len());
    for entry in &manifest.layers {
        layers.push(match entry {
            LayerEntry::Conv {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
                vip,
                weights: ws,
                bias: bs,
                ..
            } => {
                let g = ConvGeometry::new(*in_channels, *out_channels, *kernel, *stride, *padding).map_err(model_err)?;
                let filter = ConvFilter::new(g, read_span(weights, *ws)?, read_span(weights, *bs)?).map_err(model_err)?;
                Layer::Conv { filter, vip: *vip }
            }
            LayerEntry::Relu => Layer::Relu,
            LayerEntry::MaxPool2x2 => Layer::MaxPool2x2,
            LayerEntry::Dense {
                in_features,
                out_features,
                weights: ws,
                bias: bs,
            } => Layer::Dense(
                DenseLayer::new(*in_features, *out_features, read_span(weights, *ws)?, read_span(weights, *bs)?)
                    .map_err(model_err)?,
            ),
            LayerEntry::Softmax => Layer::Softmax,
        });
    }
    let mut net = Network::new(manifest.name.clone(), manifest.input_shape, manifest.classes, layers).map_err(model_err)?;
    for (i, entry) in manifest.layers.iter().enumerate() {
        if let LayerEntry::Conv { output_shape, .. } = entry {
            if *output_shape != net.output_shape(i) {
                return Err(Error::Model(format!(
                    "layer {i}: manifest output shape {output_shape:?} disagrees with computed {:?}",
                    net.output_shape(i)
                )));
            }
        }
    }
    net.set_input_mean(manifest.input_mean.clone());
    Ok(net)
}

pub fn save_model(net: &Network, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let (manifest, weights) = encode(net);
    fs::write(dir.join(WEIGHTS_FILE), weights)?;
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn load_model(dir: &Path) -> Result<Network> {
    let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let manifest: ModelManifest =
        serde_json::from_str(&text).map_err(|e| Error::Model(format!("{MANIFEST_FILE}: {e}")))?;
    let weights = fs::read(dir.join(&manifest.weights_file))?;
    decode(&manifest, &weights)
}
