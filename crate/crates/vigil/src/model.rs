//! The classifier: a small convolutional backbone (frozen by default) that
//! maps an image to an embedding, and a trainable 2-class linear head with
//! softmax and cross-entropy.
//!
//! Tensors are flat `Vec<f64>` in CHW order; every forward and gradient
//! operation is a pure function, so parameters behave as immutable values.

use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;

use crate::dataset::Label;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng::{self, seeded};

pub const WEIGHTS_MAGIC: &[u8; 5] = b"VGLW1";

/// A CHW feature map; vectors are maps with height = width = 1.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(channels: usize, height: usize, width: usize) -> FeatureMap {
        FeatureMap {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn vector(data: Vec<f64>) -> FeatureMap {
        FeatureMap {
            channels: data.len(),
            height: 1,
            width: 1,
            data,
        }
    }

    #[inline]
    pub fn idx(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    pub fn from_image(image: &Image) -> FeatureMap {
        let (h, w) = (image.height(), image.width());
        let mut map = FeatureMap::zeros(3, h, w);
        for y in 0..h {
            for x in 0..w {
                let px = image.get(y, x);
                for (c, v) in px.iter().enumerate() {
                    let i = map.idx(c, y, x);
                    map.data[i] = *v;
                }
            }
        }
        map
    }
}

/// One backbone layer with its parameters. Convolutions are stride-1;
/// max-pooling uses stride = window size.
#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv {
        out_channels: usize,
        in_channels: usize,
        kernel: usize,
        padding: usize,
        /// [out][in][ky][kx], row-major.
        weights: Vec<f64>,
        bias: Vec<f64>,
    },
    Relu,
    MaxPool {
        size: usize,
    },
    GlobalAvgPool,
    Flatten,
    Dense {
        out_dim: usize,
        in_dim: usize,
        /// [out][in], row-major.
        weights: Vec<f64>,
        bias: Vec<f64>,
    },
}

/// Backbone feature extractor: an ordered layer stack plus the freeze flag.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneParams {
    pub layers: Vec<Layer>,
    pub frozen: bool,
    pub embedding_dim: usize,
    pub input_height: usize,
    pub input_width: usize,
}

impl BackboneParams {
    /// Desk-scale preset: conv(3->8, 3x3, pad 1) -> ReLU -> 2x2 max-pool ->
    /// conv(8->16, 3x3, pad 1) -> ReLU -> 2x2 max-pool -> global average
    /// pool -> linear to embedding_dim 64. Weights from a seeded He
    /// initializer, biases zero.
    pub fn tiny_v1(seed: u64) -> BackboneParams {
        BackboneParams::tiny_v1_with_input(seed, 64, 64)
    }

    /// tiny-v1 with a custom input size (the stack is size-agnostic thanks
    /// to the global average pool; both dimensions must be >= 4).
    pub fn tiny_v1_with_input(seed: u64, height: usize, width: usize) -> BackboneParams {
        assert!(height >= 4 && width >= 4, "tiny-v1 needs >= 4x4 input");
        let mut r = seeded(seed);
        let conv1 = init_conv(&mut r, 8, 3, 3, 1);
        let conv2 = init_conv(&mut r, 16, 8, 3, 1);
        let dense = init_dense(&mut r, 64, 16);
        BackboneParams {
            layers: vec![
                conv1,
                Layer::Relu,
                Layer::MaxPool { size: 2 },
                conv2,
                Layer::Relu,
                Layer::MaxPool { size: 2 },
                Layer::GlobalAvgPool,
                dense,
            ],
            frozen: true,
            embedding_dim: 64,
            input_height: height,
            input_width: width,
        }
    }

    /// Identity test preset: a 1x1 passthrough convolution followed by a
    /// flatten, so the embedding is the image itself in CHW order. Makes
    /// head and saliency gradients analytically checkable.
    pub fn passthrough(height: usize, width: usize) -> BackboneParams {
        let mut weights = vec![0.0; 3 * 3];
        for c in 0..3 {
            weights[c * 3 + c] = 1.0;
        }
        BackboneParams {
            layers: vec![
                Layer::Conv {
                    out_channels: 3,
                    in_channels: 3,
                    kernel: 1,
                    padding: 0,
                    weights,
                    bias: vec![0.0; 3],
                },
                Layer::Flatten,
            ],
            frozen: true,
            embedding_dim: 3 * height * width,
            input_height: height,
            input_width: width,
        }
    }

    /// CRC-32 over the parameter payload; constant while the backbone is
    /// frozen.
    pub fn checksum(&self) -> u32 {
        let mut hasher = crc32fast::Hasher::new();
        for layer in &self.layers {
            if let Layer::Conv { weights, bias, .. } | Layer::Dense { weights, bias, .. } = layer {
                for v in weights.iter().chain(bias.iter()) {
                    hasher.update(&v.to_le_bytes());
                }
            }
        }
        hasher.finalize()
    }
}

fn init_conv(r: &mut ChaCha8Rng, out_channels: usize, in_channels: usize, kernel: usize, padding: usize) -> Layer {
    let fan_in = (in_channels * kernel * kernel) as f64;
    let std = (2.0 / fan_in).sqrt();
    let weights = (0..out_channels * in_channels * kernel * kernel)
        .map(|_| rng::normal(r, 0.0, std))
        .collect();
    Layer::Conv {
        out_channels,
        in_channels,
        kernel,
        padding,
        weights,
        bias: vec![0.0; out_channels],
    }
}

fn init_dense(r: &mut ChaCha8Rng, out_dim: usize, in_dim: usize) -> Layer {
    let std = (2.0 / in_dim as f64).sqrt();
    let weights = (0..out_dim * in_dim).map(|_| rng::normal(r, 0.0, std)).collect();
    Layer::Dense {
        out_dim,
        in_dim,
        weights,
        bias: vec![0.0; out_dim],
    }
}

fn conv_forward(
    out_channels: usize,
    in_channels: usize,
    kernel: usize,
    padding: usize,
    weights: &[f64],
    bias: &[f64],
    input: &FeatureMap,
) -> Result<FeatureMap> {
    if input.channels != in_channels {
        return Err(Error::Shape {
            expected: format!("{in_channels} channels"),
            actual: format!("{} channels", input.channels),
        });
    }
    let out_h = input.height + 2 * padding - kernel + 1;
    let out_w = input.width + 2 * padding - kernel + 1;
    let mut out = FeatureMap::zeros(out_channels, out_h, out_w);
    for oc in 0..out_channels {
        for oy in 0..out_h {
            for ox in 0..out_w {
                let mut acc = bias[oc];
                for ic in 0..in_channels {
                    for ky in 0..kernel {
                        let iy = oy + ky;
                        if iy < padding || iy - padding >= input.height {
                            continue;
                        }
                        for kx in 0..kernel {
                            let ix = ox + kx;
                            if ix < padding || ix - padding >= input.width {
                                continue;
                            }
                            let w = weights[((oc * in_channels + ic) * kernel + ky) * kernel + kx];
                            acc += w * input.data[input.idx(ic, iy - padding, ix - padding)];
                        }
                    }
                }
                let i = out.idx(oc, oy, ox);
                out.data[i] = acc;
            }
        }
    }
    Ok(out)
}

fn layer_forward(layer: &Layer, input: &FeatureMap) -> Result<FeatureMap> {
    match layer {
        Layer::Conv {
            out_channels,
            in_channels,
            kernel,
            padding,
            weights,
            bias,
        } => conv_forward(*out_channels, *in_channels, *kernel, *padding, weights, bias, input),
        Layer::Relu => {
            let mut out = input.clone();
            for v in &mut out.data {
                *v = v.max(0.0);
            }
            Ok(out)
        }
        Layer::MaxPool { size } => {
            let out_h = input.height / size;
            let out_w = input.width / size;
            let mut out = FeatureMap::zeros(input.channels, out_h, out_w);
            for c in 0..input.channels {
                for oy in 0..out_h {
                    for ox in 0..out_w {
                        let mut best = f64::NEG_INFINITY;
                        for dy in 0..*size {
                            for dx in 0..*size {
                                best = best.max(input.data[input.idx(c, oy * size + dy, ox * size + dx)]);
                            }
                        }
                        let i = out.idx(c, oy, ox);
                        out.data[i] = best;
                    }
                }
            }
            Ok(out)
        }
        Layer::GlobalAvgPool => {
            let area = (input.height * input.width) as f64;
            let mut out = FeatureMap::vector(vec![0.0; input.channels]);
            for c in 0..input.channels {
                let mut sum = 0.0;
                for y in 0..input.height {
                    for x in 0..input.width {
                        sum += input.data[input.idx(c, y, x)];
                    }
                }
                out.data[c] = sum / area;
            }
            Ok(out)
        }
        Layer::Flatten => Ok(FeatureMap::vector(input.data.clone())),
        Layer::Dense {
            out_dim,
            in_dim,
            weights,
            bias,
        } => {
            if input.data.len() != *in_dim || input.height != 1 || input.width != 1 {
                return Err(Error::Shape {
                    expected: format!("vector of length {in_dim}"),
                    actual: format!("{}x{}x{}", input.channels, input.height, input.width),
                });
            }
            let mut out = vec![0.0; *out_dim];
            for (o, out_v) in out.iter_mut().enumerate() {
                let mut acc = bias[o];
                for i in 0..*in_dim {
                    acc += weights[o * in_dim + i] * input.data[i];
                }
                *out_v = acc;
            }
            Ok(FeatureMap::vector(out))
        }
    }
}

/// Per-layer input snapshots from a forward pass, for backpropagation.
pub(crate) struct Trace {
    pub inputs: Vec<FeatureMap>,
    pub output: Vec<f64>,
}

pub(crate) fn forward_trace(backbone: &BackboneParams, image: &Image) -> Result<Trace> {
    if image.height() != backbone.input_height || image.width() != backbone.input_width {
        return Err(Error::Shape {
            expected: format!("{}x{}x3 image", backbone.input_height, backbone.input_width),
            actual: format!("{}x{}x3 image", image.height(), image.width()),
        });
    }
    let mut current = FeatureMap::from_image(image);
    let mut inputs = Vec::with_capacity(backbone.layers.len());
    for layer in &backbone.layers {
        let next = layer_forward(layer, &current)?;
        inputs.push(current);
        current = next;
    }
    if current.data.len() != backbone.embedding_dim {
        return Err(Error::Shape {
            expected: format!("embedding of length {}", backbone.embedding_dim),
            actual: format!("length {}", current.data.len()),
        });
    }
    Ok(Trace {
        inputs,
        output: current.data,
    })
}

/// Map an image to its embedding vector.
pub fn embed(backbone: &BackboneParams, image: &Image) -> Result<Vec<f64>> {
    Ok(forward_trace(backbone, image)?.output)
}

/// Gradients of a layer's parameters, aligned with `BackboneParams::layers`.
#[derive(Debug, Clone)]
pub(crate) enum LayerGrads {
    Params { weights: Vec<f64>, bias: Vec<f64> },
    None,
}

fn conv_backward(
    out_channels: usize,
    in_channels: usize,
    kernel: usize,
    padding: usize,
    weights: &[f64],
    input: &FeatureMap,
    d_out: &FeatureMap,
) -> (FeatureMap, LayerGrads) {
    let mut d_in = FeatureMap::zeros(input.channels, input.height, input.width);
    let mut d_w = vec![0.0; weights.len()];
    let mut d_b = vec![0.0; out_channels];
    for (oc, db) in d_b.iter_mut().enumerate() {
        for oy in 0..d_out.height {
            for ox in 0..d_out.width {
                let g = d_out.data[d_out.idx(oc, oy, ox)];
                *db += g;
                for ic in 0..in_channels {
                    for ky in 0..kernel {
                        let iy = oy + ky;
                        if iy < padding || iy - padding >= input.height {
                            continue;
                        }
                        for kx in 0..kernel {
                            let ix = ox + kx;
                            if ix < padding || ix - padding >= input.width {
                                continue;
                            }
                            let wi = ((oc * in_channels + ic) * kernel + ky) * kernel + kx;
                            let ii = input.idx(ic, iy - padding, ix - padding);
                            d_w[wi] += g * input.data[ii];
                            d_in.data[ii] += g * weights[wi];
                        }
                    }
                }
            }
        }
    }
    (
        d_in,
        LayerGrads::Params {
            weights: d_w,
            bias: d_b,
        },
    )
}

fn layer_backward(layer: &Layer, input: &FeatureMap, d_out: &FeatureMap) -> (FeatureMap, LayerGrads) {
    match layer {
        Layer::Conv {
            out_channels,
            in_channels,
            kernel,
            padding,
            weights,
            ..
        } => conv_backward(*out_channels, *in_channels, *kernel, *padding, weights, input, d_out),
        Layer::Relu => {
            let mut d_in = d_out.clone();
            for (g, v) in d_in.data.iter_mut().zip(&input.data) {
                if *v <= 0.0 {
                    *g = 0.0;
                }
            }
            (d_in, LayerGrads::None)
        }
        Layer::MaxPool { size } => {
            let mut d_in = FeatureMap::zeros(input.channels, input.height, input.width);
            for c in 0..d_out.channels {
                for oy in 0..d_out.height {
                    for ox in 0..d_out.width {
                        // route the gradient to the first maximum in scan order
                        let mut best = f64::NEG_INFINITY;
                        let mut best_i = 0;
                        for dy in 0..*size {
                            for dx in 0..*size {
                                let i = input.idx(c, oy * size + dy, ox * size + dx);
                                if input.data[i] > best {
                                    best = input.data[i];
                                    best_i = i;
                                }
                            }
                        }
                        d_in.data[best_i] += d_out.data[d_out.idx(c, oy, ox)];
                    }
                }
            }
            (d_in, LayerGrads::None)
        }
        Layer::GlobalAvgPool => {
            let area = (input.height * input.width) as f64;
            let mut d_in = FeatureMap::zeros(input.channels, input.height, input.width);
            for c in 0..input.channels {
                let g = d_out.data[c] / area;
                for y in 0..input.height {
                    for x in 0..input.width {
                        let i = d_in.idx(c, y, x);
                        d_in.data[i] = g;
                    }
                }
            }
            (d_in, LayerGrads::None)
        }
        Layer::Flatten => {
            let mut d_in = FeatureMap::zeros(input.channels, input.height, input.width);
            d_in.data.copy_from_slice(&d_out.data);
            (d_in, LayerGrads::None)
        }
        Layer::Dense {
            out_dim,
            in_dim,
            weights,
            ..
        } => {
            let mut d_in = FeatureMap::vector(vec![0.0; *in_dim]);
            d_in.channels = input.channels;
            d_in.height = input.height;
            d_in.width = input.width;
            let mut d_w = vec![0.0; weights.len()];
            let mut d_b = vec![0.0; *out_dim];
            for o in 0..*out_dim {
                let g = d_out.data[o];
                d_b[o] = g;
                for i in 0..*in_dim {
                    d_w[o * in_dim + i] = g * input.data[i];
                    d_in.data[i] += g * weights[o * in_dim + i];
                }
            }
            (
                d_in,
                LayerGrads::Params {
                    weights: d_w,
                    bias: d_b,
                },
            )
        }
    }
}

/// Backpropagate a gradient w.r.t. the embedding down to the input image,
/// collecting per-layer parameter gradients on the way.
pub(crate) fn backward_trace(
    backbone: &BackboneParams,
    trace: &Trace,
    d_embedding: &[f64],
) -> (FeatureMap, Vec<LayerGrads>) {
    let mut d_current = FeatureMap::vector(d_embedding.to_vec());
    let mut grads = vec![LayerGrads::None; backbone.layers.len()];
    for (i, layer) in backbone.layers.iter().enumerate().rev() {
        let (d_in, layer_grads) = layer_backward(layer, &trace.inputs[i], &d_current);
        grads[i] = layer_grads;
        d_current = d_in;
    }
    (d_current, grads)
}

/// Trainable 2-class linear head: logits = weights' * embedding + bias,
/// with the weight matrix stored embedding_dim x 2 row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub embedding_dim: usize,
    pub weights: Vec<f64>,
    pub bias: [f64; 2],
}

impl HeadParams {
    pub fn zeros(embedding_dim: usize) -> HeadParams {
        HeadParams {
            embedding_dim,
            weights: vec![0.0; embedding_dim * 2],
            bias: [0.0; 2],
        }
    }

    pub fn seeded(embedding_dim: usize, seed: u64) -> HeadParams {
        let mut r = seeded(seed);
        let std = (1.0 / embedding_dim as f64).sqrt();
        HeadParams {
            embedding_dim,
            weights: (0..embedding_dim * 2).map(|_| rng::normal(&mut r, 0.0, std)).collect(),
            bias: [0.0; 2],
        }
    }

    #[inline]
    pub fn weight(&self, dim: usize, class: usize) -> f64 {
        self.weights[dim * 2 + class]
    }
}

/// One forward pass through the head.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub embedding: Vec<f64>,
    pub logits: [f64; 2],
    pub probabilities: [f64; 2],
}

/// Numerically stable two-class softmax (max subtraction).
pub fn softmax2(logits: [f64; 2]) -> [f64; 2] {
    let m = logits[0].max(logits[1]);
    let e = [(logits[0] - m).exp(), (logits[1] - m).exp()];
    let sum = e[0] + e[1];
    [e[0] / sum, e[1] / sum]
}

pub fn head_forward(head: &HeadParams, embedding: &[f64]) -> Result<ForwardTrace> {
    if embedding.len() != head.embedding_dim {
        return Err(Error::Shape {
            expected: format!("embedding of length {}", head.embedding_dim),
            actual: format!("length {}", embedding.len()),
        });
    }
    let mut logits = head.bias;
    for (d, v) in embedding.iter().enumerate() {
        logits[0] += head.weight(d, 0) * v;
        logits[1] += head.weight(d, 1) * v;
    }
    Ok(ForwardTrace {
        embedding: embedding.to_vec(),
        logits,
        probabilities: softmax2(logits),
    })
}

/// Cross-entropy of the true class, with the probability clamped at 1e-12.
pub fn cross_entropy(probabilities: &[f64; 2], true_label: Label) -> f64 {
    -probabilities[true_label.class_index()].max(1e-12).ln()
}

/// Analytic gradient of cross_entropy(head_forward(...)) w.r.t. the head:
/// bias_grad = probabilities - onehot(true), weight_grad = embedding (x)
/// bias_grad.
pub fn head_gradient(
    head: &HeadParams,
    embedding: &[f64],
    true_label: Label,
) -> Result<(Vec<f64>, [f64; 2])> {
    let trace = head_forward(head, embedding)?;
    let mut bias_grad = trace.probabilities;
    bias_grad[true_label.class_index()] -= 1.0;
    let mut weight_grad = vec![0.0; head.embedding_dim * 2];
    for (d, v) in embedding.iter().enumerate() {
        weight_grad[d * 2] = v * bias_grad[0];
        weight_grad[d * 2 + 1] = v * bias_grad[1];
    }
    Ok((weight_grad, bias_grad))
}

/// Decision rule shared by predict, evaluation and the galleries: argmax
/// probability, ties broken toward abandoned.
pub fn decide(probabilities: &[f64; 2]) -> (Label, f64) {
    if probabilities[Label::Abandoned.class_index()] >= probabilities[Label::Background.class_index()] {
        (Label::Abandoned, probabilities[Label::Abandoned.class_index()])
    } else {
        (Label::Background, probabilities[Label::Background.class_index()])
    }
}

/// Classify one image: (label, confidence), confidence = max probability.
pub fn predict(backbone: &BackboneParams, head: &HeadParams, image: &Image) -> Result<(Label, f64)> {
    let embedding = embed(backbone, image)?;
    let trace = head_forward(head, &embedding)?;
    Ok(decide(&trace.probabilities))
}

// ---------------------------------------------------------------------------
// Weights file: magic "VGLW1", little-endian payload (dimension headers and
// f64 parameters), trailing CRC-32 over the payload.

struct ByteWriter {
    buf: Vec<u8>,
}

impl ByteWriter {
    fn new() -> ByteWriter {
        ByteWriter { buf: Vec::new() }
    }

    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u128(&mut self, v: u128) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f64s(&mut self, vs: &[f64]) {
        for v in vs {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> ByteReader<'a> {
    fn new(buf: &'a [u8], path: &'a Path) -> ByteReader<'a> {
        ByteReader { buf, pos: 0, path }
    }

    fn corrupt(&self, message: impl Into<String>) -> Error {
        Error::CorruptWeights {
            path: self.path.to_path_buf(),
            message: message.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(self.corrupt("truncated file"));
        }
        let slice = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n * 8)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

/// Cap on serialized dimension fields; rejects absurd headers before any
/// allocation.
const MAX_DIM: u32 = 1 << 24;

fn write_backbone(w: &mut ByteWriter, backbone: &BackboneParams) {
    w.u32(backbone.embedding_dim as u32);
    w.u32(backbone.input_height as u32);
    w.u32(backbone.input_width as u32);
    w.u8(u8::from(backbone.frozen));
    w.u32(backbone.layers.len() as u32);
    for layer in &backbone.layers {
        match layer {
            Layer::Conv {
                out_channels,
                in_channels,
                kernel,
                padding,
                weights,
                bias,
            } => {
                w.u8(0);
                w.u32(*out_channels as u32);
                w.u32(*in_channels as u32);
                w.u32(*kernel as u32);
                w.u32(*padding as u32);
                w.f64s(weights);
                w.f64s(bias);
            }
            Layer::Relu => w.u8(1),
            Layer::MaxPool { size } => {
                w.u8(2);
                w.u32(*size as u32);
            }
            Layer::GlobalAvgPool => w.u8(3),
            Layer::Flatten => w.u8(4),
            Layer::Dense {
                out_dim,
                in_dim,
                weights,
                bias,
            } => {
                w.u8(5);
                w.u32(*out_dim as u32);
                w.u32(*in_dim as u32);
                w.f64s(weights);
                w.f64s(bias);
            }
        }
    }
}

fn write_head(w: &mut ByteWriter, head: &HeadParams) {
    w.u32(head.embedding_dim as u32);
    w.f64s(&head.weights);
    w.f64s(&head.bias);
}

fn read_dim(r: &mut ByteReader, what: &str) -> Result<usize> {
    let v = r.u32()?;
    if v > MAX_DIM {
        return Err(r.corrupt(format!("implausible {what} {v}")));
    }
    Ok(v as usize)
}

fn read_backbone(r: &mut ByteReader) -> Result<BackboneParams> {
    let embedding_dim = read_dim(r, "embedding_dim")?;
    let input_height = read_dim(r, "input_height")?;
    let input_width = read_dim(r, "input_width")?;
    let frozen = r.u8()? != 0;
    let layer_count = read_dim(r, "layer count")?;
    let mut layers = Vec::with_capacity(layer_count);
    for _ in 0..layer_count {
        let tag = r.u8()?;
        layers.push(match tag {
            0 => {
                let out_channels = read_dim(r, "out_channels")?;
                let in_channels = read_dim(r, "in_channels")?;
                let kernel = read_dim(r, "kernel")?;
                let padding = read_dim(r, "padding")?;
                let weights = r.f64s(out_channels * in_channels * kernel * kernel)?;
                let bias = r.f64s(out_channels)?;
                Layer::Conv {
                    out_channels,
                    in_channels,
                    kernel,
                    padding,
                    weights,
                    bias,
                }
            }
            1 => Layer::Relu,
            2 => Layer::MaxPool {
                size: read_dim(r, "pool size")?,
            },
            3 => Layer::GlobalAvgPool,
            4 => Layer::Flatten,
            5 => {
                let out_dim = read_dim(r, "out_dim")?;
                let in_dim = read_dim(r, "in_dim")?;
                let weights = r.f64s(out_dim * in_dim)?;
                let bias = r.f64s(out_dim)?;
                Layer::Dense {
                    out_dim,
                    in_dim,
                    weights,
                    bias,
                }
            }
            other => return Err(r.corrupt(format!("unknown layer tag {other}"))),
        });
    }
    Ok(BackboneParams {
        layers,
        frozen,
        embedding_dim,
        input_height,
        input_width,
    })
}

fn read_head(r: &mut ByteReader) -> Result<HeadParams> {
    let embedding_dim = read_dim(r, "head embedding_dim")?;
    let weights = r.f64s(embedding_dim * 2)?;
    let bias = r.f64s(2)?;
    Ok(HeadParams {
        embedding_dim,
        weights,
        bias: [bias[0], bias[1]],
    })
}

pub(crate) fn encode_weights(backbone: &BackboneParams, head: &HeadParams) -> Vec<u8> {
    let mut w = ByteWriter::new();
    write_backbone(&mut w, backbone);
    write_head(&mut w, head);
    finish_payload(WEIGHTS_MAGIC, w.buf)
}

fn finish_payload(magic: &[u8; 5], payload: Vec<u8>) -> Vec<u8> {
    let crc = crc32fast::hash(&payload);
    let mut out = Vec::with_capacity(5 + payload.len() + 4);
    out.extend_from_slice(magic);
    out.extend_from_slice(&payload);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

/// Strip and verify magic + CRC; returns the payload.
fn open_payload<'a>(bytes: &'a [u8], magic: &[u8; 5], path: &Path) -> Result<&'a [u8]> {
    let corrupt = |message: &str| Error::CorruptWeights {
        path: path.to_path_buf(),
        message: message.into(),
    };
    if bytes.len() < 5 + 4 {
        return Err(corrupt("truncated file"));
    }
    if &bytes[..5] != magic {
        return Err(corrupt("bad magic"));
    }
    let payload = &bytes[5..bytes.len() - 4];
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    if crc32fast::hash(payload) != stored {
        return Err(corrupt("checksum mismatch"));
    }
    Ok(payload)
}

pub fn save_weights(backbone: &BackboneParams, head: &HeadParams, path: &Path) -> Result<()> {
    if head.embedding_dim != backbone.embedding_dim {
        return Err(Error::InvalidArgument(format!(
            "head expects embedding_dim {}, backbone produces {}",
            head.embedding_dim, backbone.embedding_dim
        )));
    }
    fs::write(path, encode_weights(backbone, head)).map_err(|e| Error::io(path, e))
}

pub fn load_weights(path: &Path) -> Result<(BackboneParams, HeadParams)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let payload = open_payload(&bytes, WEIGHTS_MAGIC, path)?;
    let mut r = ByteReader::new(payload, path);
    let backbone = read_backbone(&mut r)?;
    let head = read_head(&mut r)?;
    if !r.done() {
        return Err(r.corrupt("trailing bytes after parameters"));
    }
    if head.embedding_dim != backbone.embedding_dim {
        return Err(Error::DimensionMismatch {
            path: path.to_path_buf(),
            expected: backbone.embedding_dim,
            actual: head.embedding_dim,
        });
    }
    Ok((backbone, head))
}

// Checkpoint serialization lives here too so the byte-level helpers stay
// private; the train module owns the checkpoint semantics.

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"VGLC1";

pub(crate) struct CheckpointBlob {
    pub total_steps: u64,
    pub initial_lr: f64,
    pub lr_decay: f64,
    pub decay_interval_steps: u64,
    pub batch_size: u64,
    pub eval_interval_steps: u64,
    pub seed: u64,
    pub freeze_backbone: bool,
    pub step: u64,
    pub rng_seed: u64,
    pub rng_stream: u64,
    pub rng_word_pos: u128,
    pub backbone: BackboneParams,
    pub head: HeadParams,
}

pub(crate) fn encode_checkpoint(blob: &CheckpointBlob) -> Vec<u8> {
    let mut w = ByteWriter::new();
    w.u64(blob.total_steps);
    w.f64s(&[blob.initial_lr, blob.lr_decay]);
    w.u64(blob.decay_interval_steps);
    w.u64(blob.batch_size);
    w.u64(blob.eval_interval_steps);
    w.u64(blob.seed);
    w.u8(u8::from(blob.freeze_backbone));
    w.u64(blob.step);
    w.u64(blob.rng_seed);
    w.u64(blob.rng_stream);
    w.u128(blob.rng_word_pos);
    write_backbone(&mut w, &blob.backbone);
    write_head(&mut w, &blob.head);
    finish_payload(CHECKPOINT_MAGIC, w.buf)
}

pub(crate) fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<CheckpointBlob> {
    let payload = open_payload(bytes, CHECKPOINT_MAGIC, path)?;
    let mut r = ByteReader::new(payload, path);
    let total_steps = r.u64()?;
    let lrs = r.f64s(2)?;
    let decay_interval_steps = r.u64()?;
    let batch_size = r.u64()?;
    let eval_interval_steps = r.u64()?;
    let seed = r.u64()?;
    let freeze_backbone = r.u8()? != 0;
    let step = r.u64()?;
    let rng_seed = r.u64()?;
    let rng_stream = r.u64()?;
    let rng_word_pos = r.u128()?;
    let backbone = read_backbone(&mut r)?;
    let head = read_head(&mut r)?;
    if !r.done() {
        return Err(r.corrupt("trailing bytes after parameters"));
    }
    Ok(CheckpointBlob {
        total_steps,
        initial_lr: lrs[0],
        lr_decay: lrs[1],
        decay_interval_steps,
        batch_size,
        eval_interval_steps,
        seed,
        freeze_backbone,
        step,
        rng_seed,
        rng_stream,
        rng_word_pos,
        backbone,
        head,
    })
}
