//! Layered binarized CNN with manual backpropagation.
//!
//! Convolution and linear layers are the matrix-vector (MVM) layers that map
//! onto crossbars. Spatial dropout is attached to the *input* of an MVM layer;
//! the mask is applied unscaled, and the `1 / (1 - rho)` factor multiplies the
//! MVM result. By linearity this equals scaling the kept inputs, and it keeps
//! the reference engine and the crossbar simulator bit-identical.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dropout::{
    apply_spatial_dropout_per_sample, keep_scale, sample_spatial_mask, stream_rng, DropoutPlacement,
    HyperParams, PlacementMode, SpatialMask,
};
use crate::error::{Error, Result};
use crate::tensor::{
    adaptive_avgpool_backward, adaptive_avgpool_to_1x1, avgpool2d, avgpool2d_backward, batchnorm_backward,
    batchnorm_eval, batchnorm_train, binarize, conv2d_backward, conv2d_raw, normalize_weights, sign_activation,
    sign_backward, ste_backward, BatchNormCache, ConvGeometry, ConvWeight, Tensor4, STE_CLIP,
};

/// Scale of the input quantizer: pixels in [0, 1] map to the integer grid 0..=255.
pub const INPUT_LEVELS: f64 = 255.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvLayer {
    pub weight: ConvWeight,
    pub binary: bool,
}

/// Fully connected layer consuming a (C, H, W) feature volume flattened in
/// channel-major order. Weights are (out, C·H·W) row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearLayer {
    pub in_shape: [usize; 3],
    pub out: usize,
    pub proxy: Vec<f64>,
    pub binary: bool,
}

impl LinearLayer {
    pub fn in_features(&self) -> usize {
        self.in_shape.iter().product()
    }

    /// The same weights viewed as a convolution with an H×W kernel over the
    /// input volume (requires a square input).
    pub fn as_conv(&self) -> Result<ConvWeight> {
        let [c, h, w] = self.in_shape;
        if h != w {
            return Err(Error::Config(format!(
                "linear layer over a non-square {h}x{w} input cannot be mapped as a convolution"
            )));
        }
        ConvWeight::new(
            ConvGeometry { c_out: self.out, c_in: c, k: h, stride: 1, padding: 0 },
            self.proxy.clone(),
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchNormLayer {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
}

impl BatchNormLayer {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Layer {
    /// `x -> round(x * levels)`; puts real pixels on an integer grid.
    InputQuant { levels: f64 },
    Conv(ConvLayer),
    Linear(LinearLayer),
    BatchNorm(BatchNormLayer),
    Sign,
    AvgPool { k: usize },
    AdaptiveAvgPool,
}

impl Layer {
    pub fn is_mvm(&self) -> bool {
        matches!(self, Layer::Conv(_) | Layer::Linear(_))
    }

    pub fn name(&self) -> &'static str {
        match self {
            Layer::InputQuant { .. } => "input-quant",
            Layer::Conv(_) => "conv",
            Layer::Linear(_) => "linear",
            Layer::BatchNorm(_) => "batchnorm",
            Layer::Sign => "sign",
            Layer::AvgPool { .. } => "avgpool",
            Layer::AdaptiveAvgPool => "adaptive-avgpool",
        }
    }

    /// Proxy weights of an MVM layer.
    pub fn proxy(&self) -> Option<&[f64]> {
        match self {
            Layer::Conv(c) => Some(&c.weight.proxy),
            Layer::Linear(l) => Some(&l.proxy),
            _ => None,
        }
    }

    /// Weights actually used in the forward pass: the normalized sign view for
    /// binary layers, the proxy otherwise.
    pub fn effective_weights(&self) -> Option<Vec<f64>> {
        let (proxy, binary) = match self {
            Layer::Conv(c) => (&c.weight.proxy, c.binary),
            Layer::Linear(l) => (&l.proxy, l.binary),
            _ => return None,
        };
        Some(if binary {
            binarize(&normalize_weights(proxy)).to_f64()
        } else {
            proxy.clone()
        })
    }
}

/// Supplies spatial masks for the inputs of MVM layers.
pub trait MaskSource {
    /// Masks for MVM layer `layer` (one per sample), or `None` when dropout is
    /// inactive for this pass.
    fn masks(&mut self, layer: usize, batch: usize, channels: usize, rho: f64) -> Result<Option<Vec<SpatialMask>>>;
}

/// Dropout disabled: the deterministic expectation network.
pub struct NoDropout;

impl MaskSource for NoDropout {
    fn masks(&mut self, _: usize, _: usize, _: usize, _: f64) -> Result<Option<Vec<SpatialMask>>> {
        Ok(None)
    }
}

/// Counter-based masks: sample `b` of the batch draws from
/// `stream_rng(seed, [run, layer, sample_offset + b])`.
#[derive(Clone, Debug)]
pub struct SeededMasks {
    pub seed: u64,
    pub run: u64,
    pub sample_offset: u64,
}

impl SeededMasks {
    pub fn new(seed: u64, run: u64, sample_offset: u64) -> Self {
        Self { seed, run, sample_offset }
    }
}

impl MaskSource for SeededMasks {
    fn masks(&mut self, layer: usize, batch: usize, channels: usize, rho: f64) -> Result<Option<Vec<SpatialMask>>> {
        (0..batch)
            .map(|b| {
                let mut rng = stream_rng(self.seed, &[self.run, layer as u64, self.sample_offset + b as u64]);
                sample_spatial_mask(channels, rho, &mut rng)
            })
            .collect::<Result<Vec<_>>>()
            .map(Some)
    }
}

/// Explicit per-layer masks, shared by every sample of the batch.
#[derive(Clone, Debug, Default)]
pub struct FixedMasks(pub BTreeMap<usize, SpatialMask>);

impl MaskSource for FixedMasks {
    fn masks(&mut self, layer: usize, batch: usize, channels: usize, _: f64) -> Result<Option<Vec<SpatialMask>>> {
        match self.0.get(&layer) {
            None => Ok(None),
            Some(m) if m.len() != channels => Err(Error::dims("fixed mask length", &[channels], &[m.len()])),
            Some(m) => Ok(Some(vec![m.clone(); batch])),
        }
    }
}

enum TapeEntry {
    Passthrough,
    Mvm {
        input: Tensor4,
        masks: Option<Vec<SpatialMask>>,
        scale: f64,
        weights: Vec<f64>,
    },
    BatchNorm(BatchNormCache),
    Sign { input: Tensor4 },
    AvgPool { input_dims: [usize; 4], k: usize },
    AdaptiveAvgPool { input_dims: [usize; 4] },
}

/// Activations cached by a training-mode forward pass.
pub struct Tape {
    entries: Vec<TapeEntry>,
}

impl Tape {
    /// Batch mean/variance of every batch-norm layer, keyed by layer index.
    pub fn batch_stats(&self) -> impl Iterator<Item = (usize, &[f64], &[f64])> {
        self.entries.iter().enumerate().filter_map(|(i, e)| match e {
            TapeEntry::BatchNorm(c) => Some((i, c.mean.as_slice(), c.var.as_slice())),
            _ => None,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    ProxyWeight,
    BnGamma,
    BnBeta,
}

/// Gradients in [`BinaryConvNet::params`] order.
#[derive(Clone, Debug)]
pub struct Gradients(pub Vec<Vec<f64>>);

/// Topology of the desk-scale LeNet-style network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LenetSpec {
    pub in_channels: usize,
    pub in_size: usize,
    pub classes: usize,
    pub conv1: usize,
    pub conv2: usize,
    pub hidden: usize,
}

impl Default for LenetSpec {
    fn default() -> Self {
        Self { in_channels: 1, in_size: 28, classes: 10, conv1: 8, conv2: 16, hidden: 64 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinaryConvNet {
    pub input_dims: [usize; 3],
    pub classes: usize,
    pub layers: Vec<Layer>,
    pub placement: DropoutPlacement,
    pub hyper: HyperParams,
}

fn uniform_init<R: Rng>(rng: &mut R, len: usize, fan_in: usize) -> Vec<f64> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    (0..len).map(|_| rng.random_range(-bound..bound)).collect()
}

impl BinaryConvNet {
    /// Two binary conv blocks (conv → avgpool → BN → sign) followed by a
    /// binary hidden linear layer and a binary classifier whose outputs are
    /// batch-normalized into real-valued logits.
    pub fn lenet(spec: &LenetSpec, mode: PlacementMode, hyper: HyperParams, seed: u64) -> Result<Self> {
        hyper.validate()?;
        let mut rng = stream_rng(seed, &[u64::MAX]);
        let g1 = ConvGeometry { c_out: spec.conv1, c_in: spec.in_channels, k: 5, stride: 1, padding: 0 };
        let (h1, _) = g1
            .output_hw(spec.in_size, spec.in_size)
            .ok_or_else(|| Error::Config(format!("input size {} too small", spec.in_size)))?;
        let p1 = h1 / 2;
        let g2 = ConvGeometry { c_out: spec.conv2, c_in: spec.conv1, k: 3, stride: 1, padding: 0 };
        let (h2, _) = g2
            .output_hw(p1, p1)
            .ok_or_else(|| Error::Config(format!("input size {} too small", spec.in_size)))?;
        let p2 = h2 / 2;
        if p2 == 0 {
            return Err(Error::Config(format!("input size {} too small", spec.in_size)));
        }
        let feat = [spec.conv2, p2, p2];
        let layers = vec![
            Layer::InputQuant { levels: INPUT_LEVELS },
            Layer::Conv(ConvLayer {
                weight: ConvWeight::new(g1, uniform_init(&mut rng, g1.weight_len(), g1.c_in * 25))?,
                binary: true,
            }),
            Layer::AvgPool { k: 2 },
            Layer::BatchNorm(BatchNormLayer::new(spec.conv1)),
            Layer::Sign,
            Layer::Conv(ConvLayer {
                weight: ConvWeight::new(g2, uniform_init(&mut rng, g2.weight_len(), g2.c_in * 9))?,
                binary: true,
            }),
            Layer::AvgPool { k: 2 },
            Layer::BatchNorm(BatchNormLayer::new(spec.conv2)),
            Layer::Sign,
            Layer::Linear(LinearLayer {
                in_shape: feat,
                out: spec.hidden,
                proxy: uniform_init(&mut rng, spec.hidden * feat.iter().product::<usize>(), feat.iter().product()),
                binary: true,
            }),
            Layer::BatchNorm(BatchNormLayer::new(spec.hidden)),
            Layer::Sign,
            Layer::Linear(LinearLayer {
                in_shape: [spec.hidden, 1, 1],
                out: spec.classes,
                proxy: uniform_init(&mut rng, spec.classes * spec.hidden, spec.hidden),
                binary: true,
            }),
            Layer::BatchNorm(BatchNormLayer::new(spec.classes)),
        ];
        let targets = match mode {
            // final block: the last convolution
            PlacementMode::LayerWise => vec![5],
            // extracted features entering the classifier
            PlacementMode::TopologyWise => vec![9],
        };
        let net = Self {
            input_dims: [spec.in_channels, spec.in_size, spec.in_size],
            classes: spec.classes,
            layers,
            placement: DropoutPlacement { mode, targets },
            hyper,
        };
        net.validate()?;
        Ok(net)
    }

    /// Builds a network from an explicit layer list and checks that shapes
    /// compose.
    pub fn from_layers(
        input_dims: [usize; 3],
        layers: Vec<Layer>,
        placement: DropoutPlacement,
        hyper: HyperParams,
    ) -> Result<Self> {
        let mut net = Self { input_dims, classes: 0, layers, placement, hyper };
        let out = net.output_shape()?;
        net.classes = out.iter().product();
        net.validate()?;
        Ok(net)
    }

    /// Shape of each layer's output for a single sample.
    pub fn layer_shapes(&self) -> Result<Vec<[usize; 3]>> {
        let mut shape = self.input_dims;
        let mut shapes = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            shape = match layer {
                Layer::InputQuant { .. } | Layer::Sign => shape,
                Layer::Conv(c) => {
                    let g = &c.weight.geometry;
                    if g.c_in != shape[0] {
                        return Err(Error::dims("conv input channels", &shape, &[g.c_in]));
                    }
                    let (h, w) = g
                        .output_hw(shape[1], shape[2])
                        .ok_or_else(|| Error::dims("conv output would be empty", &shape, &[g.k]))?;
                    [g.c_out, h, w]
                }
                Layer::Linear(l) => {
                    if l.in_shape != shape {
                        return Err(Error::dims("linear input shape", &shape, &l.in_shape));
                    }
                    if l.proxy.len() != l.out * l.in_features() {
                        return Err(Error::dims("linear weight length", &[l.out, l.in_features()], &[l.proxy.len()]));
                    }
                    [l.out, 1, 1]
                }
                Layer::BatchNorm(bn) => {
                    if bn.gamma.len() != shape[0] {
                        return Err(Error::dims("batchnorm channels", &shape, &[bn.gamma.len()]));
                    }
                    shape
                }
                Layer::AvgPool { k } => {
                    if *k == 0 || shape[1] < *k || shape[2] < *k {
                        return Err(Error::dims("avgpool window", &shape, &[*k]));
                    }
                    [shape[0], shape[1] / k, shape[2] / k]
                }
                Layer::AdaptiveAvgPool => [shape[0], 1, 1],
            };
            shapes.push(shape);
        }
        Ok(shapes)
    }

    pub fn output_shape(&self) -> Result<[usize; 3]> {
        Ok(self.layer_shapes()?.last().copied().unwrap_or(self.input_dims))
    }

    pub fn validate(&self) -> Result<()> {
        self.hyper.validate()?;
        let out = self.output_shape()?;
        if out[1] != 1 || out[2] != 1 || out[0] != self.classes {
            return Err(Error::Config(format!("network output {out:?} is not a {}-class vector", self.classes)));
        }
        for &t in &self.placement.targets {
            match self.layers.get(t) {
                Some(Layer::Conv(_)) => {}
                Some(Layer::Linear(_)) if self.placement.mode == PlacementMode::TopologyWise => {}
                Some(Layer::Linear(_)) => {
                    return Err(Error::Config(format!("layer-wise dropout target {t} is not a conv layer")))
                }
                _ => return Err(Error::Config(format!("dropout target {t} is not an MVM layer"))),
            }
        }
        Ok(())
    }

    pub fn has_dropout(&self, layer: usize) -> bool {
        self.placement.targets.contains(&layer)
    }

    /// Input shape (C, H, W) of layer `i`.
    pub fn layer_input_shape(&self, i: usize) -> Result<[usize; 3]> {
        if i == 0 {
            return Ok(self.input_dims);
        }
        Ok(self.layer_shapes()?[i - 1])
    }

    fn check_input(&self, x: &Tensor4) -> Result<()> {
        let d = x.dims();
        if d[1..] != self.input_dims {
            return Err(Error::dims("network input", &d, &self.input_dims));
        }
        Ok(())
    }

    fn mvm(layer: &Layer, x: &Tensor4, weights: &[f64]) -> Result<Tensor4> {
        match layer {
            Layer::Conv(c) => conv2d_raw(x, weights, &c.weight.geometry),
            Layer::Linear(l) => {
                let n = x.batch();
                let fin = l.in_features();
                if x.sample_len() != fin {
                    return Err(Error::dims("linear input", &x.dims(), &l.in_shape));
                }
                let mut out = Tensor4::zeros([n, l.out, 1, 1]);
                for b in 0..n {
                    let xs = &x.data()[b * fin..(b + 1) * fin];
                    for o in 0..l.out {
                        let row = &weights[o * fin..(o + 1) * fin];
                        let mut s = 0.0;
                        for (wv, xv) in row.iter().zip(xs) {
                            s += wv * xv;
                        }
                        out.data_mut()[b * l.out + o] = s;
                    }
                }
                Ok(out)
            }
            _ => Err(Error::Internal(format!("{} is not an MVM layer", layer.name()))),
        }
    }

    /// Inference-mode evaluation of a non-MVM layer.
    pub fn apply_layer_eval(&self, i: usize, x: &Tensor4) -> Result<Tensor4> {
        match &self.layers[i] {
            Layer::InputQuant { levels } => Ok(x.map(|v| (v * levels).round())),
            Layer::BatchNorm(bn) => batchnorm_eval(x, &bn.gamma, &bn.beta, &bn.running_mean, &bn.running_var),
            Layer::Sign => Ok(sign_activation(x)),
            Layer::AvgPool { k } => avgpool2d(x, *k),
            Layer::AdaptiveAvgPool => Ok(adaptive_avgpool_to_1x1(x)),
            l @ (Layer::Conv(_) | Layer::Linear(_)) => {
                Err(Error::Internal(format!("apply_layer_eval called on {}", l.name())))
            }
        }
    }

    /// Inference-mode MVM layer with an optional per-sample input mask; the
    /// keep scale is applied to the MVM output.
    pub fn apply_mvm_eval(&self, i: usize, x: &Tensor4, masks: Option<&[SpatialMask]>) -> Result<Tensor4> {
        let layer = &self.layers[i];
        let weights = layer
            .effective_weights()
            .ok_or_else(|| Error::Internal(format!("layer {i} is not an MVM layer")))?;
        match masks {
            None => Self::mvm(layer, x, &weights),
            Some(m) => {
                let masked = apply_spatial_dropout_per_sample(x, m, false)?;
                let mut z = Self::mvm(layer, &masked, &weights)?;
                z.scale(keep_scale(self.hyper.rho));
                Ok(z)
            }
        }
    }

    /// Inference forward pass (batch-norm running statistics). Returns logits.
    pub fn forward_eval(&self, x: &Tensor4, masks: &mut dyn MaskSource) -> Result<Tensor4> {
        self.forward_eval_layers(x, 0..self.layers.len(), masks)
    }

    /// Index of the first layer whose input is dropped, if any.
    pub fn first_dropout_layer(&self) -> Option<usize> {
        (0..self.layers.len()).find(|&i| self.has_dropout(i))
    }

    /// Inference pass through `layers` only; `x` is the input of the first.
    pub fn forward_eval_layers(
        &self,
        x: &Tensor4,
        layers: std::ops::Range<usize>,
        masks: &mut dyn MaskSource,
    ) -> Result<Tensor4> {
        if layers.start == 0 {
            self.check_input(x)?;
        }
        let mut cur = x.clone();
        for i in layers {
            cur = if self.layers[i].is_mvm() {
                let m = if self.has_dropout(i) {
                    masks.masks(i, cur.batch(), cur.channels(), self.hyper.rho)?
                } else {
                    None
                };
                self.apply_mvm_eval(i, &cur, m.as_deref())?
            } else {
                self.apply_layer_eval(i, &cur)?
            };
        }
        debug_assert!(cur.is_finite());
        Ok(cur)
    }

    /// Training forward pass (batch statistics) recording a tape for backprop.
    pub fn forward_train(&self, x: &Tensor4, masks: &mut dyn MaskSource) -> Result<(Tensor4, Tape)> {
        self.check_input(x)?;
        let mut cur = x.clone();
        let mut entries = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let (next, entry) = match layer {
                Layer::InputQuant { levels } => (cur.map(|v| (v * levels).round()), TapeEntry::Passthrough),
                Layer::Conv(_) | Layer::Linear(_) => {
                    let weights = layer.effective_weights().expect("mvm layer");
                    let m = if self.has_dropout(i) {
                        masks.masks(i, cur.batch(), cur.channels(), self.hyper.rho)?
                    } else {
                        None
                    };
                    let (input, scale) = match &m {
                        Some(m) => (apply_spatial_dropout_per_sample(&cur, m, false)?, keep_scale(self.hyper.rho)),
                        None => (cur, 1.0),
                    };
                    let mut z = Self::mvm(layer, &input, &weights)?;
                    if scale != 1.0 {
                        z.scale(scale);
                    }
                    (z, TapeEntry::Mvm { input, masks: m, scale, weights })
                }
                Layer::BatchNorm(bn) => {
                    let (y, cache) = batchnorm_train(&cur, &bn.gamma, &bn.beta)?;
                    (y, TapeEntry::BatchNorm(cache))
                }
                Layer::Sign => (sign_activation(&cur), TapeEntry::Sign { input: cur }),
                Layer::AvgPool { k } => {
                    let dims = cur.dims();
                    (avgpool2d(&cur, *k)?, TapeEntry::AvgPool { input_dims: dims, k: *k })
                }
                Layer::AdaptiveAvgPool => {
                    let dims = cur.dims();
                    (adaptive_avgpool_to_1x1(&cur), TapeEntry::AdaptiveAvgPool { input_dims: dims })
                }
            };
            entries.push(entry);
            cur = next;
        }
        Ok((cur, Tape { entries }))
    }

    /// Backpropagates `dlogits` through the tape. Binary layers pass their
    /// weight gradient to the proxy through the straight-through estimator.
    pub fn backward(&self, tape: &Tape, dlogits: &Tensor4) -> Result<Gradients> {
        let mut grads: Vec<Option<Vec<Vec<f64>>>> = vec![None; self.layers.len()];
        let mut dy = dlogits.clone();
        for i in (0..self.layers.len()).rev() {
            let layer = &self.layers[i];
            dy = match (&tape.entries[i], layer) {
                (TapeEntry::Passthrough, _) => dy,
                (TapeEntry::Mvm { input, masks, scale, weights }, _) => {
                    if *scale != 1.0 {
                        dy.scale(*scale);
                    }
                    let (dx, dw) = match layer {
                        Layer::Conv(c) => conv2d_backward(input, weights, &c.weight.geometry, &dy),
                        Layer::Linear(l) => linear_backward(input, weights, l, &dy),
                        _ => unreachable!(),
                    };
                    let (proxy, binary) = match layer {
                        Layer::Conv(c) => (&c.weight.proxy, c.binary),
                        Layer::Linear(l) => (&l.proxy, l.binary),
                        _ => unreachable!(),
                    };
                    let dw = if binary { ste_backward(&dw, proxy, STE_CLIP)? } else { dw };
                    grads[i] = Some(vec![dw]);
                    match masks {
                        Some(m) => apply_spatial_dropout_per_sample(&dx, m, false)?,
                        None => dx,
                    }
                }
                (TapeEntry::BatchNorm(cache), Layer::BatchNorm(bn)) => {
                    let (dx, dg, db) = batchnorm_backward(&dy, cache, &bn.gamma);
                    grads[i] = Some(vec![dg, db]);
                    dx
                }
                (TapeEntry::Sign { input }, _) => sign_backward(&dy, input, STE_CLIP),
                (TapeEntry::AvgPool { input_dims, k }, _) => avgpool2d_backward(&dy, *input_dims, *k),
                (TapeEntry::AdaptiveAvgPool { input_dims }, _) => adaptive_avgpool_backward(&dy, *input_dims),
                _ => return Err(Error::Internal("tape does not match network".into())),
            };
        }
        Ok(Gradients(grads.into_iter().flatten().flatten().collect()))
    }

    /// Trainable parameters in a fixed order: proxy weights of MVM layers,
    /// then (gamma, beta) of batch-norm layers, interleaved by layer index.
    pub fn params(&self) -> Vec<(ParamKind, &[f64])> {
        let mut out = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::Conv(c) => out.push((ParamKind::ProxyWeight, c.weight.proxy.as_slice())),
                Layer::Linear(l) => out.push((ParamKind::ProxyWeight, l.proxy.as_slice())),
                Layer::BatchNorm(bn) => {
                    out.push((ParamKind::BnGamma, bn.gamma.as_slice()));
                    out.push((ParamKind::BnBeta, bn.beta.as_slice()));
                }
                _ => {}
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<(ParamKind, &mut Vec<f64>)> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            match layer {
                Layer::Conv(c) => out.push((ParamKind::ProxyWeight, &mut c.weight.proxy)),
                Layer::Linear(l) => out.push((ParamKind::ProxyWeight, &mut l.proxy)),
                Layer::BatchNorm(bn) => {
                    out.push((ParamKind::BnGamma, &mut bn.gamma));
                    out.push((ParamKind::BnBeta, &mut bn.beta));
                }
                _ => {}
            }
        }
        out
    }

    /// Proxy weights of every conv/linear layer (the L2-regularized set).
    pub fn proxy_weights(&self) -> impl Iterator<Item = &[f64]> {
        self.layers.iter().filter_map(Layer::proxy)
    }

    /// Moves batch-norm running statistics toward the tape's batch statistics.
    pub fn update_running_stats(&mut self, tape: &Tape) {
        let stats: Vec<(usize, Vec<f64>, Vec<f64>)> =
            tape.batch_stats().map(|(i, m, v)| (i, m.to_vec(), v.to_vec())).collect();
        for (i, mean, var) in stats {
            if let Layer::BatchNorm(bn) = &mut self.layers[i] {
                let m = bn.momentum;
                for c in 0..mean.len() {
                    bn.running_mean[c] = (1.0 - m) * bn.running_mean[c] + m * mean[c];
                    bn.running_var[c] = (1.0 - m) * bn.running_var[c] + m * var[c];
                }
            }
        }
    }

    /// Deterministic class probabilities (dropout off) for every sample.
    pub fn predict_probs(&self, x: &Tensor4) -> Result<Vec<Vec<f64>>> {
        let logits = self.forward_eval(x, &mut NoDropout)?;
        Ok(logits_to_probs(&logits))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::checkpoint::save(self, path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        crate::checkpoint::load(path)
    }

    /// Path of the JSON hyperparameter sidecar that accompanies a checkpoint.
    pub fn sidecar_path(path: &Path) -> PathBuf {
        let mut s = path.as_os_str().to_owned();
        s.push(".json");
        PathBuf::from(s)
    }
}

fn linear_backward(input: &Tensor4, weights: &[f64], l: &LinearLayer, dy: &Tensor4) -> (Tensor4, Vec<f64>) {
    let n = input.batch();
    let fin = l.in_features();
    let mut dx = Tensor4::zeros(input.dims());
    let mut dw = vec![0.0; weights.len()];
    for b in 0..n {
        let xs = &input.data()[b * fin..(b + 1) * fin];
        for o in 0..l.out {
            let g = dy.data()[b * l.out + o];
            if g == 0.0 {
                continue;
            }
            let row = &weights[o * fin..(o + 1) * fin];
            let dwr = &mut dw[o * fin..(o + 1) * fin];
            for j in 0..fin {
                dwr[j] += g * xs[j];
            }
            let dxs = &mut dx.data_mut()[b * fin..(b + 1) * fin];
            for j in 0..fin {
                dxs[j] += g * row[j];
            }
        }
    }
    (dx, dw)
}

/// Row-wise softmax of (N, classes, 1, 1) logits.
pub fn logits_to_probs(logits: &Tensor4) -> Vec<Vec<f64>> {
    let c = logits.sample_len();
    logits.data().chunks(c).map(crate::tensor::softmax).collect()
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
