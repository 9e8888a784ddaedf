//! Sequential layered models with per-layer feature taps and freeze masks.
//!
//! A *layer* is one weight-bearing unit (convolution or dense) together with
//! the activation and pooling operations fused after it. Layers are indexed
//! `1..=n` in dataflow order; `F_i` is the output of layer `i` after its
//! fused post-operations.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kernels::{ConvGeom, PoolGeom};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    /// Square-kernel 2-D convolution, weight `[out, in, k, k]`.
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    /// Fully connected layer, weight `[in, out]`. Inputs of rank > 2 are flattened.
    Dense { inputs: usize, outputs: usize },
}

/// Operations fused after a layer's affine map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PostOp {
    Relu,
    MaxPool(usize),
    AvgPool(usize),
    Flatten,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerDef {
    pub kind: LayerKind,
    pub post: Vec<PostOp>,
}

impl LayerDef {
    pub fn conv(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        Self {
            kind: LayerKind::Conv {
                in_channels,
                out_channels,
                kernel,
                stride,
                pad,
            },
            post: Vec::new(),
        }
    }

    pub fn dense(inputs: usize, outputs: usize) -> Self {
        Self {
            kind: LayerKind::Dense { inputs, outputs },
            post: Vec::new(),
        }
    }

    pub fn then(mut self, op: PostOp) -> Self {
        self.post.push(op);
        self
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        match self.kind {
            LayerKind::Conv {
                in_channels,
                out_channels,
                kernel,
                ..
            } => vec![out_channels, in_channels, kernel, kernel],
            LayerKind::Dense { inputs, outputs } => vec![inputs, outputs],
        }
    }

    pub fn bias_len(&self) -> usize {
        match self.kind {
            LayerKind::Conv { out_channels, .. } => out_channels,
            LayerKind::Dense { outputs, .. } => outputs,
        }
    }

    fn fan_in(&self) -> usize {
        match self.kind {
            LayerKind::Conv {
                in_channels, kernel, ..
            } => in_channels * kernel * kernel,
            LayerKind::Dense { inputs, .. } => inputs,
        }
    }

    /// Per-sample output shape for a per-sample input shape.
    fn output_shape(&self, index: usize, input: &[usize]) -> Result<Vec<usize>> {
        let mut shape = match self.kind {
            LayerKind::Conv {
                in_channels,
                out_channels,
                kernel,
                stride,
                pad,
            } => {
                if input.len() != 3 || input[0] != in_channels {
                    return Err(Error::Config(format!(
                        "layer {index}: conv expects [{in_channels}, H, W] input, got {input:?}"
                    )));
                }
                let g = ConvGeom::new([input[0], input[1], input[2]], out_channels, [kernel, kernel], stride, pad)
                    .map_err(|e| Error::Config(format!("layer {index}: {e}")))?;
                vec![out_channels, g.out_h, g.out_w]
            }
            LayerKind::Dense { inputs, outputs } => {
                let n: usize = input.iter().product();
                if n != inputs {
                    return Err(Error::Config(format!(
                        "layer {index}: dense expects {inputs} inputs, previous output has {n} ({input:?})"
                    )));
                }
                vec![outputs]
            }
        };
        for op in &self.post {
            match *op {
                PostOp::Relu => {}
                PostOp::Flatten => shape = vec![shape.iter().product()],
                PostOp::MaxPool(size) | PostOp::AvgPool(size) => {
                    let mut full = vec![1];
                    full.extend(&shape);
                    let g = PoolGeom::new(&full, size, size)
                        .map_err(|e| Error::Config(format!("layer {index}: {e}")))?;
                    shape = vec![g.channels, g.out_h, g.out_w];
                }
            }
        }
        Ok(shape)
    }
}

/// Layer list plus input geometry; everything needed to rebuild a network
/// apart from its parameter values.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Architecture {
    /// Per-sample input shape: `[C, H, W]` for images or `[D]` for vectors.
    pub input_shape: Vec<usize>,
    pub num_classes: usize,
    pub layers: Vec<LayerDef>,
}

impl Architecture {
    /// Check that consecutive layers compose and return each layer's per-sample output shape.
    pub fn output_shapes(&self) -> Result<Vec<Vec<usize>>> {
        if self.layers.is_empty() {
            return Err(Error::Config("network has no layers".into()));
        }
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return Err(Error::Config(format!("invalid input shape {:?}", self.input_shape)));
        }
        let mut shape = self.input_shape.clone();
        let mut shapes = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            shape = layer.output_shape(i + 1, &shape)?;
            shapes.push(shape.clone());
        }
        let last: usize = shape.iter().product();
        if last != self.num_classes {
            return Err(Error::Config(format!(
                "last layer produces {last} outputs but the task has {} classes",
                self.num_classes
            )));
        }
        Ok(shapes)
    }
}

#[derive(Debug, Clone)]
pub struct Layer {
    pub def: LayerDef,
    pub weight: Tensor,
    pub bias: Tensor,
    pub frozen: bool,
}

impl Layer {
    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

/// Parameter nodes recorded on a tape, one `(weight, bias)` pair per layer.
#[derive(Debug, Clone)]
pub struct ParamNodes(pub Vec<(NodeId, NodeId)>);

/// Result of tracing a forward pass onto a tape.
#[derive(Debug, Clone)]
pub struct Trace {
    /// Output of each traced layer; `features[i - 1]` is `F_i`.
    pub features: Vec<NodeId>,
}

impl Trace {
    pub fn feature(&self, layer: usize) -> NodeId {
        self.features[layer - 1]
    }

    /// Logits, when the trace ran through the last layer.
    pub fn output(&self) -> NodeId {
        *self.features.last().expect("trace has at least one layer")
    }
}

/// Hidden features captured by [`Network::forward_with_taps`].
#[derive(Debug, Clone, Default)]
pub struct FeatureTaps {
    pub features: BTreeMap<usize, Tensor>,
}

impl FeatureTaps {
    pub fn get(&self, layer: usize) -> Option<&Tensor> {
        self.features.get(&layer)
    }

    /// `N_i`, the per-sample element count of a tapped feature.
    pub fn dim(&self, layer: usize) -> Option<usize> {
        self.features.get(&layer).map(Tensor::sample_len)
    }
}

/// Which gradients a backward pass through a network should produce.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct GradientRequest {
    pub wrt_input: bool,
    pub layers: BTreeSet<usize>,
}

impl GradientRequest {
    pub fn input() -> Self {
        Self {
            wrt_input: true,
            layers: BTreeSet::new(),
        }
    }

    pub fn layers(layers: impl IntoIterator<Item = usize>) -> Self {
        Self {
            wrt_input: false,
            layers: layers.into_iter().collect(),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct NetGradients {
    pub input: Option<Tensor>,
    /// `(weight, bias)` gradients by layer index.
    pub layers: BTreeMap<usize, (Tensor, Tensor)>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParamCensus {
    pub total: usize,
    pub trainable: usize,
    pub fraction: f64,
}

#[derive(Debug)]
pub struct Network {
    arch: Architecture,
    feature_shapes: Vec<Vec<usize>>,
    layers: Vec<Layer>,
    tapped_passes: AtomicUsize,
}

impl Clone for Network {
    fn clone(&self) -> Self {
        Self {
            arch: self.arch.clone(),
            feature_shapes: self.feature_shapes.clone(),
            layers: self.layers.clone(),
            tapped_passes: AtomicUsize::new(0),
        }
    }
}

impl Network {
    /// He-normal weights and zero biases drawn from `seed`.
    pub fn init(arch: Architecture, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = arch
            .layers
            .iter()
            .map(|def| {
                let std = (2.0 / def.fan_in() as f32).sqrt();
                (Tensor::randn(def.weight_shape(), std, &mut rng), Tensor::zeros([def.bias_len()]))
            })
            .collect();
        Self::from_params(arch, params)
    }

    /// Build a network from explicit `(weight, bias)` pairs. All layers start unfrozen.
    pub fn from_params(arch: Architecture, params: Vec<(Tensor, Tensor)>) -> Result<Self> {
        let feature_shapes = arch.output_shapes()?;
        if params.len() != arch.layers.len() {
            return Err(Error::Compatibility(format!(
                "{} parameter pairs for {} layers",
                params.len(),
                arch.layers.len()
            )));
        }
        let mut layers = Vec::with_capacity(params.len());
        for (i, (def, (weight, bias))) in arch.layers.iter().zip(params).enumerate() {
            if weight.shape() != def.weight_shape() || bias.shape() != [def.bias_len()] {
                return Err(Error::Compatibility(format!(
                    "layer {}: parameters {:?}/{:?} do not match {:?}/[{}]",
                    i + 1,
                    weight.shape(),
                    bias.shape(),
                    def.weight_shape(),
                    def.bias_len()
                )));
            }
            layers.push(Layer {
                def: def.clone(),
                weight,
                bias,
                frozen: false,
            });
        }
        Ok(Self {
            arch,
            feature_shapes,
            layers,
            tapped_passes: AtomicUsize::new(0),
        })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn num_classes(&self) -> usize {
        self.arch.num_classes
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.arch.input_shape
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Layer by 1-based index.
    pub fn layer(&self, index: usize) -> Result<&Layer> {
        self.check_index(index)?;
        Ok(&self.layers[index - 1])
    }

    pub fn layer_mut(&mut self, index: usize) -> Result<&mut Layer> {
        self.check_index(index)?;
        Ok(&mut self.layers[index - 1])
    }

    /// Per-sample shape of `F_i`.
    pub fn feature_shape(&self, index: usize) -> Result<&[usize]> {
        self.check_index(index)?;
        Ok(&self.feature_shapes[index - 1])
    }

    /// `N_i` for every layer.
    pub fn feature_dims(&self) -> Vec<usize> {
        self.feature_shapes.iter().map(|s| s.iter().product()).collect()
    }

    pub fn check_index(&self, index: usize) -> Result<()> {
        if index == 0 || index > self.layers.len() {
            return Err(Error::Usage(format!(
                "layer index {index} outside 1..={}",
                self.layers.len()
            )));
        }
        Ok(())
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.rank() < 2 || x.shape()[1..] != self.arch.input_shape[..] {
            let mut want = vec![0];
            want.extend(&self.arch.input_shape);
            return Err(Error::dim("network input", x.shape(), &want));
        }
        Ok(())
    }

    /// Record every layer's parameters as tape leaves.
    pub fn param_leaves(&self, tape: &mut Tape) -> ParamNodes {
        ParamNodes(
            self.layers
                .iter()
                .map(|l| (tape.leaf(l.weight.clone()), tape.leaf(l.bias.clone())))
                .collect(),
        )
    }

    /// Trace layers `1..=upto` onto `tape`, starting from `input`.
    pub fn trace(&self, tape: &mut Tape, input: NodeId, params: &ParamNodes, upto: usize) -> Result<Trace> {
        self.check_index(upto)?;
        self.check_input(tape.value(input))?;
        let mut h = input;
        let mut features = Vec::with_capacity(upto);
        for (layer, &(w, b)) in self.layers[..upto].iter().zip(&params.0) {
            h = match layer.def.kind {
                LayerKind::Conv { stride, pad, .. } => tape.conv2d(h, w, b, stride, pad)?,
                LayerKind::Dense { .. } => {
                    if tape.value(h).rank() > 2 {
                        h = tape.flatten(h)?;
                    }
                    let z = tape.matmul(h, w)?;
                    tape.add_bias(z, b)?
                }
            };
            for op in &layer.def.post {
                h = match *op {
                    PostOp::Relu => tape.relu(h),
                    PostOp::MaxPool(s) => tape.maxpool2d(h, s, s)?,
                    PostOp::AvgPool(s) => tape.avgpool2d(h, s, s)?,
                    PostOp::Flatten => tape.flatten(h)?,
                };
            }
            features.push(h);
        }
        Ok(Trace { features })
    }

    /// Convenience: leaf for `x`, parameter leaves, and a trace up to `upto`.
    pub fn trace_input(&self, tape: &mut Tape, x: Tensor, upto: usize) -> Result<(NodeId, ParamNodes, Trace)> {
        let input = tape.leaf(x);
        let params = self.param_leaves(tape);
        let trace = self.trace(tape, input, &params, upto)?;
        Ok((input, params, trace))
    }

    /// Logits for a batch.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let (_, _, trace) = self.trace_input(&mut tape, x.clone(), self.num_layers())?;
        Ok(tape.value(trace.output()).clone())
    }

    /// Logits plus the hidden features `F_i` for each requested layer.
    pub fn forward_with_taps(&self, x: &Tensor, taps: &[usize]) -> Result<(Tensor, FeatureTaps)> {
        for &i in taps {
            self.check_index(i)?;
        }
        if !taps.is_empty() {
            self.tapped_passes.fetch_add(1, Ordering::Relaxed);
        }
        let mut tape = Tape::new();
        let (_, _, trace) = self.trace_input(&mut tape, x.clone(), self.num_layers())?;
        let features = taps
            .iter()
            .map(|&i| (i, tape.value(trace.feature(i)).clone()))
            .collect();
        Ok((tape.value(trace.output()).clone(), FeatureTaps { features }))
    }

    /// Number of tapped forward passes run on this instance so far.
    pub fn tapped_forward_count(&self) -> usize {
        self.tapped_passes.load(Ordering::Relaxed)
    }

    /// Backpropagate `loss` and collect the gradients named in `request`.
    pub fn backward(
        &self,
        tape: &Tape,
        loss: NodeId,
        input: NodeId,
        params: &ParamNodes,
        request: &GradientRequest,
    ) -> Result<NetGradients> {
        for &i in &request.layers {
            self.check_index(i)?;
        }
        let mut wrt = Vec::new();
        if request.wrt_input {
            wrt.push(input);
        }
        for &i in &request.layers {
            let (w, b) = params.0[i - 1];
            wrt.push(w);
            wrt.push(b);
        }
        let mut grads = tape.backward(loss, &wrt)?;
        let mut out = NetGradients {
            input: if request.wrt_input { grads.take(input) } else { None },
            layers: BTreeMap::new(),
        };
        for &i in &request.layers {
            let (w, b) = params.0[i - 1];
            let gw = grads.take(w).expect("requested");
            let gb = grads.take(b).expect("requested");
            out.layers.insert(i, (gw, gb));
        }
        Ok(out)
    }

    /// Freeze every layer outside `critical`; layers in it become trainable.
    pub fn set_freeze_mask(&mut self, critical: &[usize]) -> Result<()> {
        if critical.is_empty() {
            return Err(Error::Usage("critical set is empty: at least one layer must stay trainable".into()));
        }
        for &i in critical {
            self.check_index(i)?;
        }
        for (idx, layer) in self.layers.iter_mut().enumerate() {
            layer.frozen = !critical.contains(&(idx + 1));
        }
        Ok(())
    }

    pub fn unfreeze_all(&mut self) {
        self.layers.iter_mut().for_each(|l| l.frozen = false);
    }

    pub fn freeze_all(&mut self) {
        self.layers.iter_mut().for_each(|l| l.frozen = true);
    }

    /// 1-based indices of layers that are not frozen.
    pub fn trainable_layers(&self) -> Vec<usize> {
        (1..=self.layers.len())
            .filter(|&i| !self.layers[i - 1].frozen)
            .collect()
    }

    pub fn param_census(&self) -> ParamCensus {
        let total: usize = self.layers.iter().map(Layer::param_count).sum();
        let trainable: usize = self
            .layers
            .iter()
            .filter(|l| !l.frozen)
            .map(Layer::param_count)
            .sum();
        ParamCensus {
            total,
            trainable,
            fraction: if total == 0 { 0.0 } else { trainable as f64 / total as f64 },
        }
    }

    /// Parameter bytes of one layer (weights then bias, little-endian).
    pub fn layer_bytes(&self, index: usize) -> Result<Vec<u8>> {
        let l = self.layer(index)?;
        let mut bytes = l.weight.to_le_bytes();
        bytes.extend(l.bias.to_le_bytes());
        Ok(bytes)
    }
}
