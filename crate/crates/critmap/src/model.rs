//! Layer graph representation, construction, and the forward pass.
//!
//! A [`ModelGraph`] is an ordered DAG of [`LayerSpec`]s with addressable
//! parameter sets. Layer ids are dot-paths (`stem.conv`,
//! `stage2.block0.downsample`, `head.fc`) so individual layers, including
//! the strided convolution on each stage's skip path, are first-class
//! targets for inspection and re-randomization.
//!
//! The graph is immutable during profiling; concurrent jobs lay a private
//! parameter overlay over the shared base model instead of mutating it.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::init::InitSpec;
use crate::ops;
use crate::rng::{combine, hash64, Rng};
use crate::tensor::{Dtype, Tensor};

/// Reserved upstream id naming the network input.
pub const INPUT_ID: &str = "input";

/// Layer kind plus its kind-specific hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LayerKind {
    Conv {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    },
    Batchnorm {
        eps: f64,
    },
    Relu,
    Maxpool {
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    GlobalAvgPool,
    Linear {
        out_features: usize,
        bias: bool,
    },
    ResidualAdd,
}

impl LayerKind {
    /// Conv, linear and batchnorm layers own parameters.
    pub fn is_parameterized(&self) -> bool {
        matches!(
            self,
            LayerKind::Conv { .. } | LayerKind::Linear { .. } | LayerKind::Batchnorm { .. }
        )
    }

    /// Layers whose learned parameters take part in re-randomization.
    /// Batchnorm is deliberately excluded.
    pub fn is_randomizable(&self) -> bool {
        matches!(self, LayerKind::Conv { .. } | LayerKind::Linear { .. })
    }
}

/// Initialization record for a parameterized layer: one spec for the weight
/// tensor and one for the bias. Biases default to zeros, so their
/// re-randomization draw is the zero vector unless declared otherwise.
/// Batchnorm carries a record for completeness but its parameters are fixed
/// at build time (gamma 1, beta 0) and never re-randomized.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerInit {
    pub weight: InitSpec,
    pub bias: InitSpec,
}

impl Default for LayerInit {
    fn default() -> Self {
        LayerInit {
            weight: InitSpec::kaiming_normal(),
            bias: InitSpec::zeros(),
        }
    }
}

/// One node of the model graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub id: String,
    #[serde(flatten)]
    pub kind: LayerKind,
    pub init: Option<LayerInit>,
    pub inputs: Vec<String>,
}

/// Named parameter tensors of one layer.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerParams {
    Conv {
        weight: Tensor,
        bias: Option<Tensor>,
    },
    Linear {
        weight: Tensor,
        bias: Option<Tensor>,
    },
    Batchnorm {
        gamma: Tensor,
        beta: Tensor,
        running_mean: Tensor,
        running_var: Tensor,
    },
}

impl LayerParams {
    /// (name, tensor) pairs in a fixed serialization order.
    pub fn named(&self) -> Vec<(&'static str, &Tensor)> {
        match self {
            LayerParams::Conv { weight, bias } | LayerParams::Linear { weight, bias } => {
                let mut v = vec![("weight", weight)];
                if let Some(b) = bias {
                    v.push(("bias", b));
                }
                v
            }
            LayerParams::Batchnorm {
                gamma,
                beta,
                running_mean,
                running_var,
            } => vec![
                ("gamma", gamma),
                ("beta", beta),
                ("running_mean", running_mean),
                ("running_var", running_var),
            ],
        }
    }
}

/// Parameter overlay: replacement parameters for a subset of layers,
/// consulted before the base model's own parameters.
pub type Overlay = BTreeMap<String, LayerParams>;

/// Ordered DAG of layers with addressable parameters.
#[derive(Debug, Clone)]
pub struct ModelGraph {
    pub id: String,
    pub layers: Vec<LayerSpec>,
    pub params: BTreeMap<String, LayerParams>,
    pub num_classes: usize,
    /// Per-sample input shape [C, H, W].
    pub input_shape: [usize; 3],
    pub dtype: Dtype,
    index: HashMap<String, usize>,
}

impl ModelGraph {
    /// Assemble and validate a graph from parts.
    pub fn new(
        id: String,
        layers: Vec<LayerSpec>,
        params: BTreeMap<String, LayerParams>,
        num_classes: usize,
        input_shape: [usize; 3],
        dtype: Dtype,
    ) -> Result<ModelGraph> {
        let mut index = HashMap::new();
        for (i, layer) in layers.iter().enumerate() {
            if layer.id == INPUT_ID {
                return Err(Error::config(format!("layer id {INPUT_ID:?} is reserved")));
            }
            if index.insert(layer.id.clone(), i).is_some() {
                return Err(Error::config(format!("duplicate layer id {:?}", layer.id)));
            }
        }
        let model = ModelGraph {
            id,
            layers,
            params,
            num_classes,
            input_shape,
            dtype,
            index,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn layer(&self, id: &str) -> Result<&LayerSpec> {
        self.index
            .get(id)
            .map(|&i| &self.layers[i])
            .ok_or_else(|| Error::UnknownLayer(id.to_string()))
    }

    /// Id of the single output layer (the classification head).
    pub fn output_id(&self) -> &str {
        // Guaranteed unique by validate().
        let consumed: std::collections::HashSet<&str> = self
            .layers
            .iter()
            .flat_map(|l| l.inputs.iter().map(|s| s.as_str()))
            .collect();
        self.layers
            .iter()
            .rev()
            .find(|l| !consumed.contains(l.id.as_str()))
            .map(|l| l.id.as_str())
            .expect("validated graph has an output layer")
    }

    /// Conv and linear layer ids in topological order; batchnorm and
    /// parameter-free layers excluded.
    pub fn randomizable_layers(&self) -> Vec<String> {
        self.layers
            .iter()
            .filter(|l| l.kind.is_randomizable())
            .map(|l| l.id.clone())
            .collect()
    }

    /// Deep-copied parameter snapshot of one layer.
    pub fn param_snapshot(&self, id: &str) -> Result<LayerParams> {
        self.layer(id)?;
        self.params
            .get(id)
            .cloned()
            .ok_or_else(|| Error::Target {
                layer: id.to_string(),
                reason: "layer has no parameters".to_string(),
            })
    }

    /// Replace the learnable tensors of one layer from a snapshot.
    ///
    /// For batchnorm only gamma and beta are replaced; running statistics
    /// stay untouched. Other layers are not affected.
    pub fn set_params(&mut self, id: &str, snapshot: &LayerParams) -> Result<()> {
        self.layer(id)?;
        let current = self.params.get_mut(id).ok_or_else(|| Error::Target {
            layer: id.to_string(),
            reason: "layer has no parameters".to_string(),
        })?;
        match (current, snapshot) {
            (
                LayerParams::Conv { weight, bias },
                LayerParams::Conv {
                    weight: new_w,
                    bias: new_b,
                },
            )
            | (
                LayerParams::Linear { weight, bias },
                LayerParams::Linear {
                    weight: new_w,
                    bias: new_b,
                },
            ) => {
                check_same_shape(id, "weight", weight, new_w)?;
                match (bias.as_ref(), new_b.as_ref()) {
                    (Some(b), Some(nb)) => check_same_shape(id, "bias", b, nb)?,
                    (None, None) => {}
                    _ => {
                        return Err(Error::shape(format!(
                            "layer {id}: bias presence mismatch in snapshot"
                        )))
                    }
                }
                *weight = new_w.clone();
                *bias = new_b.clone();
            }
            (
                LayerParams::Batchnorm { gamma, beta, .. },
                LayerParams::Batchnorm {
                    gamma: new_g,
                    beta: new_b,
                    ..
                },
            ) => {
                check_same_shape(id, "gamma", gamma, new_g)?;
                check_same_shape(id, "beta", beta, new_b)?;
                *gamma = new_g.clone();
                *beta = new_b.clone();
            }
            _ => {
                return Err(Error::shape(format!(
                    "layer {id}: snapshot kind does not match layer kind"
                )))
            }
        }
        Ok(())
    }

    /// Parameters of `id`, preferring the overlay when it has an entry.
    pub(crate) fn params_for<'a>(
        &'a self,
        id: &str,
        overlay: Option<&'a Overlay>,
    ) -> Result<&'a LayerParams> {
        if let Some(ov) = overlay {
            if let Some(p) = ov.get(id) {
                return Ok(p);
            }
        }
        self.params
            .get(id)
            .ok_or_else(|| Error::UnknownLayer(id.to_string()))
    }

    /// Inference-mode forward pass: batch `[N, C, H, W]` to logits
    /// `[N, num_classes]`. Pure; repeated calls are bit-identical.
    pub fn forward(&self, batch: &Tensor) -> Result<Tensor> {
        self.forward_overlay(batch, None)
    }

    /// Forward pass with a parameter overlay shadowing some layers.
    pub fn forward_overlay(&self, batch: &Tensor, overlay: Option<&Overlay>) -> Result<Tensor> {
        self.check_batch(batch)?;
        let mut values: Vec<Option<Tensor>> = vec![None; self.layers.len()];
        for (i, layer) in self.layers.iter().enumerate() {
            let out = self.eval_layer(layer, batch, &values, overlay)?;
            values[i] = Some(out);
        }
        let out_idx = self.index[self.output_id()];
        Ok(values[out_idx].take().expect("output computed"))
    }

    pub(crate) fn check_batch(&self, batch: &Tensor) -> Result<()> {
        let [c, h, w] = self.input_shape;
        if batch.rank() != 4 || batch.shape()[1..] != [c, h, w] {
            return Err(Error::shape(format!(
                "batch shape {:?} does not match model input [N, {c}, {h}, {w}]",
                batch.shape()
            )));
        }
        if batch.dtype() != self.dtype {
            return Err(Error::shape(format!(
                "batch dtype {} does not match model dtype {}",
                batch.dtype(),
                self.dtype
            )));
        }
        Ok(())
    }

    fn eval_layer(
        &self,
        layer: &LayerSpec,
        batch: &Tensor,
        values: &[Option<Tensor>],
        overlay: Option<&Overlay>,
    ) -> Result<Tensor> {
        let fetch = |id: &str| -> Result<&Tensor> {
            if id == INPUT_ID {
                return Ok(batch);
            }
            let i = self.index[id];
            Ok(values[i].as_ref().expect("topological order"))
        };
        let x = fetch(&layer.inputs[0])?;
        match &layer.kind {
            LayerKind::Conv {
                stride, padding, ..
            } => {
                let (weight, bias) = conv_params(self.params_for(&layer.id, overlay)?);
                ops::conv2d(x, weight, bias, *stride, *padding)
            }
            LayerKind::Batchnorm { eps } => {
                let LayerParams::Batchnorm {
                    gamma,
                    beta,
                    running_mean,
                    running_var,
                } = self.params_for(&layer.id, overlay)?
                else {
                    return Err(Error::shape(format!("layer {}: parameter kind mismatch", layer.id)));
                };
                ops::batchnorm_infer(x, gamma, beta, running_mean, running_var, *eps)
            }
            LayerKind::Relu => Ok(ops::relu(x)),
            LayerKind::Maxpool {
                kernel,
                stride,
                padding,
            } => ops::maxpool(x, *kernel, *stride, *padding),
            LayerKind::GlobalAvgPool => ops::global_avg_pool(x),
            LayerKind::Linear { .. } => {
                let (weight, bias) = linear_params(self.params_for(&layer.id, overlay)?);
                let flat = flatten_features(x)?;
                ops::linear(&flat, weight, bias)
            }
            LayerKind::ResidualAdd => {
                let y = fetch(&layer.inputs[1])?;
                x.add(y)
            }
        }
    }

    /// Structural and shape validation of the whole graph.
    fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::config("model has no layers".to_string()));
        }
        if self.num_classes < 2 {
            return Err(Error::config(format!(
                "num_classes must be >= 2, got {}",
                self.num_classes
            )));
        }
        let mut seen: HashMap<&str, usize> = HashMap::new();
        for (i, layer) in self.layers.iter().enumerate() {
            let want_inputs = if matches!(layer.kind, LayerKind::ResidualAdd) {
                2
            } else {
                1
            };
            if layer.inputs.len() != want_inputs {
                return Err(Error::config(format!(
                    "layer {}: expected {} input(s), got {}",
                    layer.id,
                    want_inputs,
                    layer.inputs.len()
                )));
            }
            for input in &layer.inputs {
                if input != INPUT_ID && !seen.contains_key(input.as_str()) {
                    return Err(Error::config(format!(
                        "layer {}: input {:?} is not an earlier layer (graph must be acyclic and topologically ordered)",
                        layer.id, input
                    )));
                }
            }
            if layer.kind.is_parameterized() {
                if layer.init.is_none() {
                    return Err(Error::config(format!(
                        "parameterized layer {} carries no init spec",
                        layer.id
                    )));
                }
                if !self.params.contains_key(&layer.id) {
                    return Err(Error::config(format!(
                        "parameterized layer {} has no parameters",
                        layer.id
                    )));
                }
            } else if self.params.contains_key(&layer.id) {
                return Err(Error::config(format!(
                    "parameter-free layer {} has parameters attached",
                    layer.id
                )));
            }
            seen.insert(&layer.id, i);
        }
        for id in self.params.keys() {
            if !seen.contains_key(id.as_str()) {
                return Err(Error::config(format!(
                    "parameters for unknown layer {id:?}"
                )));
            }
        }
        // Exactly one output layer.
        let consumed: std::collections::HashSet<&str> = self
            .layers
            .iter()
            .flat_map(|l| l.inputs.iter().map(|s| s.as_str()))
            .collect();
        let outputs: Vec<&str> = self
            .layers
            .iter()
            .filter(|l| !consumed.contains(l.id.as_str()))
            .map(|l| l.id.as_str())
            .collect();
        if outputs.len() != 1 {
            return Err(Error::config(format!(
                "model must have exactly one output layer, found {outputs:?}"
            )));
        }
        // Shape inference also checks parameter shape consistency.
        let shapes = self.infer_shapes()?;
        let out_shape = &shapes[self.index[outputs[0]]];
        if out_shape != &vec![1, self.num_classes] {
            return Err(Error::config(format!(
                "output layer produces shape {:?} per sample, expected [1, {}]",
                out_shape, self.num_classes
            )));
        }
        Ok(())
    }

    /// Per-layer output shapes for a batch of one, verifying parameter
    /// shapes along the way.
    fn infer_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let [c, h, w] = self.input_shape;
        let input_shape = vec![1, c, h, w];
        let mut shapes: Vec<Vec<usize>> = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let shape_of = |id: &str| -> Vec<usize> {
                if id == INPUT_ID {
                    input_shape.clone()
                } else {
                    shapes[self.index[id]].clone()
                }
            };
            let x = shape_of(&layer.inputs[0]);
            let out = match &layer.kind {
                LayerKind::Conv {
                    out_channels,
                    kernel,
                    stride,
                    padding,
                    bias,
                } => {
                    if x.len() != 4 {
                        return Err(Error::shape(format!(
                            "layer {}: conv input must be rank 4, got {:?}",
                            layer.id, x
                        )));
                    }
                    let geom = ops::conv_geom(x[2], x[3], *kernel, *kernel, *stride, *padding)
                        .map_err(|e| Error::shape(format!("layer {}: {e}", layer.id)))?;
                    let expect_w = vec![*out_channels, x[1], *kernel, *kernel];
                    self.check_param_shapes(&layer.id, &expect_w, bias.then(|| vec![*out_channels]))?;
                    vec![1, *out_channels, geom.out_h, geom.out_w]
                }
                LayerKind::Batchnorm { .. } => {
                    if x.len() < 2 {
                        return Err(Error::shape(format!(
                            "layer {}: batchnorm input must be rank >= 2",
                            layer.id
                        )));
                    }
                    let cdim = x[1];
                    let Some(LayerParams::Batchnorm {
                        gamma,
                        beta,
                        running_mean,
                        running_var,
                    }) = self.params.get(&layer.id)
                    else {
                        return Err(Error::config(format!(
                            "layer {}: batchnorm parameters missing or mismatched",
                            layer.id
                        )));
                    };
                    for (name, t) in [
                        ("gamma", gamma),
                        ("beta", beta),
                        ("running_mean", running_mean),
                        ("running_var", running_var),
                    ] {
                        if t.shape() != [cdim] {
                            return Err(Error::shape(format!(
                                "layer {}: {name} shape {:?}, expected [{cdim}]",
                                layer.id,
                                t.shape()
                            )));
                        }
                    }
                    x
                }
                LayerKind::Relu => x,
                LayerKind::Maxpool {
                    kernel,
                    stride,
                    padding,
                } => {
                    if x.len() != 4 {
                        return Err(Error::shape(format!(
                            "layer {}: maxpool input must be rank 4",
                            layer.id
                        )));
                    }
                    let geom = ops::conv_geom(x[2], x[3], *kernel, *kernel, *stride, *padding)
                        .map_err(|e| Error::shape(format!("layer {}: {e}", layer.id)))?;
                    vec![1, x[1], geom.out_h, geom.out_w]
                }
                LayerKind::GlobalAvgPool => {
                    if x.len() != 4 {
                        return Err(Error::shape(format!(
                            "layer {}: global_avg_pool input must be rank 4",
                            layer.id
                        )));
                    }
                    vec![1, x[1]]
                }
                LayerKind::Linear { out_features, bias } => {
                    let features: usize = x[1..].iter().product();
                    let expect_w = vec![*out_features, features];
                    self.check_param_shapes(&layer.id, &expect_w, bias.then(|| vec![*out_features]))?;
                    vec![1, *out_features]
                }
                LayerKind::ResidualAdd => {
                    let y = shape_of(&layer.inputs[1]);
                    if x != y {
                        return Err(Error::shape(format!(
                            "layer {}: residual_add inputs differ: {:?} vs {:?}",
                            layer.id, x, y
                        )));
                    }
                    x
                }
            };
            shapes.push(out);
        }
        Ok(shapes)
    }

    fn check_param_shapes(
        &self,
        id: &str,
        weight_shape: &[usize],
        bias_shape: Option<Vec<usize>>,
    ) -> Result<()> {
        let params = self
            .params
            .get(id)
            .ok_or_else(|| Error::config(format!("layer {id}: parameters missing")))?;
        let (weight, bias) = match params {
            LayerParams::Conv { weight, bias } | LayerParams::Linear { weight, bias } => {
                (weight, bias)
            }
            LayerParams::Batchnorm { .. } => {
                return Err(Error::config(format!(
                    "layer {id}: parameter kind does not match layer kind"
                )))
            }
        };
        if weight.shape() != weight_shape {
            return Err(Error::shape(format!(
                "layer {id}: weight shape {:?}, expected {:?}",
                weight.shape(),
                weight_shape
            )));
        }
        match (&bias_shape, bias) {
            (Some(bs), Some(b)) => {
                if b.shape() != bs.as_slice() {
                    return Err(Error::shape(format!(
                        "layer {id}: bias shape {:?}, expected {:?}",
                        b.shape(),
                        bs
                    )));
                }
            }
            (None, None) => {}
            (Some(_), None) => {
                return Err(Error::shape(format!("layer {id}: bias missing")))
            }
            (None, Some(_)) => {
                return Err(Error::shape(format!(
                    "layer {id}: unexpected bias present"
                )))
            }
        }
        Ok(())
    }
}

fn check_same_shape(id: &str, name: &str, old: &Tensor, new: &Tensor) -> Result<()> {
    if old.shape() != new.shape() {
        return Err(Error::shape(format!(
            "layer {id}: {name} shape {:?} does not match existing {:?}",
            new.shape(),
            old.shape()
        )));
    }
    Ok(())
}

pub(crate) fn conv_params(p: &LayerParams) -> (&Tensor, Option<&Tensor>) {
    match p {
        LayerParams::Conv { weight, bias } => (weight, bias.as_ref()),
        _ => panic!("conv layer with non-conv parameters"),
    }
}

pub(crate) fn linear_params(p: &LayerParams) -> (&Tensor, Option<&Tensor>) {
    match p {
        LayerParams::Linear { weight, bias } => (weight, bias.as_ref()),
        _ => panic!("linear layer with non-linear parameters"),
    }
}

/// Flatten `[N, ...]` to `[N, F]` for the classifier head.
pub(crate) fn flatten_features(x: &Tensor) -> Result<Tensor> {
    if x.rank() == 2 {
        return Ok(x.clone());
    }
    let n = x.shape()[0];
    let f: usize = x.shape()[1..].iter().product();
    x.reshape(&[n, f])
}

/// Residual block family.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockKind {
    /// Two 3x3 convolutions.
    Basic,
    /// 1x1 reduce, 3x3 spatial, 1x1 expand with the given expansion factor.
    Bottleneck { expansion: usize },
}

/// Architecture description for [`build_model`].
#[derive(Debug, Clone)]
pub struct ArchConfig {
    pub id: String,
    pub input_shape: [usize; 3],
    pub num_classes: usize,
    pub stem_channels: usize,
    /// Stem convolution kernel (odd; padding keeps spatial size).
    pub stem_kernel: usize,
    /// 2x2/stride-2 max pool after the stem.
    pub stem_pool: bool,
    /// Residual blocks per stage.
    pub stage_blocks: Vec<usize>,
    /// Base width per stage.
    pub stage_channels: Vec<usize>,
    pub block: BlockKind,
    /// Convolution bias tensors. Standard residual nets leave convolutions
    /// bias-free ahead of batchnorm; the head keeps its bias.
    pub conv_bias: bool,
    pub bn_eps: f64,
    pub dtype: Dtype,
}

impl ArchConfig {
    /// Desk-scale residual network: 2 stages x 2 bottleneck blocks. Block
    /// outputs (12, 24) differ from the stem width so the first block of
    /// every stage carries a skip projection.
    pub fn mini(num_classes: usize, input_shape: [usize; 3]) -> ArchConfig {
        ArchConfig {
            id: "mini".to_string(),
            input_shape,
            num_classes,
            stem_channels: 8,
            stem_kernel: 3,
            stem_pool: false,
            stage_blocks: vec![2, 2],
            stage_channels: vec![6, 12],
            block: BlockKind::Bottleneck { expansion: 2 },
            conv_bias: false,
            bn_eps: 1e-5,
            dtype: Dtype::F32,
        }
    }
}

/// Build a fully initialized residual classifier.
///
/// Every parameter tensor is drawn from its layer's init spec using an rng
/// stream derived as `combine(seed, hash64(layer_id))`, the exact derivation
/// [`crate::criticality::randomize_layer`] uses. Batchnorm starts at
/// gamma 1, beta 0, running stats (0, 1).
pub fn build_model(config: &ArchConfig, seed: u64) -> Result<ModelGraph> {
    if config.stage_blocks.is_empty() || config.stage_blocks.contains(&0) {
        return Err(Error::config(format!(
            "stage_blocks must be nonempty and positive, got {:?}",
            config.stage_blocks
        )));
    }
    if config.stage_channels.len() != config.stage_blocks.len() {
        return Err(Error::config(format!(
            "stage_channels ({}) and stage_blocks ({}) lengths differ",
            config.stage_channels.len(),
            config.stage_blocks.len()
        )));
    }
    if config.stage_channels.contains(&0) || config.stem_channels == 0 {
        return Err(Error::config("channel widths must be positive".to_string()));
    }
    if config.stem_kernel % 2 == 0 {
        return Err(Error::config(format!(
            "stem kernel must be odd, got {}",
            config.stem_kernel
        )));
    }
    if let BlockKind::Bottleneck { expansion } = config.block {
        if expansion == 0 {
            return Err(Error::config("bottleneck expansion must be positive".to_string()));
        }
    }

    let mut b = GraphBuilder::new(config, seed);
    let stem_pad = config.stem_kernel / 2;
    let mut prev = b.conv(
        "stem.conv",
        INPUT_ID,
        config.input_shape[0],
        config.stem_channels,
        config.stem_kernel,
        1,
        stem_pad,
    );
    prev = b.batchnorm("stem.bn", &prev, config.stem_channels);
    prev = b.relu("stem.relu", &prev);
    if config.stem_pool {
        prev = b.maxpool("stem.pool", &prev, 2, 2, 0);
    }

    let mut channels = config.stem_channels;
    for (si, (&blocks, &width)) in config
        .stage_blocks
        .iter()
        .zip(&config.stage_channels)
        .enumerate()
    {
        let stage = si + 1;
        for bi in 0..blocks {
            let stride = if bi == 0 && stage > 1 { 2 } else { 1 };
            let prefix = format!("stage{stage}.block{bi}");
            let (out, out_channels) =
                b.residual_block(&prefix, &prev, channels, width, stride, config.block);
            prev = out;
            channels = out_channels;
        }
    }

    prev = b.gap("head.gap", &prev);
    let _ = b.linear("head.fc", &prev, channels, config.num_classes);

    ModelGraph::new(
        config.id.clone(),
        b.layers,
        b.params,
        config.num_classes,
        config.input_shape,
        config.dtype,
    )
}

/// Accumulates layers and parameters while wiring a network.
struct GraphBuilder<'a> {
    config: &'a ArchConfig,
    seed: u64,
    layers: Vec<LayerSpec>,
    params: BTreeMap<String, LayerParams>,
}

impl<'a> GraphBuilder<'a> {
    fn new(config: &'a ArchConfig, seed: u64) -> Self {
        GraphBuilder {
            config,
            seed,
            layers: Vec::new(),
            params: BTreeMap::new(),
        }
    }

    fn layer_rng(&self, id: &str) -> Rng {
        Rng::new(combine(self.seed, hash64(id)))
    }

    #[allow(clippy::too_many_arguments)]
    fn conv(
        &mut self,
        id: &str,
        input: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> String {
        let init = LayerInit::default();
        let mut rng = self.layer_rng(id);
        let weight = crate::init::sample_init(
            &init.weight,
            &[out_channels, in_channels, kernel, kernel],
            &mut rng,
            self.config.dtype,
        )
        .expect("valid conv init");
        let bias = self.config.conv_bias.then(|| {
            crate::init::sample_init(&init.bias, &[out_channels], &mut rng, self.config.dtype)
                .expect("valid bias init")
        });
        self.params
            .insert(id.to_string(), LayerParams::Conv { weight, bias });
        self.layers.push(LayerSpec {
            id: id.to_string(),
            kind: LayerKind::Conv {
                out_channels,
                kernel,
                stride,
                padding,
                bias: self.config.conv_bias,
            },
            init: Some(init),
            inputs: vec![input.to_string()],
        });
        id.to_string()
    }

    fn batchnorm(&mut self, id: &str, input: &str, channels: usize) -> String {
        let dtype = self.config.dtype;
        self.params.insert(
            id.to_string(),
            LayerParams::Batchnorm {
                gamma: Tensor::full(&[channels], 1.0, dtype),
                beta: Tensor::zeros(&[channels], dtype),
                running_mean: Tensor::zeros(&[channels], dtype),
                running_var: Tensor::full(&[channels], 1.0, dtype),
            },
        );
        self.layers.push(LayerSpec {
            id: id.to_string(),
            kind: LayerKind::Batchnorm {
                eps: self.config.bn_eps,
            },
            init: Some(LayerInit {
                weight: InitSpec::zeros(),
                bias: InitSpec::zeros(),
            }),
            inputs: vec![input.to_string()],
        });
        id.to_string()
    }

    fn relu(&mut self, id: &str, input: &str) -> String {
        self.layers.push(LayerSpec {
            id: id.to_string(),
            kind: LayerKind::Relu,
            init: None,
            inputs: vec![input.to_string()],
        });
        id.to_string()
    }

    fn maxpool(&mut self, id: &str, input: &str, kernel: usize, stride: usize, padding: usize) -> String {
        self.layers.push(LayerSpec {
            id: id.to_string(),
            kind: LayerKind::Maxpool {
                kernel,
                stride,
                padding,
            },
            init: None,
            inputs: vec![input.to_string()],
        });
        id.to_string()
    }

    fn gap(&mut self, id: &str, input: &str) -> String {
        self.layers.push(LayerSpec {
            id: id.to_string(),
            kind: LayerKind::GlobalAvgPool,
            init: None,
            inputs: vec![input.to_string()],
        });
        id.to_string()
    }

    fn linear(&mut self, id: &str, input: &str, in_features: usize, out_features: usize) -> String {
        let init = LayerInit::default();
        let mut rng = self.layer_rng(id);
        let weight = crate::init::sample_init(
            &init.weight,
            &[out_features, in_features],
            &mut rng,
            self.config.dtype,
        )
        .expect("valid linear init");
        let bias = crate::init::sample_init(&init.bias, &[out_features], &mut rng, self.config.dtype)
            .expect("valid bias init");
        self.params.insert(
            id.to_string(),
            LayerParams::Linear {
                weight,
                bias: Some(bias),
            },
        );
        self.layers.push(LayerSpec {
            id: id.to_string(),
            kind: LayerKind::Linear {
                out_features,
                bias: true,
            },
            init: Some(init),
            inputs: vec![input.to_string()],
        });
        id.to_string()
    }

    fn add(&mut self, id: &str, a: &str, bb: &str) -> String {
        self.layers.push(LayerSpec {
            id: id.to_string(),
            kind: LayerKind::ResidualAdd,
            init: None,
            inputs: vec![a.to_string(), bb.to_string()],
        });
        id.to_string()
    }

    /// One residual block; returns (output layer id, output channels).
    ///
    /// Output sizes must divide exactly, so halving blocks use 2x2
    /// stride-2 kernels for the strided members (spatial conv and skip
    /// projection); even spatial sizes then halve with no remainder.
    fn residual_block(
        &mut self,
        prefix: &str,
        input: &str,
        in_channels: usize,
        width: usize,
        stride: usize,
        kind: BlockKind,
    ) -> (String, usize) {
        let out_channels = match kind {
            BlockKind::Basic => width,
            BlockKind::Bottleneck { expansion } => width * expansion,
        };
        let (sk, sp) = if stride == 1 { (3, 1) } else { (2, 0) };
        let branch = match kind {
            BlockKind::Basic => {
                let c1 = self.conv(&format!("{prefix}.conv1"), input, in_channels, width, sk, stride, sp);
                let b1 = self.batchnorm(&format!("{prefix}.bn1"), &c1, width);
                let r1 = self.relu(&format!("{prefix}.relu1"), &b1);
                let c2 = self.conv(&format!("{prefix}.conv2"), &r1, width, width, 3, 1, 1);
                self.batchnorm(&format!("{prefix}.bn2"), &c2, width)
            }
            BlockKind::Bottleneck { .. } => {
                let c1 = self.conv(&format!("{prefix}.conv1"), input, in_channels, width, 1, 1, 0);
                let b1 = self.batchnorm(&format!("{prefix}.bn1"), &c1, width);
                let r1 = self.relu(&format!("{prefix}.relu1"), &b1);
                let c2 = self.conv(&format!("{prefix}.conv2"), &r1, width, width, sk, stride, sp);
                let b2 = self.batchnorm(&format!("{prefix}.bn2"), &c2, width);
                let r2 = self.relu(&format!("{prefix}.relu2"), &b2);
                let c3 = self.conv(&format!("{prefix}.conv3"), &r2, width, out_channels, 1, 1, 0);
                self.batchnorm(&format!("{prefix}.bn3"), &c3, out_channels)
            }
        };
        let skip = if stride != 1 || in_channels != out_channels {
            let ds = self.conv(
                &format!("{prefix}.downsample"),
                input,
                in_channels,
                out_channels,
                if stride == 1 { 1 } else { 2 },
                stride,
                0,
            );
            self.batchnorm(&format!("{prefix}.downsample_bn"), &ds, out_channels)
        } else {
            input.to_string()
        };
        let sum = self.add(&format!("{prefix}.add"), &branch, &skip);
        let out = self.relu(&format!("{prefix}.relu"), &sum);
        (out, out_channels)
    }
}
