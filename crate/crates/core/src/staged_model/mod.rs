//! Staged network definition: conv stages `1..=K` (K <= 3) plus the shared
//! classification head, stored as stage [`HEAD_STAGE_ID`].
//!
//! The head is a global average pool followed by one fully connected layer
//! per conv stage (tagged with the stage it serves), so branches with
//! different channel widths share the same static head slot.

mod format;

pub use format::{load_model, save_model, MAGIC, VERSION};

use serde::{Deserialize, Serialize};

use crate::error::{ParseError, Result};
use crate::qlayers::{
    binary_conv2d, fully_connected, global_avgpool, maxpool2d, softmax, threshold_activate,
    BinaryWeights, Logits, Probs, ThresholdParams,
};
use crate::qtensor::{QTensor, Shape};
use crate::reconfig_sim::StageCost;

/// Stage id of the shared head.
pub const HEAD_STAGE_ID: u32 = 4;
/// Maximum number of conv stages.
pub const MAX_CONV_STAGES: usize = 3;

/// Per-sample feature shape `(C, H, W)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FeatureShape {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl FeatureShape {
    pub const fn new(c: usize, h: usize, w: usize) -> Self {
        Self { c, h, w }
    }

    pub const fn batch(&self, n: usize) -> Shape {
        Shape::new(n, self.c, self.h, self.w)
    }

    pub const fn of(shape: Shape) -> Self {
        Self::new(shape.c, shape.h, shape.w)
    }
}

impl std::fmt::Display for FeatureShape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.c, self.h, self.w)
    }
}

/// Layer kind tags, as stored in the weight file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum LayerKind {
    BinaryConv = 0,
    ThresholdActivate = 1,
    MaxPool = 2,
    GlobalAvgPool = 3,
    FullyConnected = 4,
}

impl TryFrom<u8> for LayerKind {
    type Error = ParseError;

    fn try_from(v: u8) -> Result<Self, ParseError> {
        Ok(match v {
            0 => Self::BinaryConv,
            1 => Self::ThresholdActivate,
            2 => Self::MaxPool,
            3 => Self::GlobalAvgPool,
            4 => Self::FullyConnected,
            other => return Err(ParseError::UnknownLayerKind(other)),
        })
    }
}

/// One layer together with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    BinaryConv {
        weights: BinaryWeights,
        stride: usize,
        pad: usize,
    },
    ThresholdActivate {
        thresholds: ThresholdParams,
        out_scale: f64,
    },
    MaxPool {
        k: usize,
        stride: usize,
    },
    GlobalAvgPool,
    /// Head classifier for the conv stage `branch`.
    FullyConnected {
        weights: BinaryWeights,
        bias: Vec<f32>,
        branch: u32,
    },
}

impl LayerSpec {
    pub fn kind(&self) -> LayerKind {
        match self {
            Self::BinaryConv { .. } => LayerKind::BinaryConv,
            Self::ThresholdActivate { .. } => LayerKind::ThresholdActivate,
            Self::MaxPool { .. } => LayerKind::MaxPool,
            Self::GlobalAvgPool => LayerKind::GlobalAvgPool,
            Self::FullyConnected { .. } => LayerKind::FullyConnected,
        }
    }
}

/// Value flowing between layers while checking composition.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Flow {
    Codes(FeatureShape),
    Accum(FeatureShape),
    Pooled(usize),
    Logits(usize),
}

fn window_out(size: usize, pad: usize, k: usize, stride: usize) -> Option<usize> {
    let padded = size + 2 * pad;
    (k > 0 && stride > 0 && padded >= k).then(|| (padded - k) / stride + 1)
}

fn step(flow: Flow, layer: &LayerSpec) -> Result<Flow, String> {
    match (flow, layer) {
        (Flow::Codes(s), LayerSpec::BinaryConv { weights, stride, pad }) => {
            let ws = weights.shape();
            if ws.inp != s.c {
                return Err(format!("conv expects {} input channels, got {}", ws.inp, s.c));
            }
            match (window_out(s.h, *pad, ws.kh, *stride), window_out(s.w, *pad, ws.kw, *stride)) {
                (Some(h), Some(w)) if h > 0 && w > 0 && ws.out > 0 => {
                    Ok(Flow::Accum(FeatureShape::new(ws.out, h, w)))
                }
                _ => Err(format!("conv {}x{} does not fit input {s}", ws.kh, ws.kw)),
            }
        }
        (Flow::Accum(s), LayerSpec::ThresholdActivate { thresholds, out_scale }) => {
            if thresholds.channels() != s.c {
                return Err(format!(
                    "threshold has {} channels, input has {}",
                    thresholds.channels(),
                    s.c
                ));
            }
            if !(out_scale.is_finite() && *out_scale > 0.0) {
                return Err(format!("threshold output scale {out_scale} not positive"));
            }
            Ok(Flow::Codes(s))
        }
        (Flow::Codes(s), LayerSpec::MaxPool { k, stride }) => {
            match (window_out(s.h, 0, *k, *stride), window_out(s.w, 0, *k, *stride)) {
                (Some(h), Some(w)) => Ok(Flow::Codes(FeatureShape::new(s.c, h, w))),
                _ => Err(format!("maxpool {k}x{k} does not fit input {s}")),
            }
        }
        (Flow::Codes(s), LayerSpec::GlobalAvgPool) => Ok(Flow::Pooled(s.c)),
        (Flow::Pooled(c), LayerSpec::FullyConnected { weights, bias, .. }) => {
            let ws = weights.shape();
            if ws.kh != 1 || ws.kw != 1 || ws.inp != c {
                return Err(format!("fully connected expects {} features, got {c}", ws.inp));
            }
            if bias.len() != ws.out {
                return Err(format!("{} biases for {} outputs", bias.len(), ws.out));
            }
            Ok(Flow::Logits(ws.out))
        }
        (flow, layer) => Err(format!("{:?} layer cannot follow {flow:?}", layer.kind())),
    }
}

/// Multiply-accumulate count of a layer list applied to one sample of
/// shape `input`. Convolutions count `out_elems * in * kh * kw`, dense
/// layers `in * out`; other layers are free.
pub fn stage_flops(layers: &[LayerSpec], input: FeatureShape) -> u64 {
    let mut shape = input;
    let mut total = 0u64;
    for layer in layers {
        match layer {
            LayerSpec::BinaryConv { weights, stride, pad } => {
                let ws = weights.shape();
                let h = window_out(shape.h, *pad, ws.kh, *stride).unwrap_or(0);
                let w = window_out(shape.w, *pad, ws.kw, *stride).unwrap_or(0);
                total += (ws.out * h * w * ws.row_len()) as u64;
                shape = FeatureShape::new(ws.out, h, w);
            }
            LayerSpec::MaxPool { k, stride } => {
                shape.h = window_out(shape.h, 0, *k, *stride).unwrap_or(0);
                shape.w = window_out(shape.w, 0, *k, *stride).unwrap_or(0);
            }
            LayerSpec::FullyConnected { weights, .. } => {
                total += (weights.shape().inp * weights.shape().out) as u64;
            }
            LayerSpec::ThresholdActivate { .. } | LayerSpec::GlobalAvgPool => {}
        }
    }
    total
}

/// A stage: its layers plus the hardware cost metadata used by the
/// simulator.
#[derive(Debug, Clone, PartialEq)]
pub struct StageSpec {
    pub id: u32,
    pub layers: Vec<LayerSpec>,
    pub flops: u64,
    pub config_ms: f64,
    pub fpga_exec_ms_per_image: f64,
    pub cpu_exec_ms_per_image: f64,
}

impl StageSpec {
    pub fn cost(&self) -> StageCost {
        StageCost {
            id: self.id,
            flops: self.flops,
            config_ms: self.config_ms,
            fpga_exec_ms: self.fpga_exec_ms_per_image,
            cpu_exec_ms: self.cpu_exec_ms_per_image,
        }
    }
}

/// Output of one conv stage and its head branch.
#[derive(Debug, Clone, PartialEq)]
pub struct StageOutput {
    pub features: QTensor,
    pub probs: Probs,
}

/// Validated staged model. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct StagedModel {
    num_classes: usize,
    input: FeatureShape,
    stages: Vec<StageSpec>,
    class_names: Option<Vec<String>>,
    // derived: input shape of each conv stage plus the final feature shape
    feature_shapes: Vec<FeatureShape>,
}

impl StagedModel {
    /// Builds a model from conv stages `1..=K` followed by the head stage.
    pub fn new(
        num_classes: usize,
        input: FeatureShape,
        stages: Vec<StageSpec>,
        class_names: Option<Vec<String>>,
    ) -> Result<Self> {
        let feature_shapes = validate(num_classes, input, &stages, class_names.as_deref())?;
        Ok(Self {
            num_classes,
            input,
            stages,
            class_names,
            feature_shapes,
        })
    }

    /// Copy with every conv stage's reconfiguration time set to `ms`.
    pub fn with_config_ms(&self, ms: f64) -> Result<Self> {
        let mut stages = self.stages.clone();
        let n = self.num_conv_stages();
        for s in &mut stages[..n] {
            s.config_ms = ms;
        }
        Self::new(self.num_classes, self.input, stages, self.class_names.clone())
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn input_shape(&self) -> FeatureShape {
        self.input
    }

    pub fn class_names(&self) -> Option<&[String]> {
        self.class_names.as_deref()
    }

    /// All stages, head last.
    pub fn stages(&self) -> &[StageSpec] {
        &self.stages
    }

    pub fn num_conv_stages(&self) -> usize {
        self.stages.len() - 1
    }

    pub fn conv_stages(&self) -> &[StageSpec] {
        &self.stages[..self.num_conv_stages()]
    }

    pub fn head(&self) -> &StageSpec {
        self.stages.last().expect("validated model has a head")
    }

    pub fn stage(&self, id: u32) -> Option<&StageSpec> {
        self.stages.iter().find(|s| s.id == id)
    }

    /// Expected per-sample input shape of conv stage `id`.
    pub fn stage_input_shape(&self, id: u32) -> Option<FeatureShape> {
        self.conv_index(id).map(|i| self.feature_shapes[i])
    }

    /// Per-sample output shape of conv stage `id`.
    pub fn stage_output_shape(&self, id: u32) -> Option<FeatureShape> {
        self.conv_index(id).map(|i| self.feature_shapes[i + 1])
    }

    fn conv_index(&self, id: u32) -> Option<usize> {
        let i = (id as usize).checked_sub(1)?;
        (i < self.num_conv_stages()).then_some(i)
    }

    /// MACs of one head evaluation for branch `id`.
    pub fn head_flops(&self, id: u32) -> u64 {
        self.head()
            .layers
            .iter()
            .filter_map(|l| match l {
                LayerSpec::FullyConnected { weights, branch, .. } if *branch == id => {
                    Some((weights.shape().inp * weights.shape().out) as u64)
                }
                _ => None,
            })
            .sum()
    }

    /// Runs conv stage `stage_id` on `input` and scores its features with
    /// the head branch for that stage.
    pub fn forward_stage(&self, stage_id: u32, input: &QTensor) -> Result<StageOutput> {
        let Some(i) = self.conv_index(stage_id) else {
            return crate::error::invalid(format!("no conv stage {stage_id}"));
        };
        let expected = self.feature_shapes[i];
        if FeatureShape::of(input.shape()) != expected {
            return crate::error::invalid(format!(
                "stage {stage_id} expects {expected} samples, got {}",
                FeatureShape::of(input.shape())
            ));
        }
        let features = run_conv_group(&self.stages[i].layers, input)?;
        let logits = self.head_logits(stage_id, &features)?;
        let probs = softmax(&logits)?;
        Ok(StageOutput { features, probs })
    }

    /// Head logits for conv stage `branch` given its output features.
    pub fn head_logits(&self, branch: u32, features: &QTensor) -> Result<Logits> {
        let pooled = global_avgpool(features);
        let fc = self.head().layers.iter().find_map(|l| match l {
            LayerSpec::FullyConnected { weights, bias, branch: b } if *b == branch => {
                Some((weights, bias))
            }
            _ => None,
        });
        let Some((weights, bias)) = fc else {
            return crate::error::invalid(format!("head has no classifier for stage {branch}"));
        };
        fully_connected(&pooled, weights, bias)
    }
}

fn run_conv_group(layers: &[LayerSpec], input: &QTensor) -> Result<QTensor> {
    let mut codes = input.clone();
    let mut acc = None;
    for layer in layers {
        match layer {
            LayerSpec::BinaryConv { weights, stride, pad } => {
                acc = Some(binary_conv2d(&codes, weights, *stride, *pad)?);
            }
            LayerSpec::ThresholdActivate { thresholds, out_scale } => {
                let a = acc.take().expect("validated: threshold follows conv");
                codes = threshold_activate(&a, thresholds, *out_scale)?;
            }
            LayerSpec::MaxPool { k, stride } => codes = maxpool2d(&codes, *k, *stride)?,
            LayerSpec::GlobalAvgPool | LayerSpec::FullyConnected { .. } => {
                unreachable!("validated: conv stages hold no head layers")
            }
        }
    }
    Ok(codes)
}

fn composition(msg: impl Into<String>) -> ParseError {
    ParseError::ShapeComposition(msg.into())
}

fn field(msg: impl Into<String>) -> ParseError {
    ParseError::InvalidField(msg.into())
}

fn positive(v: f64) -> bool {
    v.is_finite() && v > 0.0
}

/// Checks stage ordering, cost metadata and shape composition. Returns
/// the input shape of every conv stage followed by the final feature shape.
fn validate(
    num_classes: usize,
    input: FeatureShape,
    stages: &[StageSpec],
    class_names: Option<&[String]>,
) -> Result<Vec<FeatureShape>, ParseError> {
    if num_classes == 0 {
        return Err(field("num_classes must be positive"));
    }
    if input.c == 0 || input.h == 0 || input.w == 0 {
        return Err(field(format!("input shape {input} has a zero dimension")));
    }
    if let Some(names) = class_names {
        if names.len() != num_classes {
            return Err(field(format!(
                "{} class names for {num_classes} classes",
                names.len()
            )));
        }
    }
    let Some((head, convs)) = stages.split_last() else {
        return Err(field("model has no stages"));
    };
    if convs.is_empty() || convs.len() > MAX_CONV_STAGES {
        return Err(field(format!(
            "expected 1..={MAX_CONV_STAGES} conv stages, found {}",
            convs.len()
        )));
    }
    if head.id != HEAD_STAGE_ID {
        return Err(field(format!("last stage must be the head ({HEAD_STAGE_ID}), found {}", head.id)));
    }

    let mut shapes = vec![input];
    for (i, stage) in convs.iter().enumerate() {
        let want = i as u32 + 1;
        if stage.id != want {
            return Err(field(format!("stage {} out of order, expected {want}", stage.id)));
        }
        if stage.flops == 0 {
            return Err(field(format!("stage {want}: flops must be positive")));
        }
        if !(positive(stage.config_ms)
            && positive(stage.fpga_exec_ms_per_image)
            && positive(stage.cpu_exec_ms_per_image))
        {
            return Err(field(format!("stage {want}: times must be positive")));
        }
        if stage.layers.is_empty() {
            return Err(composition(format!("stage {want} has no layers")));
        }
        let mut flow = Flow::Codes(*shapes.last().unwrap());
        for layer in &stage.layers {
            if matches!(layer, LayerSpec::GlobalAvgPool | LayerSpec::FullyConnected { .. }) {
                return Err(composition(format!("stage {want} contains a head layer")));
            }
            flow = step(flow, layer).map_err(|e| composition(format!("stage {want}: {e}")))?;
        }
        match flow {
            Flow::Codes(s) => shapes.push(s),
            other => {
                return Err(composition(format!(
                    "stage {want} must end in activation codes, ends in {other:?}"
                )))
            }
        }
    }

    if head.flops == 0 {
        return Err(field("head: flops must be positive"));
    }
    if head.config_ms != 0.0 {
        return Err(field("head lives in the static region; config_ms must be 0"));
    }
    if !(positive(head.fpga_exec_ms_per_image) && positive(head.cpu_exec_ms_per_image)) {
        return Err(field("head: execution times must be positive"));
    }
    let expected_len = 1 + convs.len();
    if head.layers.len() != expected_len || head.layers[0] != LayerSpec::GlobalAvgPool {
        return Err(composition(format!(
            "head must be a global average pool followed by {} classifiers",
            convs.len()
        )));
    }
    for (i, layer) in head.layers[1..].iter().enumerate() {
        let branch_id = i as u32 + 1;
        let LayerSpec::FullyConnected { branch, .. } = layer else {
            return Err(composition("head classifiers must be fully connected layers"));
        };
        if *branch != branch_id {
            return Err(composition(format!(
                "head classifier {i} serves stage {branch}, expected {branch_id}"
            )));
        }
        let flow = step(Flow::Pooled(shapes[i + 1].c), layer)
            .map_err(|e| composition(format!("head classifier for stage {branch_id}: {e}")))?;
        if flow != Flow::Logits(num_classes) {
            return Err(composition(format!(
                "head classifier for stage {branch_id} does not produce {num_classes} logits"
            )));
        }
    }
    Ok(shapes)
}
