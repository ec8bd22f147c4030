//! Model geometries and seeded random instances of them.
//!
//! Random models have uniform `{-1, +1}` weights and per-channel staircase
//! thresholds sized to the accumulator spread of each layer. They are used
//! for tests, benchmarks and the CLI's `init-model` command; trained
//! weights come from an exported weight file instead.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Result};
use crate::qlayers::{BinaryWeights, ThresholdParams, WeightShape, THRESHOLDS_PER_CHANNEL};
use crate::qtensor::{QTensor, QMAX};
use crate::staged_model::{stage_flops, FeatureShape, LayerSpec, StageSpec, StagedModel, HEAD_STAGE_ID};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvBlueprint {
    pub out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    /// Optional `(k, stride)` max pool after the activation.
    pub pool: Option<(usize, usize)>,
}

impl ConvBlueprint {
    pub const fn same(out: usize) -> Self {
        Self { out, k: 3, stride: 1, pad: 1, pool: None }
    }

    pub const fn down(out: usize) -> Self {
        Self { out, k: 3, stride: 2, pad: 1, pool: None }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageBlueprint {
    pub convs: Vec<ConvBlueprint>,
    pub config_ms: f64,
    pub fpga_ms: f64,
    pub cpu_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelBlueprint {
    pub input: FeatureShape,
    pub num_classes: usize,
    pub stages: Vec<StageBlueprint>,
    pub head_fpga_ms: f64,
    pub head_cpu_ms: f64,
    /// Real value of one activation step in every layer.
    pub act_scale: f64,
}

fn stage(convs: Vec<ConvBlueprint>, cpu_ms: f64) -> StageBlueprint {
    StageBlueprint {
        convs,
        config_ms: 40.0,
        fpga_ms: 2.0,
        cpu_ms,
    }
}

/// ResNet-style plain stack at 32x32x3 in three groups of widths 16/32/64,
/// two downsampling steps, for CIFAR-sized inputs.
pub fn resnet_blueprint(num_classes: usize) -> ModelBlueprint {
    let group = |first: ConvBlueprint, width: usize, rest: usize| {
        std::iter::once(first)
            .chain(std::iter::repeat_n(ConvBlueprint::same(width), rest))
            .collect::<Vec<_>>()
    };
    ModelBlueprint {
        input: FeatureShape::new(3, 32, 32),
        num_classes,
        stages: vec![
            stage(group(ConvBlueprint::same(16), 16, 4), 98.0),
            stage(group(ConvBlueprint::down(32), 32, 3), 57.0),
            stage(group(ConvBlueprint::down(64), 64, 3), 49.0),
        ],
        head_fpga_ms: 0.05,
        head_cpu_ms: 0.5,
        act_scale: 0.125,
    }
}

/// Three tiny stages on 3x8x8 inputs.
pub fn toy_blueprint(num_classes: usize) -> ModelBlueprint {
    ModelBlueprint {
        input: FeatureShape::new(3, 8, 8),
        num_classes,
        stages: vec![
            stage(vec![ConvBlueprint::same(4)], 98.0),
            stage(vec![ConvBlueprint::down(6)], 57.0),
            stage(
                vec![ConvBlueprint { pool: Some((2, 2)), ..ConvBlueprint::same(8) }],
                49.0,
            ),
        ],
        head_fpga_ms: 0.05,
        head_cpu_ms: 0.5,
        act_scale: 0.125,
    }
}

fn random_signs(rng: &mut ChaCha8Rng, n: usize) -> Vec<i8> {
    (0..n).map(|_| if rng.random::<bool>() { 1 } else { -1 }).collect()
}

fn random_thresholds(rng: &mut ChaCha8Rng, channels: usize, fan_in: usize) -> Result<ThresholdParams> {
    // accumulator spread for activations with rms around a third of full scale
    let sigma = (fan_in as f64).sqrt() * QMAX as f64 / 3.0;
    let step = ((2.0 * sigma) / THRESHOLDS_PER_CHANNEL as f64).ceil().max(1.0) as i32;
    let mut values = Vec::with_capacity(channels * THRESHOLDS_PER_CHANNEL);
    for _ in 0..channels {
        let offset = rng.random_range(-(sigma as i32 / 2)..=(sigma as i32 / 4));
        values.extend((1..=THRESHOLDS_PER_CHANNEL as i32).map(|k| offset + k * step));
    }
    ThresholdParams::new(channels, values)
}

/// Random model with the given geometry.
pub fn random_model(bp: &ModelBlueprint, seed: u64) -> Result<StagedModel> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shape = bp.input;
    let mut stages = Vec::new();
    let mut widths = Vec::new();
    for (i, sb) in bp.stages.iter().enumerate() {
        let stage_input = shape;
        let mut layers = Vec::new();
        for cb in &sb.convs {
            let ws = WeightShape::conv(cb.out, shape.c, cb.k, cb.k);
            let weights = BinaryWeights::from_signs(ws, &random_signs(&mut rng, ws.len()))?;
            layers.push(LayerSpec::BinaryConv { weights, stride: cb.stride, pad: cb.pad });
            layers.push(LayerSpec::ThresholdActivate {
                thresholds: random_thresholds(&mut rng, cb.out, ws.row_len())?,
                out_scale: bp.act_scale,
            });
            let dim = |d: usize, k: usize, pad: usize, s: usize| {
                (d + 2 * pad).checked_sub(k).filter(|_| s > 0).map(|r| r / s + 1)
            };
            let (h, w) = match (
                dim(shape.h, cb.k, cb.pad, cb.stride),
                dim(shape.w, cb.k, cb.pad, cb.stride),
            ) {
                (Some(h), Some(w)) => (h, w),
                _ => return invalid(format!("kernel {} does not fit {}x{}", cb.k, shape.h, shape.w)),
            };
            shape = FeatureShape::new(cb.out, h, w);
            if let Some((k, s)) = cb.pool {
                layers.push(LayerSpec::MaxPool { k, stride: s });
                match (dim(shape.h, k, 0, s), dim(shape.w, k, 0, s)) {
                    (Some(h), Some(w)) => shape = FeatureShape::new(shape.c, h, w),
                    _ => return invalid(format!("pool {k} does not fit {}x{}", shape.h, shape.w)),
                }
            }
        }
        let flops = stage_flops(&layers, stage_input);
        stages.push(StageSpec {
            id: i as u32 + 1,
            layers,
            flops,
            config_ms: sb.config_ms,
            fpga_exec_ms_per_image: sb.fpga_ms,
            cpu_exec_ms_per_image: sb.cpu_ms,
        });
        widths.push(shape.c);
    }
    let mut head = vec![LayerSpec::GlobalAvgPool];
    for (i, &c) in widths.iter().enumerate() {
        let ws = WeightShape::dense(bp.num_classes, c);
        let weights = BinaryWeights::from_signs(ws, &random_signs(&mut rng, ws.len()))?;
        let bias = (0..bp.num_classes).map(|_| rng.random_range(-0.5f32..0.5)).collect();
        head.push(LayerSpec::FullyConnected { weights, bias, branch: i as u32 + 1 });
    }
    let head_flops = stage_flops(&head, shape);
    stages.push(StageSpec {
        id: HEAD_STAGE_ID,
        layers: head,
        flops: head_flops,
        config_ms: 0.0,
        fpga_exec_ms_per_image: bp.head_fpga_ms,
        cpu_exec_ms_per_image: bp.head_cpu_ms,
    });
    StagedModel::new(bp.num_classes, bp.input, stages, None)
}

/// Uniformly random images (codes, scale 1/31) and labels.
pub fn random_images(shape: FeatureShape, num_classes: usize, n: usize, seed: u64) -> (QTensor, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = shape.batch(n);
    let data = (0..s.len()).map(|_| rng.random_range(0..=QMAX)).collect();
    let labels = (0..n).map(|_| rng.random_range(0..num_classes)).collect();
    (
        QTensor::new(s, data, 1.0 / QMAX as f64).expect("codes in range"),
        labels,
    )
}
