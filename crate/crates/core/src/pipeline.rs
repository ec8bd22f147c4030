//! Batched early-exit inference.
//!
//! Each image is evaluated stage by stage; after every stage but the last
//! the gate either accepts the stage's prediction (Stop) or forwards the
//! image to the next stage (Continue). The batch is reorganised by stage so
//! that every stage runs once over all of its survivors, which is what the
//! reconfiguration schedule needs. Per-image results equal those of running
//! the images one at a time.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::gating::{confidence, decide_at, Action, Decision, GateConfig, SweepPoint};
use crate::qlayers::{argmax, Probs};
use crate::qtensor::QTensor;
use crate::reconfig_sim::{simulate_batch, SimMode, SimOptions, SimReport, StageCost};
use crate::staged_model::StagedModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecMode {
    #[default]
    FpgaSim,
    CpuSim,
    /// Inference only, no timing model.
    ComputeOnly,
}

impl ExecMode {
    fn sim_mode(self) -> Option<SimMode> {
        match self {
            Self::FpgaSim => Some(SimMode::Fpga),
            Self::CpuSim => Some(SimMode::Cpu),
            Self::ComputeOnly => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub gate: GateConfig,
    pub batch_size: usize,
    pub mode: ExecMode,
    /// Bypass the gate: every image runs through every stage.
    pub force_full: bool,
    pub sim: SimOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            gate: GateConfig::default(),
            batch_size: 512,
            mode: ExecMode::FpgaSim,
            force_full: false,
            sim: SimOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageResult {
    pub predicted: usize,
    pub exit_stage: u32,
    /// Confidence of the accepted prediction.
    pub beta: f64,
    /// Gate decisions, one per gated stage visited.
    pub decisions: Vec<Decision>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceResult {
    pub images: Vec<ImageResult>,
    /// Images exiting at each conv stage.
    pub exit_counts: Vec<usize>,
    pub stop_ratios: Vec<f64>,
    /// Images evaluated by each conv stage, summed over batches.
    pub survivors: Vec<usize>,
    pub flops_fraction: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sim: Option<SimReport>,
}

impl InferenceResult {
    pub fn exit_stages(&self) -> Vec<u32> {
        self.images.iter().map(|i| i.exit_stage).collect()
    }

    pub fn predictions(&self) -> Vec<usize> {
        self.images.iter().map(|i| i.predicted).collect()
    }
}

/// Per-stage cost with the head evaluation for that branch folded in.
pub fn branch_costs(model: &StagedModel) -> Vec<StageCost> {
    model
        .conv_stages()
        .iter()
        .map(|s| {
            let mut c = s.cost();
            c.flops += model.head_flops(s.id);
            c
        })
        .collect()
}

fn check_inputs(
    model: &StagedModel,
    images: &QTensor,
    labels: Option<&[usize]>,
    cfg: &RunConfig,
) -> Result<()> {
    if cfg.batch_size == 0 {
        return invalid("batch size must be positive");
    }
    let n = images.shape().n;
    if n == 0 {
        return invalid("no images to run");
    }
    let expected = model.input_shape();
    let got = crate::staged_model::FeatureShape::of(images.shape());
    if got != expected {
        return invalid(format!("model expects {expected} images, got {got}"));
    }
    if let Some(l) = labels {
        if l.len() != n {
            return invalid(format!("{} labels for {n} images", l.len()));
        }
        if let Some(bad) = l.iter().find(|&&c| c >= model.num_classes()) {
            return invalid(format!("label {bad} >= {} classes", model.num_classes()));
        }
    }
    cfg.gate.validate(model.num_classes())
}

/// Routing of one image after a stage, with the gate decision if a gate
/// was evaluated.
enum Step {
    Exit(Option<Decision>),
    Forward(Option<Decision>),
}

/// Applies the gate after `stage` (1-based). The last stage always accepts;
/// with `force_full` every other stage forwards without a decision.
fn gate(probs: &[f64], stage: usize, last: bool, cfg: &RunConfig) -> Result<Step> {
    if last {
        return Ok(Step::Exit(None));
    }
    if cfg.force_full {
        return Ok(Step::Forward(None));
    }
    let d = decide_at(probs, &cfg.gate, stage)?;
    Ok(match d.action {
        Action::Continue => Step::Forward(Some(d)),
        Action::Stop => Step::Exit(Some(d)),
    })
}

fn finish(probs: &[f64], stage: usize, decisions: Vec<Decision>) -> Result<ImageResult> {
    Ok(ImageResult {
        predicted: argmax(probs).expect("at least one class"),
        exit_stage: stage as u32,
        beta: confidence(probs)?,
        decisions,
    })
}

/// Runs one batch through the staged model and gate.
fn route_batch(model: &StagedModel, images: &QTensor, cfg: &RunConfig) -> Result<Vec<ImageResult>> {
    let n = images.shape().n;
    let stages = model.num_conv_stages();
    let mut results: Vec<Option<ImageResult>> = vec![None; n];
    let mut decisions: Vec<Vec<Decision>> = vec![Vec::new(); n];
    let mut active: Vec<usize> = (0..n).collect();
    let mut input = images.clone();
    for stage in 1..=stages {
        if active.is_empty() {
            break;
        }
        let out = model.forward_stage(stage as u32, &input)?;
        let last = stage == stages;
        let mut keep = Vec::new();
        for (row, &img) in active.iter().enumerate() {
            let probs = out.probs.row(row);
            match gate(probs, stage, last, cfg)? {
                Step::Forward(d) => {
                    decisions[img].extend(d);
                    keep.push(row);
                }
                Step::Exit(d) => {
                    decisions[img].extend(d);
                    results[img] = Some(finish(probs, stage, std::mem::take(&mut decisions[img]))?);
                }
            }
        }
        active = keep.iter().map(|&r| active[r]).collect();
        if !active.is_empty() {
            input = out.features.select(&keep)?;
        }
    }
    Ok(results
        .into_iter()
        .map(|r| r.expect("every image exits at some stage"))
        .collect())
}

/// Survivor counts per stage for a set of exit stages.
fn survivors_of(exits: impl Iterator<Item = u32>, stages: usize) -> Vec<usize> {
    let mut s = vec![0; stages];
    for e in exits {
        for v in s.iter_mut().take(e as usize) {
            *v += 1;
        }
    }
    s
}

fn summarize(
    model: &StagedModel,
    images: Vec<ImageResult>,
    labels: Option<&[usize]>,
    cfg: &RunConfig,
) -> Result<InferenceResult> {
    let stages = model.num_conv_stages();
    let n = images.len();
    let costs = branch_costs(model);
    let mut exit_counts = vec![0; stages];
    for img in &images {
        exit_counts[img.exit_stage as usize - 1] += 1;
    }
    let sim = match cfg.mode.sim_mode() {
        Some(mode) => {
            let reports = images
                .chunks(cfg.batch_size)
                .map(|chunk| {
                    let surv = survivors_of(chunk.iter().map(|i| i.exit_stage), stages);
                    simulate_batch(&costs, &surv, chunk.len(), mode, cfg.sim)
                })
                .collect::<Result<Vec<_>>>()?;
            Some(SimReport::sequence(&reports)?)
        }
        None => None,
    };
    let survivors = survivors_of(images.iter().map(|i| i.exit_stage), stages);
    let flops: Vec<u64> = costs.iter().map(|c| c.flops).collect();
    let flops_fraction = crate::reconfig_sim::computation_fraction(&survivors, &flops, n)?;
    let accuracy = labels.map(|l| {
        let hits = images.iter().zip(l).filter(|(r, &y)| r.predicted == y).count();
        hits as f64 / n as f64
    });
    Ok(InferenceResult {
        stop_ratios: exit_counts.iter().map(|&c| c as f64 / n as f64).collect(),
        exit_counts,
        survivors,
        flops_fraction,
        accuracy,
        sim,
        images,
    })
}

/// Runs every image through the gated cascade, `cfg.batch_size` images at a
/// time.
pub fn run_batch(
    model: &StagedModel,
    images: &QTensor,
    labels: Option<&[usize]>,
    cfg: &RunConfig,
) -> Result<InferenceResult> {
    check_inputs(model, images, labels, cfg)?;
    let n = images.shape().n;
    let mut routed = Vec::with_capacity(n);
    for start in (0..n).step_by(cfg.batch_size) {
        let idx: Vec<usize> = (start..(start + cfg.batch_size).min(n)).collect();
        routed.extend(route_batch(model, &images.select(&idx)?, cfg)?);
    }
    summarize(model, routed, labels, cfg)
}

/// Head probabilities of every image at every conv stage (no gating).
pub fn stage_trace(model: &StagedModel, images: &QTensor) -> Result<Vec<Probs>> {
    let mut out = Vec::with_capacity(model.num_conv_stages());
    let mut input = images.clone();
    for stage in 1..=model.num_conv_stages() {
        let o = model.forward_stage(stage as u32, &input)?;
        out.push(o.probs);
        input = o.features;
    }
    Ok(out)
}

/// Routes every image through a precomputed trace; equal to
/// [`run_batch`]'s routing because stages act on each image independently.
fn route_trace(trace: &[Probs], n: usize, cfg: &RunConfig) -> Result<Vec<ImageResult>> {
    let stages = trace.len();
    (0..n)
        .map(|img| {
            let mut decisions = Vec::new();
            for stage in 1..=stages {
                let probs = trace[stage - 1].row(img);
                match gate(probs, stage, stage == stages, cfg)? {
                    Step::Forward(d) => decisions.extend(d),
                    Step::Exit(d) => {
                        decisions.extend(d);
                        return finish(probs, stage, decisions);
                    }
                }
            }
            unreachable!("last stage always accepts")
        })
        .collect()
}

/// One row of a trigger-point sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub gamma: f64,
    pub accuracy: f64,
    pub flops_fraction: f64,
    /// Fraction of images forwarded past the first stage.
    pub forwarded: f64,
    #[serde(default)]
    pub throughput: Option<f64>,
}

impl SweepRow {
    pub fn point(&self) -> SweepPoint {
        SweepPoint {
            gamma: self.gamma,
            accuracy: self.accuracy,
            forwarded: self.forwarded,
        }
    }
}

/// Evaluates the cascade at each trigger point (applied at every gate),
/// sorted by trigger point. Stage outputs are computed once and reused.
pub fn sweep_gamma(
    model: &StagedModel,
    images: &QTensor,
    labels: &[usize],
    gammas: &[f64],
    base: &RunConfig,
) -> Result<Vec<SweepRow>> {
    if gammas.is_empty() {
        return invalid("gamma list is empty");
    }
    let mut sorted = gammas.to_vec();
    if sorted.iter().any(|g| g.is_nan()) {
        return invalid("NaN trigger point");
    }
    sorted.sort_by(f64::total_cmp);
    check_inputs(model, images, Some(labels), base)?;
    let trace = stage_trace(model, images)?;
    let n = images.shape().n;
    sorted
        .into_iter()
        .map(|gamma| {
            let cfg = RunConfig {
                gate: GateConfig {
                    gamma,
                    branch_gammas: None,
                    ..base.gate.clone()
                },
                force_full: false,
                ..base.clone()
            };
            cfg.gate.validate(model.num_classes())?;
            let r = summarize(model, route_trace(&trace, n, &cfg)?, Some(labels), &cfg)?;
            Ok(SweepRow {
                gamma,
                accuracy: r.accuracy.expect("labels supplied"),
                flops_fraction: r.flops_fraction,
                forwarded: 1.0 - r.stop_ratios[0],
                throughput: r.sim.map(|s| s.throughput_imgs_per_s),
            })
        })
        .collect()
}
