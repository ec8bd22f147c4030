//! Cost model of a CPU + FPGA device with a static region (shared head and
//! interfaces) and a single reconfigurable slot that holds one conv stage
//! at a time.
//!
//! A batch is processed stage by stage: the slot is loaded with the stage's
//! bitstream once, then every surviving image is pushed through it. Stages
//! nobody reaches are neither configured nor executed.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Cost metadata of one stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageCost {
    pub id: u32,
    pub flops: u64,
    /// Bitstream load time.
    pub config_ms: f64,
    /// Per-image execution time on the fabric (head included).
    pub fpga_exec_ms: f64,
    /// Per-image execution time of the software implementation.
    pub cpu_exec_ms: f64,
}

/// Measured partial-bitstream load time range on the reference board.
pub const CONFIG_MS_RANGE: (f64, f64) = (38.0, 42.0);
/// Midpoint of [`CONFIG_MS_RANGE`].
pub const DEFAULT_CONFIG_MS: f64 = 40.0;

/// Per-stage costs measured for the three conv parts on the Zynq XC7Z020
/// deployment (config time at the midpoint of its measured range).
pub fn zynq_reference_costs() -> Vec<StageCost> {
    [(1, 10_240_000, 98.0), (2, 8_600_000, 57.0), (3, 8_500_000, 49.0)]
        .into_iter()
        .map(|(id, flops, cpu)| StageCost {
            id,
            flops,
            config_ms: DEFAULT_CONFIG_MS,
            fpga_exec_ms: 2.0,
            cpu_exec_ms: cpu,
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SimMode {
    Fpga,
    Cpu,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SimOptions {
    /// Extra per-image cost of evaluating the gate at each visited stage.
    pub gate_ms_per_image: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EventKind {
    Configure { stage: u32 },
    Execute { stage: u32, images: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimelineEvent {
    #[serde(flatten)]
    pub kind: EventKind,
    pub start_ms: f64,
    pub duration_ms: f64,
}

impl TimelineEvent {
    pub fn end_ms(&self) -> f64 {
        self.start_ms + self.duration_ms
    }
}

/// One CSV row: what happened at a stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub stage: u32,
    pub survivors: usize,
    pub config_ms: f64,
    pub exec_ms: f64,
    pub flops: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub mode: SimMode,
    pub batch: usize,
    pub events: Vec<TimelineEvent>,
    pub total_ms: f64,
    pub throughput_imgs_per_s: f64,
    pub survivors: Vec<usize>,
    pub flops_fraction: f64,
    /// Time the software implementation needs for the same routing.
    pub cpu_baseline_ms: f64,
    pub speedup_vs_cpu: f64,
    pub stages: Vec<StageSummary>,
}

fn check_survivors(survivors: &[usize], batch: usize) -> Result<()> {
    if batch == 0 {
        return invalid("batch size must be positive");
    }
    match survivors.first() {
        Some(&first) if first == batch => {}
        Some(&first) => {
            return invalid(format!("survivors[0] = {first} but batch is {batch}"));
        }
        None => return invalid("survivor list is empty"),
    }
    if survivors.windows(2).any(|w| w[1] > w[0]) {
        return invalid(format!("survivor counts must be non-increasing: {survivors:?}"));
    }
    Ok(())
}

/// Fraction of full-network MACs actually executed:
/// `sum(survivors[s] * flops[s]) / (batch * sum(flops))`.
pub fn computation_fraction(survivors: &[usize], flops: &[u64], batch: usize) -> Result<f64> {
    check_survivors(survivors, batch)?;
    if survivors.len() != flops.len() {
        return invalid(format!(
            "{} survivor counts for {} stages",
            survivors.len(),
            flops.len()
        ));
    }
    let total: f64 = flops.iter().map(|&f| f as f64).sum();
    if total <= 0.0 {
        return invalid("total flops must be positive");
    }
    let done: f64 = survivors
        .iter()
        .zip(flops)
        .map(|(&n, &f)| n as f64 * f as f64)
        .sum();
    Ok(done / (batch as f64 * total))
}

/// Builds the timeline for one batch.
pub fn simulate_batch(
    stages: &[StageCost],
    survivors: &[usize],
    batch: usize,
    mode: SimMode,
    opts: SimOptions,
) -> Result<SimReport> {
    check_survivors(survivors, batch)?;
    if survivors.len() != stages.len() {
        return invalid(format!(
            "{} survivor counts for {} stages",
            survivors.len(),
            stages.len()
        ));
    }
    for s in stages {
        let ok = s.config_ms.is_finite()
            && s.config_ms >= 0.0
            && s.fpga_exec_ms.is_finite()
            && s.fpga_exec_ms > 0.0
            && s.cpu_exec_ms.is_finite()
            && s.cpu_exec_ms > 0.0;
        if !ok {
            return invalid(format!("stage {}: invalid timing metadata", s.id));
        }
    }
    if !(opts.gate_ms_per_image.is_finite() && opts.gate_ms_per_image >= 0.0) {
        return invalid("gate cost must be non-negative");
    }

    let mut events = Vec::new();
    let mut clock = 0.0;
    let mut rows = Vec::with_capacity(stages.len());
    let mut push = |kind, duration: f64, clock: &mut f64| {
        events.push(TimelineEvent {
            kind,
            start_ms: *clock,
            duration_ms: duration,
        });
        *clock += duration;
    };
    for (s, &n) in stages.iter().zip(survivors) {
        let mut row = StageSummary {
            stage: s.id,
            survivors: n,
            config_ms: 0.0,
            exec_ms: 0.0,
            flops: s.flops,
        };
        if n > 0 {
            let per_image = match mode {
                SimMode::Fpga => s.fpga_exec_ms,
                SimMode::Cpu => s.cpu_exec_ms,
            } + opts.gate_ms_per_image;
            if mode == SimMode::Fpga && s.config_ms > 0.0 {
                row.config_ms = s.config_ms;
                push(EventKind::Configure { stage: s.id }, s.config_ms, &mut clock);
            }
            row.exec_ms = n as f64 * per_image;
            push(
                EventKind::Execute { stage: s.id, images: n },
                row.exec_ms,
                &mut clock,
            );
        }
        rows.push(row);
    }

    let total_ms: f64 = events.iter().map(|e| e.duration_ms).sum();
    let cpu_baseline_ms: f64 = stages
        .iter()
        .zip(survivors)
        .map(|(s, &n)| n as f64 * (s.cpu_exec_ms + opts.gate_ms_per_image))
        .sum();
    let flops: Vec<u64> = stages.iter().map(|s| s.flops).collect();
    Ok(SimReport {
        mode,
        batch,
        events,
        total_ms,
        throughput_imgs_per_s: batch as f64 / (total_ms / 1000.0),
        survivors: survivors.to_vec(),
        flops_fraction: computation_fraction(survivors, &flops, batch)?,
        cpu_baseline_ms,
        speedup_vs_cpu: cpu_baseline_ms / total_ms,
        stages: rows,
    })
}

/// Re-runs [`simulate_batch`] with every stage's config time set to each of
/// `config_ms` in turn.
pub fn config_sensitivity(
    stages: &[StageCost],
    survivors: &[usize],
    batch: usize,
    opts: SimOptions,
    config_ms: &[f64],
) -> Result<Vec<(f64, SimReport)>> {
    config_ms
        .iter()
        .map(|&c| {
            let adjusted: Vec<StageCost> = stages
                .iter()
                .map(|s| StageCost { config_ms: c, ..*s })
                .collect();
            simulate_batch(&adjusted, survivors, batch, SimMode::Fpga, opts).map(|r| (c, r))
        })
        .collect()
}

impl SimReport {
    /// Runs batches back to back on one timeline.
    pub fn sequence(reports: &[SimReport]) -> Result<SimReport> {
        let Some(first) = reports.first() else {
            return invalid("no reports to combine");
        };
        let mut out = SimReport {
            mode: first.mode,
            batch: 0,
            events: Vec::new(),
            total_ms: 0.0,
            throughput_imgs_per_s: 0.0,
            survivors: vec![0; first.survivors.len()],
            flops_fraction: 0.0,
            cpu_baseline_ms: 0.0,
            speedup_vs_cpu: 0.0,
            stages: first
                .stages
                .iter()
                .map(|s| StageSummary {
                    survivors: 0,
                    config_ms: 0.0,
                    exec_ms: 0.0,
                    ..*s
                })
                .collect(),
        };
        for r in reports {
            if r.mode != first.mode || r.stages.len() != out.stages.len() {
                return invalid("cannot combine reports of different shape");
            }
            let offset = out.total_ms;
            out.events.extend(r.events.iter().map(|e| TimelineEvent {
                start_ms: e.start_ms + offset,
                ..*e
            }));
            out.total_ms += r.total_ms;
            out.batch += r.batch;
            out.cpu_baseline_ms += r.cpu_baseline_ms;
            for (acc, s) in out.survivors.iter_mut().zip(&r.survivors) {
                *acc += s;
            }
            for (acc, s) in out.stages.iter_mut().zip(&r.stages) {
                acc.survivors += s.survivors;
                acc.config_ms += s.config_ms;
                acc.exec_ms += s.exec_ms;
            }
        }
        let flops: Vec<u64> = out.stages.iter().map(|s| s.flops).collect();
        out.flops_fraction = computation_fraction(&out.survivors, &flops, out.batch)?;
        out.throughput_imgs_per_s = out.batch as f64 / (out.total_ms / 1000.0);
        out.speedup_vs_cpu = out.cpu_baseline_ms / out.total_ms;
        Ok(out)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// One row per stage: `stage,survivors,config_ms,exec_ms,flops`.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in &self.stages {
            w.serialize(row)?;
        }
        let bytes = w.into_inner().map_err(|e| crate::error::Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

/// FPGA resource usage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Resources {
    pub bram: u32,
    pub dsp: u32,
    pub ff: u32,
}

impl Resources {
    pub const fn new(bram: u32, dsp: u32, ff: u32) -> Self {
        Self { bram, dsp, ff }
    }

    fn named(&self) -> [(&'static str, u32); 3] {
        [("bram", self.bram), ("dsp", self.dsp), ("ff", self.ff)]
    }
}

impl std::ops::Add for Resources {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self::new(self.bram + o.bram, self.dsp + o.dsp, self.ff + o.ff)
    }
}

/// One resource class a stage overdraws.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResourceViolation {
    pub stage: u32,
    pub resource: &'static str,
    pub used: u32,
    pub available: u32,
}

impl fmt::Display for ResourceViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "stage {} needs {} {} but only {} available",
            self.stage, self.used, self.resource, self.available
        )
    }
}

/// The device: resource budgets, per-stage footprints and slot state.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviceModel {
    pub totals: Resources,
    /// Footprint per stage id. The head (static region) is listed too.
    pub stages: Vec<(u32, Resources)>,
    pub config_ms: Vec<(u32, f64)>,
    slot: Option<u32>,
}

impl DeviceModel {
    pub fn new(totals: Resources, stages: Vec<(u32, Resources)>, config_ms: Vec<(u32, f64)>) -> Self {
        Self {
            totals,
            stages,
            config_ms,
            slot: None,
        }
    }

    /// Zynq XC7Z020 budget with the footprints of the three conv parts and
    /// the static head.
    pub fn zynq_xc7z020() -> Self {
        Self::new(
            Resources::new(280, 220, 106_400),
            vec![
                (1, Resources::new(81, 120, 15_672)),
                (2, Resources::new(91, 96, 16_647)),
                (3, Resources::new(96, 96, 34_069)),
                (4, Resources::new(31, 24, 9_908)),
            ],
            (1..=3).map(|id| (id, DEFAULT_CONFIG_MS)).collect(),
        )
    }

    /// Stage currently held by the reconfigurable slot.
    pub fn loaded(&self) -> Option<u32> {
        self.slot
    }

    /// Swaps `stage` into the slot and returns the configuration time spent
    /// (zero when it is already loaded).
    pub fn load(&mut self, stage: u32) -> Result<f64> {
        let Some(&(_, ms)) = self.config_ms.iter().find(|(id, _)| *id == stage) else {
            return invalid(format!("stage {stage} has no partial bitstream"));
        };
        if self.slot == Some(stage) {
            return Ok(0.0);
        }
        self.slot = Some(stage);
        Ok(ms)
    }
}

/// Lists every resource class any stage overdraws.
pub fn validate_resources(device: &DeviceModel) -> Result<(), Vec<ResourceViolation>> {
    let mut violations = Vec::new();
    for (stage, used) in &device.stages {
        for ((resource, u), (_, avail)) in used.named().into_iter().zip(device.totals.named()) {
            if u > avail {
                violations.push(ResourceViolation {
                    stage: *stage,
                    resource,
                    used: u,
                    available: avail,
                });
            }
        }
    }
    if violations.is_empty() {
        Ok(())
    } else {
        Err(violations)
    }
}
