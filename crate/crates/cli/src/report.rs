//! JSON documents written by the CLI.

use ahcnn_core::pipeline::ImageResult;
use ahcnn_core::{GateConfig, InferenceResult, SimReport};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub tool_version: String,
    pub model_path: String,
    pub model_sha256: String,
    pub dataset: String,
    pub data_path: String,
    pub images: usize,
    pub batch_size: usize,
    pub mode: String,
    pub force_full: bool,
    /// Where the trigger points came from: flag, calibration, sweep or default.
    pub gamma_source: String,
    pub gate: GateConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_ms: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub exit_counts: Vec<usize>,
    pub stop_ratios: Vec<f64>,
    pub survivors: Vec<usize>,
    pub flops_fraction: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
}

/// Everything needed to re-render a run without re-running it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportDocument {
    pub meta: RunMeta,
    pub summary: Summary,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sim: Option<SimReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub images: Option<Vec<ImageResult>>,
}

impl ReportDocument {
    pub fn new(meta: RunMeta, r: InferenceResult, per_image: bool) -> Self {
        Self {
            meta,
            summary: Summary {
                exit_counts: r.exit_counts,
                stop_ratios: r.stop_ratios,
                survivors: r.survivors,
                flops_fraction: r.flops_fraction,
                accuracy: r.accuracy,
            },
            sim: r.sim,
            images: per_image.then_some(r.images),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityRow {
    pub config_ms: f64,
    pub total_ms: f64,
    pub throughput_imgs_per_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulateDocument {
    /// `reference` for the built-in stage table, otherwise the model hash.
    pub costs: String,
    pub report: SimReport,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub config_sensitivity: Vec<SensitivityRow>,
}
