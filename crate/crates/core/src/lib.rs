//! Staged binary-weight CNN inference with confidence-gated early exit.
//!
//! A network is split into up to three conv stages that share one
//! classification head. After each stage a gate looks at the head's
//! softmax output and either accepts the prediction or forwards the image
//! to the next stage. Activations are 5-bit codes and weights are single
//! bits, so every conv layer runs in integer arithmetic.
//!
//! [`reconfig_sim`] models running the stages on an FPGA whose single
//! reconfigurable slot holds one stage at a time, and turns the routing of
//! a batch into a timeline, throughput and computation fraction.

pub mod dataset;
pub mod error;
pub mod gating;
pub mod pipeline;
pub mod qlayers;
pub mod qtensor;
pub mod reconfig_sim;
pub mod staged_model;
pub mod zoo;

pub use error::{Error, ParseError, Result};
pub use gating::{Action, Calibration, Decision, GateConfig, GateKind, SweepPoint};
pub use pipeline::{run_batch, sweep_gamma, ExecMode, InferenceResult, RunConfig, SweepRow};
pub use qlayers::{BinaryWeights, Logits, Probs, ThresholdParams, WeightShape};
pub use qtensor::{AccumTensor, FloatTensor, QTensor, Shape};
pub use reconfig_sim::{
    simulate_batch, DeviceModel, SimMode, SimOptions, SimReport, StageCost, TimelineEvent,
};
pub use staged_model::{load_model, save_model, FeatureShape, LayerSpec, StageSpec, StagedModel};
