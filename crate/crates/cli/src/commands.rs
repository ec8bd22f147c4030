use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use ahcnn_core::dataset::{ingest_cifar, read_raw, write_cifar, write_raw, CifarVariant, Dataset};
use ahcnn_core::gating::{calibrate_stages, confidence, trigger_from_accuracy, GateKind};
use ahcnn_core::pipeline::{branch_costs, stage_trace};
use ahcnn_core::reconfig_sim::{config_sensitivity, zynq_reference_costs};
use ahcnn_core::zoo;
use ahcnn_core::{
    load_model, run_batch, save_model, simulate_batch, sweep_gamma, Calibration, ExecMode,
    GateConfig, RunConfig, SimMode, SimOptions, StageCost, StagedModel, SweepRow,
};
use anyhow::{bail, ensure, Context, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::report::{ReportDocument, RunMeta, SensitivityRow, SimulateDocument};
use crate::{
    Arch, CalibrateArgs, DataArgs, DatasetKind, GateArg, GateArgs, GenDataArgs, InitModelArgs,
    ModeArg, RunArgs, SimArgs, SimulateArgs, SweepArgs,
};

pub fn print_error(kind: &str, message: &str) {
    let doc = serde_json::json!({ "error": { "kind": kind, "message": message } });
    eprintln!("{doc}");
}

pub fn error_kind(e: &anyhow::Error) -> &'static str {
    use ahcnn_core::Error;
    for cause in e.chain() {
        if let Some(err) = cause.downcast_ref::<Error>() {
            return match err {
                Error::InvalidArgument(_) => "invalid_argument",
                Error::Parse(_) => "parse",
                Error::Io(_) => "io",
                Error::Json(_) => "json",
                Error::Csv(_) => "csv",
            };
        }
        if cause.is::<ahcnn_core::ParseError>() {
            return "parse";
        }
        if cause.is::<std::io::Error>() {
            return "io";
        }
        if cause.is::<serde_json::Error>() {
            return "json";
        }
        if cause.is::<csv::Error>() {
            return "csv";
        }
    }
    "invalid_argument"
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).with_context(|| format!("reading {}", path.display()))
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn stdout(text: &str) -> Result<()> {
    use std::io::Write;
    let mut out = std::io::stdout().lock();
    match out.write_all(text.as_bytes()).and_then(|()| out.flush()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => write(p, text),
        None => stdout(&format!("{text}\n")),
    }
}

fn to_json(v: &impl Serialize) -> Result<String> {
    Ok(serde_json::to_string_pretty(v)?)
}

struct LoadedModel {
    model: StagedModel,
    sha256: String,
}

fn load_model_file(path: &Path) -> Result<LoadedModel> {
    let bytes = read(path)?;
    let model = load_model(&bytes).with_context(|| format!("loading model {}", path.display()))?;
    Ok(LoadedModel {
        model,
        sha256: hex::encode(Sha256::digest(&bytes)),
    })
}

fn dataset_name(kind: DatasetKind) -> &'static str {
    match kind {
        DatasetKind::Cifar10 => "cifar10",
        DatasetKind::Cifar100 => "cifar100",
        DatasetKind::Raw => "raw",
    }
}

fn load_data(path: &Path, kind: DatasetKind) -> Result<Dataset> {
    let bytes = read(path)?;
    let ds = match kind {
        DatasetKind::Cifar10 => ingest_cifar(&bytes, CifarVariant::Cifar10),
        DatasetKind::Cifar100 => ingest_cifar(&bytes, CifarVariant::Cifar100),
        DatasetKind::Raw => read_raw(&bytes),
    };
    let ds = ds.with_context(|| format!("reading dataset {}", path.display()))?;
    ensure!(ds.images.shape().n > 0, "dataset {} holds no images", path.display());
    Ok(ds)
}

fn load_both(a: &DataArgs) -> Result<(LoadedModel, Dataset)> {
    Ok((load_model_file(&a.model)?, load_data(&a.data, a.dataset)?))
}

fn gate_config(g: &GateArgs, model: &StagedModel, gamma: f64) -> GateConfig {
    GateConfig {
        kind: match g.gate {
            GateArg::Confidence => GateKind::Confidence,
            GateArg::Entropy => GateKind::Entropy,
        },
        gamma,
        branch_gammas: None,
        theta: g.theta,
        top_n: g.top_n.min(model.num_classes()),
        priority_classes: g.priority.iter().copied().collect::<BTreeSet<_>>(),
        desired_accuracy: g.lambda,
        num_branches: model.num_conv_stages(),
    }
}

fn exec_mode(m: ModeArg) -> ExecMode {
    match m {
        ModeArg::Fpga => ExecMode::FpgaSim,
        ModeArg::Cpu => ExecMode::CpuSim,
        ModeArg::Compute => ExecMode::ComputeOnly,
    }
}

fn mode_name(m: ModeArg) -> &'static str {
    match m {
        ModeArg::Fpga => "fpga",
        ModeArg::Cpu => "cpu",
        ModeArg::Compute => "compute",
    }
}

fn with_config(model: StagedModel, sim: &SimArgs) -> Result<StagedModel> {
    Ok(match sim.config_ms {
        Some(ms) => model.with_config_ms(ms)?,
        None => model,
    })
}

fn run_config(gate: GateConfig, sim: &SimArgs, force_full: bool) -> RunConfig {
    RunConfig {
        gate,
        batch_size: sim.batch,
        mode: exec_mode(sim.mode),
        force_full,
        sim: SimOptions { gate_ms_per_image: sim.gate_ms },
    }
}

fn default_gamma(g: &GateArgs) -> f64 {
    match g.gate {
        GateArg::Confidence => GateConfig::default().gamma,
        GateArg::Entropy => 1.0,
    }
}

pub fn init_model(a: InitModelArgs) -> Result<()> {
    let bp = match a.arch {
        Arch::Resnet => zoo::resnet_blueprint(a.classes),
        Arch::Toy => zoo::toy_blueprint(a.classes),
    };
    let model = zoo::random_model(&bp, a.seed)?;
    write(&a.out, save_model(&model))
}

pub fn gen_data(a: GenDataArgs) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    match a.dataset {
        DatasetKind::Raw => {
            let shape = a.shape;
            ensure!(a.classes > 0, "class count must be positive");
            let (images, labels) = zoo::random_images(shape, a.classes, a.count, rng.random());
            let ds = Dataset { images, labels: Some(labels) };
            write(&a.out, write_raw(&ds))
        }
        DatasetKind::Cifar10 | DatasetKind::Cifar100 => {
            let variant = if a.dataset == DatasetKind::Cifar10 {
                CifarVariant::Cifar10
            } else {
                CifarVariant::Cifar100
            };
            let records: Vec<(u8, Vec<u8>)> = (0..a.count)
                .map(|_| {
                    let label = rng.random_range(0..variant.num_classes()) as u8;
                    let pixels = (0..3 * 32 * 32).map(|_| rng.random()).collect();
                    (label, pixels)
                })
                .collect();
            let mut buf = Vec::new();
            write_cifar(&mut buf, variant, &records)?;
            write(&a.out, buf)
        }
    }
}

pub fn calibrate(a: CalibrateArgs) -> Result<()> {
    let (m, ds) = load_both(&a.data)?;
    let trace = stage_trace(&m.model, &ds.images)?;
    let per_stage = trace
        .iter()
        .map(|probs| probs.rows().map(confidence).collect::<ahcnn_core::Result<Vec<f64>>>())
        .collect::<ahcnn_core::Result<Vec<_>>>()?;
    let cal = calibrate_stages(&per_stage)?;
    write(&a.out, cal.to_json()?)
}

fn read_sweep(path: &Path) -> Result<Vec<SweepRow>> {
    let mut rdr = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let rows = rdr.deserialize().collect::<Result<Vec<SweepRow>, _>>()?;
    ensure!(!rows.is_empty(), "sweep table {} is empty", path.display());
    Ok(rows)
}

pub fn run(a: RunArgs) -> Result<()> {
    let (m, ds) = load_both(&a.data)?;
    let model = with_config(m.model, &a.sim)?;
    let (gate, source) = if let Some(path) = &a.gamma_from_sweep {
        let lambda = a.gate.lambda.expect("clap requires --lambda");
        let points: Vec<_> = read_sweep(path)?.iter().map(SweepRow::point).collect();
        let g = trigger_from_accuracy(lambda, &points)?;
        (gate_config(&a.gate, &model, g), "sweep")
    } else if let Some(path) = &a.calibration {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let cal = Calibration::from_json(&text)?;
        let gammas = cal.gammas();
        let mut gate = gate_config(&a.gate, &model, gammas[0]);
        gate.branch_gammas = Some(gammas);
        (gate, "calibration")
    } else if let Some(g) = a.gate.gamma {
        (gate_config(&a.gate, &model, g), "flag")
    } else {
        (gate_config(&a.gate, &model, default_gamma(&a.gate)), "default")
    };
    let cfg = run_config(gate, &a.sim, a.force_full);
    let result = run_batch(&model, &ds.images, ds.labels.as_deref(), &cfg)?;
    if let Some(path) = &a.csv {
        let Some(sim) = &result.sim else {
            bail!("--csv needs a simulated mode (fpga or cpu)");
        };
        write(path, sim.to_csv()?)?;
    }
    let meta = RunMeta {
        tool_version: env!("CARGO_PKG_VERSION").into(),
        model_path: a.data.model.display().to_string(),
        model_sha256: m.sha256,
        dataset: dataset_name(a.data.dataset).into(),
        data_path: a.data.data.display().to_string(),
        images: ds.images.shape().n,
        batch_size: a.sim.batch,
        mode: mode_name(a.sim.mode).into(),
        force_full: a.force_full,
        gamma_source: source.into(),
        gate: cfg.gate,
        config_ms: a.sim.config_ms,
    };
    emit(a.out.as_deref(), &to_json(&ReportDocument::new(meta, result, a.per_image))?)
}

pub fn sweep(a: SweepArgs) -> Result<()> {
    let (m, ds) = load_both(&a.data)?;
    let Some(labels) = ds.labels.as_deref() else {
        bail!("sweeping needs labelled data");
    };
    let model = with_config(m.model, &a.sim)?;
    let gammas = if let Some(path) = &a.calibration {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Calibration::from_json(&text)?.candidate_gammas()
    } else if a.gammas.is_empty() {
        (0..=10).map(|i| i as f64 / 10.0).collect()
    } else {
        a.gammas.clone()
    };
    let gate = gate_config(&a.gate, &model, default_gamma(&a.gate));
    let rows = sweep_gamma(&model, &ds.images, labels, &gammas, &run_config(gate, &a.sim, false))?;
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in &rows {
        w.serialize(r)?;
    }
    let text = String::from_utf8(w.into_inner()?)?;
    match &a.out {
        Some(p) => write(p, text),
        None => stdout(&text),
    }
}

pub fn simulate(a: SimulateArgs) -> Result<()> {
    let sim_mode = match a.sim.mode {
        ModeArg::Fpga => SimMode::Fpga,
        ModeArg::Cpu => SimMode::Cpu,
        ModeArg::Compute => bail!("simulate needs --mode fpga or cpu"),
    };
    let opts = SimOptions { gate_ms_per_image: a.sim.gate_ms };
    let loaded = a.model.as_deref().map(load_model_file).transpose()?;
    let model = loaded.as_ref().map(|m| with_config(m.model.clone(), &a.sim)).transpose()?;
    let mut costs: Vec<StageCost> = match &model {
        Some(m) => branch_costs(m),
        None => zynq_reference_costs(),
    };
    if let Some(ms) = a.sim.config_ms {
        for c in &mut costs {
            c.config_ms = ms;
        }
    }
    let (report, survivors, batch) = if let Some(data) = &a.data {
        let model = model.as_ref().expect("clap requires --model with --data");
        let ds = load_data(data, a.dataset)?;
        let g = a.gate.gamma.unwrap_or_else(|| default_gamma(&a.gate));
        let cfg = run_config(gate_config(&a.gate, model, g), &a.sim, false);
        let r = run_batch(model, &ds.images, ds.labels.as_deref(), &cfg)?;
        let report = r.sim.expect("simulated mode");
        // the sensitivity sweep replays the first batch's routing
        let first = ds.images.shape().n.min(a.sim.batch);
        let surv = first_batch_survivors(&r.images, costs.len(), first);
        (report, surv, first)
    } else {
        let survivors = if a.survivors.is_empty() {
            vec![a.sim.batch; costs.len()]
        } else {
            a.survivors.clone()
        };
        let r = simulate_batch(&costs, &survivors, a.sim.batch, sim_mode, opts)?;
        (r, survivors, a.sim.batch)
    };
    let config_sensitivity = if a.config_sweep.is_empty() {
        Vec::new()
    } else {
        config_sensitivity(&costs, &survivors, batch, opts, &a.config_sweep)?
            .into_iter()
            .map(|(config_ms, r)| SensitivityRow {
                config_ms,
                total_ms: r.total_ms,
                throughput_imgs_per_s: r.throughput_imgs_per_s,
            })
            .collect()
    };
    if let Some(path) = &a.csv {
        write(path, report.to_csv()?)?;
    }
    let doc = SimulateDocument {
        costs: loaded.map_or_else(|| "reference".into(), |m| m.sha256),
        report,
        config_sensitivity,
    };
    emit(a.out.as_deref(), &to_json(&doc)?)
}

fn first_batch_survivors(images: &[ahcnn_core::pipeline::ImageResult], stages: usize, n: usize) -> Vec<usize> {
    let mut s = vec![0; stages];
    for img in &images[..n] {
        for v in s.iter_mut().take(img.exit_stage as usize) {
            *v += 1;
        }
    }
    s
}
