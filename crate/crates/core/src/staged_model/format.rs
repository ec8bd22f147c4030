//! Little-endian weight-file codec.
//!
//! ```text
//! "AHQN" | version u32 | num_classes u32 | C H W u32 | stage count u32
//! per stage: id u32 | flops u64 | config_ms f64 | fpga_ms f64 | cpu_ms f64 | layer count u32
//! per layer: kind u8 | geometry u32 * G(kind) | payload length u64 | payload
//! optional trailer: name count u32 | (length u32 | utf-8 bytes) * count
//! ```
//!
//! Geometry and payload per kind:
//!
//! | kind | geometry | payload |
//! |---|---|---|
//! | 0 binary conv | in, out, kh, kw, stride, pad | packed weight words (u64) |
//! | 1 threshold | channels | out_scale f64, then 31 * channels i32 |
//! | 2 maxpool | k, stride | empty |
//! | 3 global avgpool | none | empty |
//! | 4 fully connected | in, out, branch | packed weight words (u64), then out * f32 bias |

use super::{FeatureShape, LayerKind, LayerSpec, StageSpec, StagedModel};
use crate::error::{Error, ParseError, Result};
use crate::qlayers::{words_for, BinaryWeights, ThresholdParams, WeightShape, THRESHOLDS_PER_CHANNEL};

pub const MAGIC: [u8; 4] = *b"AHQN";
pub const VERSION: u32 = 1;

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], ParseError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or(ParseError::Truncated(what))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self, what: &'static str) -> Result<[u8; N], ParseError> {
        Ok(self.take(N, what)?.try_into().unwrap())
    }

    fn u8(&mut self, what: &'static str) -> Result<u8, ParseError> {
        Ok(self.array::<1>(what)?[0])
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, ParseError> {
        Ok(u32::from_le_bytes(self.array(what)?))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64, ParseError> {
        Ok(u64::from_le_bytes(self.array(what)?))
    }

    fn f64(&mut self, what: &'static str) -> Result<f64, ParseError> {
        Ok(f64::from_le_bytes(self.array(what)?))
    }

    fn usize(&mut self, what: &'static str) -> Result<usize, ParseError> {
        Ok(self.u32(what)? as usize)
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

fn invalid_field(msg: impl Into<String>) -> ParseError {
    ParseError::InvalidField(msg.into())
}

/// Rewraps construction errors as parse errors so callers see one family.
fn as_field(e: Error) -> ParseError {
    match e {
        Error::Parse(p) => p,
        other => ParseError::InvalidField(other.to_string()),
    }
}

fn read_words(r: &mut Reader<'_>, count: usize) -> Result<Vec<u64>, ParseError> {
    Ok(r.take(count * 8, "weight words")?
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

fn checked_bits(dims: &[usize]) -> Result<usize, ParseError> {
    dims.iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .filter(|&b| b <= u32::MAX as usize * 64)
        .ok_or_else(|| invalid_field("weight tensor too large"))
}

fn expect_len(kind: LayerKind, got: usize, want: usize) -> Result<(), ParseError> {
    if got != want {
        return Err(invalid_field(format!(
            "{kind:?} payload is {got} bytes, expected {want}"
        )));
    }
    Ok(())
}

fn read_layer(r: &mut Reader<'_>) -> Result<LayerSpec, ParseError> {
    let kind = LayerKind::try_from(r.u8("layer kind")?)?;
    let geometry_len = match kind {
        LayerKind::BinaryConv => 6,
        LayerKind::ThresholdActivate => 1,
        LayerKind::MaxPool => 2,
        LayerKind::GlobalAvgPool => 0,
        LayerKind::FullyConnected => 3,
    };
    let mut g = [0usize; 6];
    for v in g.iter_mut().take(geometry_len) {
        *v = r.usize("layer geometry")?;
    }
    let payload_len = r.u64("payload length")?;
    let payload_len = usize::try_from(payload_len).map_err(|_| ParseError::Truncated("payload"))?;
    let payload = r.take(payload_len, "layer payload")?;
    let mut p = Reader { buf: payload, pos: 0 };

    let layer = match kind {
        LayerKind::BinaryConv => {
            let [inp, out, kh, kw, stride, pad] = g;
            checked_bits(&[out, inp, kh, kw])?;
            let shape = WeightShape::conv(out, inp, kh, kw);
            let words = words_for(shape.len());
            expect_len(kind, payload_len, words * 8)?;
            let weights = BinaryWeights::from_words(shape, read_words(&mut p, words)?).map_err(as_field)?;
            if stride == 0 {
                return Err(invalid_field("conv stride must be positive"));
            }
            LayerSpec::BinaryConv { weights, stride, pad }
        }
        LayerKind::ThresholdActivate => {
            let channels = g[0];
            let count = channels * THRESHOLDS_PER_CHANNEL;
            expect_len(kind, payload_len, 8 + count * 4)?;
            let out_scale = p.f64("threshold scale")?;
            let values = p
                .take(count * 4, "thresholds")?
                .chunks_exact(4)
                .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let thresholds = ThresholdParams::new(channels, values).map_err(as_field)?;
            LayerSpec::ThresholdActivate { thresholds, out_scale }
        }
        LayerKind::MaxPool => {
            expect_len(kind, payload_len, 0)?;
            LayerSpec::MaxPool { k: g[0], stride: g[1] }
        }
        LayerKind::GlobalAvgPool => {
            expect_len(kind, payload_len, 0)?;
            LayerSpec::GlobalAvgPool
        }
        LayerKind::FullyConnected => {
            let [inp, out, branch, ..] = g;
            checked_bits(&[out, inp])?;
            let shape = WeightShape::dense(out, inp);
            let words = words_for(shape.len());
            expect_len(kind, payload_len, words * 8 + out * 4)?;
            let weights = BinaryWeights::from_words(shape, read_words(&mut p, words)?).map_err(as_field)?;
            let bias = p
                .take(out * 4, "bias")?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            LayerSpec::FullyConnected {
                weights,
                bias,
                branch: branch as u32,
            }
        }
    };
    Ok(layer)
}

/// Decodes a weight file.
pub fn load_model(bytes: &[u8]) -> Result<StagedModel, ParseError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic = r.array::<4>("magic")?;
    if magic != MAGIC {
        return Err(ParseError::BadMagic {
            expected: MAGIC,
            found: magic,
        });
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(ParseError::VersionMismatch {
            expected: VERSION,
            found: version,
        });
    }
    let num_classes = r.usize("num_classes")?;
    let input = FeatureShape::new(
        r.usize("input shape")?,
        r.usize("input shape")?,
        r.usize("input shape")?,
    );
    let stage_count = r.u32("stage count")?;
    let mut stages = Vec::new();
    for _ in 0..stage_count {
        let id = r.u32("stage id")?;
        let flops = r.u64("stage flops")?;
        let config_ms = r.f64("stage config_ms")?;
        let fpga = r.f64("stage fpga_ms")?;
        let cpu = r.f64("stage cpu_ms")?;
        let layer_count = r.u32("layer count")?;
        let layers = (0..layer_count)
            .map(|_| read_layer(&mut r))
            .collect::<Result<Vec<_>, _>>()?;
        stages.push(StageSpec {
            id,
            layers,
            flops,
            config_ms,
            fpga_exec_ms_per_image: fpga,
            cpu_exec_ms_per_image: cpu,
        });
    }
    let class_names = if r.remaining() > 0 {
        let count = r.u32("class name count")?;
        let mut names = Vec::new();
        for _ in 0..count {
            let len = r.usize("class name length")?;
            let raw = r.take(len, "class name")?;
            let name = std::str::from_utf8(raw)
                .map_err(|_| invalid_field("class name is not utf-8"))?
                .to_owned();
            names.push(name);
        }
        Some(names)
    } else {
        None
    };
    if r.remaining() > 0 {
        return Err(ParseError::TrailingBytes(r.remaining()));
    }
    StagedModel::new(num_classes, input, stages, class_names).map_err(as_field)
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_words(out: &mut Vec<u8>, words: &[u64]) {
    for w in words {
        out.extend_from_slice(&w.to_le_bytes());
    }
}

fn write_layer(out: &mut Vec<u8>, layer: &LayerSpec) {
    out.push(layer.kind() as u8);
    let mut payload = Vec::new();
    match layer {
        LayerSpec::BinaryConv { weights, stride, pad } => {
            let s = weights.shape();
            for v in [s.inp, s.out, s.kh, s.kw, *stride, *pad] {
                put_u32(out, v);
            }
            put_words(&mut payload, weights.words());
        }
        LayerSpec::ThresholdActivate { thresholds, out_scale } => {
            put_u32(out, thresholds.channels());
            payload.extend_from_slice(&out_scale.to_le_bytes());
            for t in thresholds.values() {
                payload.extend_from_slice(&t.to_le_bytes());
            }
        }
        LayerSpec::MaxPool { k, stride } => {
            put_u32(out, *k);
            put_u32(out, *stride);
        }
        LayerSpec::GlobalAvgPool => {}
        LayerSpec::FullyConnected { weights, bias, branch } => {
            let s = weights.shape();
            for v in [s.inp, s.out, *branch as usize] {
                put_u32(out, v);
            }
            put_words(&mut payload, weights.words());
            for b in bias {
                payload.extend_from_slice(&b.to_le_bytes());
            }
        }
    }
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(&payload);
}

/// Encodes a model. The model is valid by construction.
pub fn save_model(m: &StagedModel) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    put_u32(&mut out, m.num_classes);
    for v in [m.input.c, m.input.h, m.input.w] {
        put_u32(&mut out, v);
    }
    put_u32(&mut out, m.stages.len());
    for s in &m.stages {
        out.extend_from_slice(&s.id.to_le_bytes());
        out.extend_from_slice(&s.flops.to_le_bytes());
        for t in [s.config_ms, s.fpga_exec_ms_per_image, s.cpu_exec_ms_per_image] {
            out.extend_from_slice(&t.to_le_bytes());
        }
        put_u32(&mut out, s.layers.len());
        for l in &s.layers {
            write_layer(&mut out, l);
        }
    }
    if let Some(names) = &m.class_names {
        put_u32(&mut out, names.len());
        for n in names {
            put_u32(&mut out, n.len());
            out.extend_from_slice(n.as_bytes());
        }
    }
    out
}
