//! Integer layer kernels for binary-weight, 5-bit-activation networks.
//!
//! Weights are `{-1, +1}` packed one bit per weight (1 = +1), row-major over
//! `(out, in, kh, kw)`, least significant bit first within each `u64`.
//! Convolution runs bit-serially: each 5-bit activation patch is split into
//! bit planes and every output is assembled from popcounts, so
//! `sum(w * x) = sum_b 2^b * (2 * popcount(w & x_b) - popcount(x_b))`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::qtensor::{AccumTensor, FloatTensor, QTensor, Shape, ACT_BITS, QMAX};

/// Thresholds per output channel (one per non-zero activation code).
pub const THRESHOLDS_PER_CHANNEL: usize = QMAX as usize;

/// Dimensions of a weight tensor: `(out, in, kh, kw)`. Fully connected
/// layers use `kh = kw = 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct WeightShape {
    pub out: usize,
    pub inp: usize,
    pub kh: usize,
    pub kw: usize,
}

impl WeightShape {
    pub const fn conv(out: usize, inp: usize, kh: usize, kw: usize) -> Self {
        Self { out, inp, kh, kw }
    }

    pub const fn dense(out: usize, inp: usize) -> Self {
        Self { out, inp, kh: 1, kw: 1 }
    }

    pub const fn len(&self) -> usize {
        self.out * self.inp * self.kh * self.kw
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Weights feeding one output (`in * kh * kw`).
    pub const fn row_len(&self) -> usize {
        self.inp * self.kh * self.kw
    }
}

/// Number of `u64` words needed for `bits` bits.
pub const fn words_for(bits: usize) -> usize {
    bits.div_ceil(64)
}

/// Bit-packed `{-1, +1}` weights.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryWeights {
    shape: WeightShape,
    words: Vec<u64>,
}

impl BinaryWeights {
    /// Wraps packed words. Padding bits past the last weight must be zero.
    pub fn from_words(shape: WeightShape, words: Vec<u64>) -> Result<Self> {
        let bits = shape.len();
        if words.len() != words_for(bits) {
            return invalid(format!(
                "{} weights need {} words, got {}",
                bits,
                words_for(bits),
                words.len()
            ));
        }
        let used = bits % 64;
        if used != 0 && words[words.len() - 1] >> used != 0 {
            return invalid("non-zero padding bits in last weight word");
        }
        Ok(Self { shape, words })
    }

    /// Packs weights given as signs in `(out, in, kh, kw)` order. Any
    /// positive value is +1, anything else -1.
    pub fn from_signs(shape: WeightShape, signs: &[i8]) -> Result<Self> {
        if signs.len() != shape.len() {
            return invalid(format!(
                "expected {} weights, got {}",
                shape.len(),
                signs.len()
            ));
        }
        Ok(Self {
            shape,
            words: pack_bits(signs.iter().map(|&s| s > 0)),
        })
    }

    pub fn shape(&self) -> WeightShape {
        self.shape
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    #[inline]
    fn bit(&self, flat: usize) -> bool {
        (self.words[flat / 64] >> (flat % 64)) & 1 == 1
    }

    /// Weight at `(o, i, ky, kx)` as `+1` or `-1`.
    #[inline]
    pub fn sign(&self, o: usize, i: usize, ky: usize, kx: usize) -> i32 {
        let s = self.shape;
        let flat = ((o * s.inp + i) * s.kh + ky) * s.kw + kx;
        if self.bit(flat) {
            1
        } else {
            -1
        }
    }

    /// Unpacked weights in storage order.
    pub fn to_signs(&self) -> Vec<i8> {
        (0..self.shape.len())
            .map(|f| if self.bit(f) { 1 } else { -1 })
            .collect()
    }

    /// Each output row repacked onto its own word boundary.
    fn aligned_rows(&self) -> Vec<u64> {
        let row = self.shape.row_len();
        let rw = words_for(row);
        let mut out = vec![0u64; rw * self.shape.out];
        for o in 0..self.shape.out {
            for k in 0..row {
                if self.bit(o * row + k) {
                    out[o * rw + k / 64] |= 1 << (k % 64);
                }
            }
        }
        out
    }
}

/// Packs booleans LSB-first into `u64` words.
pub fn pack_bits(bits: impl IntoIterator<Item = bool>) -> Vec<u64> {
    let mut words = Vec::new();
    for (i, b) in bits.into_iter().enumerate() {
        if i % 64 == 0 {
            words.push(0);
        }
        if b {
            *words.last_mut().unwrap() |= 1 << (i % 64);
        }
    }
    words
}

/// Unpacks the first `len` bits of `words`.
pub fn unpack_bits(words: &[u64], len: usize) -> Vec<bool> {
    (0..len).map(|i| (words[i / 64] >> (i % 64)) & 1 == 1).collect()
}

/// Integer thresholds `t[c][k]`, `k = 1..=31`, non-decreasing per channel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ThresholdParams {
    channels: usize,
    values: Vec<i32>,
}

impl ThresholdParams {
    /// `values` is channel-major, 31 entries per channel.
    pub fn new(channels: usize, values: Vec<i32>) -> Result<Self> {
        if values.len() != channels * THRESHOLDS_PER_CHANNEL {
            return invalid(format!(
                "{channels} channels need {} thresholds, got {}",
                channels * THRESHOLDS_PER_CHANNEL,
                values.len()
            ));
        }
        for (c, row) in values.chunks(THRESHOLDS_PER_CHANNEL).enumerate() {
            if row.windows(2).any(|p| p[0] > p[1]) {
                return invalid(format!("thresholds for channel {c} are not non-decreasing"));
            }
        }
        Ok(Self { channels, values })
    }

    /// The same staircase `t[k] = offset + k * step` on every channel.
    pub fn uniform(channels: usize, offset: i32, step: i32) -> Result<Self> {
        let row: Vec<i32> = (1..=THRESHOLDS_PER_CHANNEL as i32)
            .map(|k| offset + k * step)
            .collect();
        Self::new(channels, row.repeat(channels))
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn values(&self) -> &[i32] {
        &self.values
    }

    pub fn channel(&self, c: usize) -> &[i32] {
        &self.values[c * THRESHOLDS_PER_CHANNEL..(c + 1) * THRESHOLDS_PER_CHANNEL]
    }
}

/// Pre-softmax outputs `z` of a fully connected layer, one row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits {
    pub n: usize,
    pub classes: usize,
    pub data: Vec<f64>,
}

impl Logits {
    pub fn new(n: usize, classes: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * classes {
            return invalid(format!("logits: {} values for {n}x{classes}", data.len()));
        }
        Ok(Self { n, classes, data })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.classes..(i + 1) * self.classes]
    }
}

/// Softmax output, one probability vector per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Probs {
    pub n: usize,
    pub classes: usize,
    pub data: Vec<f64>,
}

impl Probs {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.classes..(i + 1) * self.classes]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.classes.max(1)).take(self.n)
    }
}

/// Output spatial size of a window sweep, or `None` when the window does
/// not fit.
fn out_dim(size: usize, pad: usize, k: usize, stride: usize) -> Option<usize> {
    let padded = size + 2 * pad;
    (padded >= k && stride > 0).then(|| (padded - k) / stride + 1)
}

/// Binary-weight convolution with zero padding. Returns raw accumulators.
pub fn binary_conv2d(
    input: &QTensor,
    w: &BinaryWeights,
    stride: usize,
    pad: usize,
) -> Result<AccumTensor> {
    let is = input.shape();
    let ws = w.shape();
    if is.c != ws.inp {
        return invalid(format!(
            "conv: input has {} channels, weights expect {}",
            is.c, ws.inp
        ));
    }
    if stride == 0 {
        return invalid("conv: stride must be positive");
    }
    let (Some(oh), Some(ow)) = (out_dim(is.h, pad, ws.kh, stride), out_dim(is.w, pad, ws.kw, stride))
    else {
        return invalid(format!(
            "conv: {}x{} kernel does not fit {}x{} input with pad {pad}",
            ws.kh, ws.kw, is.h, is.w
        ));
    };
    if oh == 0 || ow == 0 || ws.out == 0 {
        return invalid("conv: empty output");
    }
    let os = Shape::new(is.n, ws.out, oh, ow);
    let row = ws.row_len();
    let rw = words_for(row);
    let rows = w.aligned_rows();
    let planes = ACT_BITS as usize;

    let mut out = vec![0i32; os.len()];
    out.par_chunks_mut(os.sample_len().max(1))
        .enumerate()
        .for_each(|(n, out_n)| {
            let sample = input.sample(n);
            let mut bits = vec![0u64; rw * planes];
            for y in 0..oh {
                for x in 0..ow {
                    bits.iter_mut().for_each(|b| *b = 0);
                    let mut k = 0;
                    for i in 0..is.c {
                        let chan = &sample[i * is.h * is.w..(i + 1) * is.h * is.w];
                        for ky in 0..ws.kh {
                            let iy = (y * stride + ky) as isize - pad as isize;
                            let row_ok = iy >= 0 && (iy as usize) < is.h;
                            for kx in 0..ws.kw {
                                let ix = (x * stride + kx) as isize - pad as isize;
                                let v = if row_ok && ix >= 0 && (ix as usize) < is.w {
                                    chan[iy as usize * is.w + ix as usize] as u64
                                } else {
                                    0
                                };
                                let (wi, sh) = (k / 64, k % 64);
                                for b in 0..ACT_BITS as usize {
                                    bits[b * rw + wi] |= ((v >> b) & 1) << sh;
                                }
                                k += 1;
                            }
                        }
                    }
                    let mut plane_pop = [0i32; ACT_BITS as usize];
                    for (b, p) in plane_pop.iter_mut().enumerate() {
                        *p = bits[b * rw..(b + 1) * rw].iter().map(|v| v.count_ones() as i32).sum();
                    }
                    for o in 0..ws.out {
                        let wrow = &rows[o * rw..(o + 1) * rw];
                        let mut acc = 0i32;
                        for (b, &pop) in plane_pop.iter().enumerate() {
                            let plane = &bits[b * rw..(b + 1) * rw];
                            let hits: i32 = wrow
                                .iter()
                                .zip(plane)
                                .map(|(a, p)| (a & p).count_ones() as i32)
                                .sum();
                            acc += (2 * hits - pop) << b;
                        }
                        out_n[(o * oh + y) * ow + x] = acc;
                    }
                }
            }
        });
    AccumTensor::new(os, out)
}

/// Folded batch-norm plus quantizer: each output code is the number of the
/// channel's thresholds that are `<=` the accumulator.
pub fn threshold_activate(
    acc: &AccumTensor,
    t: &ThresholdParams,
    out_scale: f64,
) -> Result<QTensor> {
    let s = acc.shape();
    if s.c != t.channels() {
        return invalid(format!(
            "threshold: accumulator has {} channels, thresholds have {}",
            s.c,
            t.channels()
        ));
    }
    let plane = s.h * s.w;
    let data = acc
        .data()
        .iter()
        .enumerate()
        .map(|(idx, &a)| {
            let c = (idx / plane) % s.c;
            t.channel(c).partition_point(|&th| th <= a) as u8
        })
        .collect();
    QTensor::new(s, data, out_scale)
}

/// Max pooling with a square `k x k` window. Scale is preserved.
pub fn maxpool2d(input: &QTensor, k: usize, stride: usize) -> Result<QTensor> {
    let s = input.shape();
    if k == 0 || stride == 0 {
        return invalid("maxpool: window and stride must be positive");
    }
    let (Some(oh), Some(ow)) = (out_dim(s.h, 0, k, stride), out_dim(s.w, 0, k, stride)) else {
        return invalid(format!("maxpool: {k}x{k} window larger than {}x{} input", s.h, s.w));
    };
    let os = Shape::new(s.n, s.c, oh, ow);
    let mut data = Vec::with_capacity(os.len());
    for n in 0..s.n {
        for c in 0..s.c {
            for y in 0..oh {
                for x in 0..ow {
                    let mut m = 0u8;
                    for dy in 0..k {
                        for dx in 0..k {
                            m = m.max(input.at(n, c, y * stride + dy, x * stride + dx));
                        }
                    }
                    data.push(m);
                }
            }
        }
    }
    QTensor::new(os, data, input.scale())
}

/// Per-channel mean of the dequantized activations, shape `(N, C, 1, 1)`.
pub fn global_avgpool(input: &QTensor) -> FloatTensor {
    let s = input.shape();
    let plane = s.h * s.w;
    let data = input
        .data()
        .chunks(plane.max(1))
        .take(s.n * s.c)
        .map(|ch| {
            let sum: u64 = ch.iter().map(|&v| v as u64).sum();
            if plane == 0 {
                0.0
            } else {
                sum as f64 * input.scale() / plane as f64
            }
        })
        .collect();
    FloatTensor::new(Shape::new(s.n, s.c, 1, 1), data).expect("pooled length matches shape")
}

/// Dense layer with binary weights and real bias over flattened samples.
pub fn fully_connected(input: &FloatTensor, w: &BinaryWeights, bias: &[f32]) -> Result<Logits> {
    let s = input.shape();
    let ws = w.shape();
    if ws.kh != 1 || ws.kw != 1 {
        return invalid("fully connected weights must have 1x1 spatial extent");
    }
    if ws.inp != s.sample_len() {
        return invalid(format!(
            "fully connected: {} input features, weights expect {}",
            s.sample_len(),
            ws.inp
        ));
    }
    if bias.len() != ws.out {
        return invalid(format!("fully connected: {} biases for {} outputs", bias.len(), ws.out));
    }
    let signs = w.to_signs();
    let mut data = Vec::with_capacity(s.n * ws.out);
    for n in 0..s.n {
        let x = input.sample(n);
        for o in 0..ws.out {
            let row = &signs[o * ws.inp..(o + 1) * ws.inp];
            let dot: f64 = row
                .iter()
                .zip(x)
                .map(|(&sg, &v)| if sg > 0 { v } else { -v })
                .sum();
            data.push(dot + bias[o] as f64);
        }
    }
    Logits::new(s.n, ws.out, data)
}

/// Row-wise softmax with max subtraction.
pub fn softmax(z: &Logits) -> Result<Probs> {
    if z.classes == 0 {
        return invalid("softmax needs at least one class");
    }
    if z.data.iter().any(|v| v.is_nan()) {
        return invalid("softmax: NaN logit");
    }
    let mut data = Vec::with_capacity(z.data.len());
    for i in 0..z.n {
        let row = z.row(i);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|&v| (v - m).exp()).collect();
        let total: f64 = exps.iter().sum();
        data.extend(exps.iter().map(|e| e / total));
    }
    Ok(Probs {
        n: z.n,
        classes: z.classes,
        data,
    })
}

/// Index of the largest value, lowest index on ties.
pub fn argmax(v: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &x) in v.iter().enumerate() {
        match best {
            Some((_, b)) if x <= b => {}
            _ => best = Some((i, x)),
        }
    }
    best.map(|(i, _)| i)
}
