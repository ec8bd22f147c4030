//! Straightforward reference implementations used as test oracles.
#![allow(dead_code)]

use ahcnn_core::gating::GateKind;
use ahcnn_core::{GateConfig, LayerSpec, StagedModel};

/// One sample as a dense (c, h, w) array of activation codes.
#[derive(Debug, Clone, PartialEq)]
pub struct Planes {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub v: Vec<i64>,
}

impl Planes {
    pub fn get(&self, c: usize, y: isize, x: isize) -> i64 {
        if y < 0 || x < 0 || y as usize >= self.h || x as usize >= self.w {
            return 0;
        }
        self.v[(c * self.h + y as usize) * self.w + x as usize]
    }
}

/// Plain nested-loop convolution with {-1,+1} weights and zero padding.
pub fn conv(p: &Planes, signs: &[i8], out: usize, k: (usize, usize), stride: usize, pad: usize) -> Planes {
    let (kh, kw) = k;
    let oh = (p.h + 2 * pad - kh) / stride + 1;
    let ow = (p.w + 2 * pad - kw) / stride + 1;
    let mut v = Vec::with_capacity(out * oh * ow);
    for o in 0..out {
        for y in 0..oh {
            for x in 0..ow {
                let mut acc = 0i64;
                for i in 0..p.c {
                    for dy in 0..kh {
                        for dx in 0..kw {
                            let s = signs[((o * p.c + i) * kh + dy) * kw + dx] as i64;
                            let yy = (y * stride + dy) as isize - pad as isize;
                            let xx = (x * stride + dx) as isize - pad as isize;
                            acc += s * p.get(i, yy, xx);
                        }
                    }
                }
                v.push(acc);
            }
        }
    }
    Planes { c: out, h: oh, w: ow, v }
}

pub fn threshold(p: &Planes, thr: &[i32]) -> Planes {
    let plane = p.h * p.w;
    let v = p
        .v
        .iter()
        .enumerate()
        .map(|(idx, &a)| {
            let c = idx / plane;
            thr[c * 31..(c + 1) * 31].iter().filter(|&&t| t as i64 <= a).count() as i64
        })
        .collect();
    Planes { v, ..p.clone() }
}

pub fn maxpool(p: &Planes, k: usize, stride: usize) -> Planes {
    let oh = (p.h - k) / stride + 1;
    let ow = (p.w - k) / stride + 1;
    let mut v = Vec::new();
    for c in 0..p.c {
        for y in 0..oh {
            for x in 0..ow {
                let mut m = 0;
                for dy in 0..k {
                    for dx in 0..k {
                        m = m.max(p.get(c, (y * stride + dy) as isize, (x * stride + dx) as isize));
                    }
                }
                v.push(m);
            }
        }
    }
    Planes { c: p.c, h: oh, w: ow, v }
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Runs the whole network on one sample, returning features and head
/// probabilities after every conv stage.
pub fn reference_forward(model: &StagedModel, sample: &[u8]) -> Vec<(Planes, Vec<f64>, usize)> {
    let shape = model.input_shape();
    let mut p = Planes {
        c: shape.c,
        h: shape.h,
        w: shape.w,
        v: sample.iter().map(|&b| b as i64).collect(),
    };
    let mut scale = 1.0 / 31.0;
    let mut out = Vec::new();
    for stage in model.conv_stages() {
        for layer in &stage.layers {
            match layer {
                LayerSpec::BinaryConv { weights, stride, pad } => {
                    let ws = weights.shape();
                    p = conv(&p, &weights.to_signs(), ws.out, (ws.kh, ws.kw), *stride, *pad);
                }
                LayerSpec::ThresholdActivate { thresholds, out_scale } => {
                    p = threshold(&p, thresholds.values());
                    scale = *out_scale;
                }
                LayerSpec::MaxPool { k, stride } => p = maxpool(&p, *k, *stride),
                _ => unreachable!(),
            }
        }
        let plane = (p.h * p.w) as f64;
        let pooled: Vec<f64> = (0..p.c)
            .map(|c| {
                let sum: i64 = p.v[c * p.h * p.w..(c + 1) * p.h * p.w].iter().sum();
                sum as f64 * scale / plane
            })
            .collect();
        let (signs, bias) = model
            .head()
            .layers
            .iter()
            .find_map(|l| match l {
                LayerSpec::FullyConnected { weights, bias, branch } if *branch == stage.id => {
                    Some((weights.to_signs(), bias.clone()))
                }
                _ => None,
            })
            .expect("branch classifier");
        let logits: Vec<f64> = (0..model.num_classes())
            .map(|o| {
                let dot: f64 = pooled
                    .iter()
                    .enumerate()
                    .map(|(i, &x)| if signs[o * p.c + i] > 0 { x } else { -x })
                    .sum();
                dot + bias[o] as f64
            })
            .collect();
        let probs = softmax(&logits);
        let arg = argmax(&probs);
        out.push((p.clone(), probs, arg));
    }
    out
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Exit stage, prediction, and whether any gate was boosted, for one
/// image, following the gate loop literally.
pub fn scalar_cascade(trace: &[Vec<f64>], cfg: &GateConfig) -> (u32, usize, bool) {
    let mut any_boost = false;
    for (s, probs) in trace.iter().enumerate() {
        if s + 1 == trace.len() {
            return ((s + 1) as u32, argmax(probs), any_boost);
        }
        let gamma = cfg
            .branch_gammas
            .as_ref()
            .and_then(|g| g.get(s).copied())
            .unwrap_or(cfg.gamma);
        let mut order: Vec<usize> = (0..probs.len()).collect();
        order.sort_by(|&a, &b| probs[b].partial_cmp(&probs[a]).unwrap().then(a.cmp(&b)));
        let boost = cfg.theta > 0.0 && order[..cfg.top_n].iter().any(|c| cfg.priority_classes.contains(c));
        any_boost |= boost;
        let stop = match cfg.kind {
            GateKind::Confidence => {
                let beta = probs.iter().cloned().fold(0.0, f64::max);
                let g = if boost { (gamma + cfg.theta).min(1.0) } else { gamma };
                beta > g
            }
            GateKind::Entropy => {
                let h: f64 = -probs.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>();
                let g = if boost { (gamma - cfg.theta).max(0.0) } else { gamma };
                h < g
            }
        };
        if stop {
            return ((s + 1) as u32, argmax(probs), any_boost);
        }
    }
    unreachable!()
}
