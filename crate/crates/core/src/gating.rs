//! Decision layer: confidence and entropy gates with a priority-class
//! boost, plus calibration of the trigger point.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, ParseError, Result};

/// Bins of the per-stage confidence histogram over `[0, 1]`.
pub const HISTOGRAM_BINS: usize = 64;
const PROB_SUM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GateKind {
    /// Continue when the top probability is at or below the trigger point.
    #[default]
    Confidence,
    /// Continue when the output entropy is at or above the threshold.
    Entropy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateConfig {
    pub kind: GateKind,
    /// Trigger point; an entropy threshold for [`GateKind::Entropy`].
    pub gamma: f64,
    /// Per-decision-point overrides of `gamma` (index 0 = after stage 1).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub branch_gammas: Option<Vec<f64>>,
    /// Boost applied when a priority class is among the top-n predictions.
    pub theta: f64,
    pub top_n: usize,
    pub priority_classes: BTreeSet<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub desired_accuracy: Option<f64>,
    pub num_branches: usize,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self {
            kind: GateKind::Confidence,
            gamma: 0.5,
            branch_gammas: None,
            theta: 0.1,
            top_n: 5,
            priority_classes: BTreeSet::new(),
            desired_accuracy: None,
            num_branches: 3,
        }
    }
}

impl GateConfig {
    pub fn confidence(gamma: f64) -> Self {
        Self {
            gamma,
            ..Self::default()
        }
    }

    /// Trigger point used after stage `stage` (1-based).
    pub fn gamma_for(&self, stage: usize) -> f64 {
        self.branch_gammas
            .as_ref()
            .and_then(|g| g.get(stage.wrapping_sub(1)).copied())
            .unwrap_or(self.gamma)
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        let gammas = std::iter::once(self.gamma).chain(self.branch_gammas.iter().flatten().copied());
        for g in gammas {
            let ok = match self.kind {
                GateKind::Confidence => (0.0..=1.0).contains(&g),
                GateKind::Entropy => g.is_finite() && g >= 0.0,
            };
            if !ok {
                return invalid(format!("trigger point {g} out of range for {:?} gate", self.kind));
            }
        }
        if !(self.theta.is_finite() && self.theta >= 0.0) {
            return invalid(format!("boost must be non-negative, got {}", self.theta));
        }
        if self.top_n == 0 || self.top_n > num_classes {
            return invalid(format!("top_n {} not in 1..={num_classes}", self.top_n));
        }
        if self.num_branches == 0 {
            return invalid("num_branches must be positive");
        }
        if let Some(c) = self.priority_classes.iter().find(|&&c| c >= num_classes) {
            return invalid(format!("priority class {c} >= {num_classes} classes"));
        }
        if let Some(l) = self.desired_accuracy {
            if !(l > 0.0 && l <= 1.0) {
                return invalid(format!("desired accuracy {l} not in (0, 1]"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Action {
    Stop,
    Continue,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub action: Action,
    /// Confidence, or entropy for the entropy gate.
    pub beta: f64,
    pub effective_gamma: f64,
    pub boosted: bool,
}

fn check_probs(probs: &[f64]) -> Result<()> {
    if probs.is_empty() {
        return invalid("empty probability vector");
    }
    if probs.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
        return invalid("probabilities must be finite and non-negative");
    }
    let sum: f64 = probs.iter().sum();
    if (sum - 1.0).abs() > PROB_SUM_TOLERANCE {
        return invalid(format!("probabilities sum to {sum}, not 1"));
    }
    Ok(())
}

/// Largest class probability.
pub fn confidence(probs: &[f64]) -> Result<f64> {
    check_probs(probs)?;
    Ok(probs.iter().copied().fold(f64::NEG_INFINITY, f64::max))
}

/// Shannon entropy in nats, with `0 ln 0 = 0`.
pub fn entropy(probs: &[f64]) -> Result<f64> {
    check_probs(probs)?;
    Ok(-probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * p.ln())
        .sum::<f64>())
}

/// Indices of the `n` most probable classes, ties to the lower index.
pub fn top_n(probs: &[f64], n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..probs.len()).collect();
    idx.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    idx.truncate(n);
    idx
}

/// Gate decision after the first stage.
pub fn decide(probs: &[f64], cfg: &GateConfig) -> Result<Decision> {
    decide_with_gamma(probs, cfg, cfg.gamma)
}

/// Gate decision after conv stage `stage`, using its trigger point.
pub fn decide_at(probs: &[f64], cfg: &GateConfig, stage: usize) -> Result<Decision> {
    decide_with_gamma(probs, cfg, cfg.gamma_for(stage))
}

fn decide_with_gamma(probs: &[f64], cfg: &GateConfig, gamma: f64) -> Result<Decision> {
    check_probs(probs)?;
    if cfg.top_n == 0 || cfg.top_n > probs.len() {
        return invalid(format!("top_n {} exceeds {} classes", cfg.top_n, probs.len()));
    }
    let boosted = cfg.theta > 0.0
        && top_n(probs, cfg.top_n)
            .iter()
            .any(|c| cfg.priority_classes.contains(c));
    Ok(match cfg.kind {
        GateKind::Confidence => {
            let beta = confidence(probs)?;
            let g = if boosted { gamma + cfg.theta } else { gamma };
            let effective_gamma = g.clamp(0.0, 1.0);
            Decision {
                action: if beta <= effective_gamma { Action::Continue } else { Action::Stop },
                beta,
                effective_gamma,
                boosted,
            }
        }
        GateKind::Entropy => {
            let h = entropy(probs)?;
            // boosting lowers the entropy bar so more images continue
            let g = if boosted { gamma - cfg.theta } else { gamma };
            let effective_gamma = g.clamp(0.0, (probs.len() as f64).ln());
            Decision {
                action: if h >= effective_gamma { Action::Continue } else { Action::Stop },
                beta: h,
                effective_gamma,
                boosted,
            }
        }
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageCalibration {
    pub gamma: f64,
    pub histogram: Vec<u64>,
}

/// Confidence statistics of the shallow stage over a calibration set,
/// plus per-stage histograms and trigger points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub c_mean: f64,
    pub c_std: f64,
    pub per_stage: Vec<StageCalibration>,
}

fn histogram(values: &[f64]) -> Vec<u64> {
    let mut h = vec![0u64; HISTOGRAM_BINS];
    for &v in values {
        let bin = ((v * HISTOGRAM_BINS as f64) as usize).min(HISTOGRAM_BINS - 1);
        h[bin] += 1;
    }
    h
}

fn check_confidences(values: &[f64]) -> Result<()> {
    if values.is_empty() {
        return invalid("calibration needs at least one confidence value");
    }
    if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return invalid(format!("confidence {v} outside [0, 1]"));
    }
    Ok(())
}

/// Mean and population standard deviation of shallow-stage confidences.
pub fn calibrate(confidences: &[f64]) -> Result<Calibration> {
    calibrate_stages(&[confidences.to_vec()])
}

/// Calibrates every stage. Statistics come from the first (shallowest)
/// stage; each stage's trigger point starts at its own mean confidence.
pub fn calibrate_stages(per_stage: &[Vec<f64>]) -> Result<Calibration> {
    let Some(first) = per_stage.first() else {
        return invalid("no stages to calibrate");
    };
    let mut stages = Vec::with_capacity(per_stage.len());
    for values in per_stage {
        check_confidences(values)?;
        stages.push(StageCalibration {
            gamma: mean(values),
            histogram: histogram(values),
        });
    }
    let c_mean = mean(first);
    let var = first.iter().map(|v| (v - c_mean).powi(2)).sum::<f64>() / first.len() as f64;
    Ok(Calibration {
        c_mean,
        c_std: var.sqrt(),
        per_stage: stages,
    })
}

// shifted by the first value so constant inputs give their value exactly
fn mean(v: &[f64]) -> f64 {
    let shift = v[0];
    (shift + v.iter().map(|x| x - shift).sum::<f64>() / v.len() as f64).clamp(0.0, 1.0)
}

impl Calibration {
    /// Candidate trigger points `c_mean + k * c_std` for
    /// `k in {-2, -1.5, ..., 2}`, clamped to `[0, 1]`.
    pub fn candidate_gammas(&self) -> Vec<f64> {
        (-4..=4)
            .map(|k| (self.c_mean + k as f64 * 0.5 * self.c_std).clamp(0.0, 1.0))
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Calibration = serde_json::from_str(text)?;
        let bad = |m: String| Error::Parse(ParseError::InvalidField(m));
        if !(0.0..=1.0).contains(&c.c_mean) || c.c_std.is_nan() || c.c_std < 0.0 {
            return Err(bad(format!("c_mean {} / c_std {} out of range", c.c_mean, c.c_std)));
        }
        if let Some(s) = c.per_stage.iter().find(|s| s.histogram.len() != HISTOGRAM_BINS) {
            return Err(bad(format!(
                "histogram has {} bins, expected {HISTOGRAM_BINS}",
                s.histogram.len()
            )));
        }
        Ok(c)
    }

    /// Trigger points per decision point, for [`GateConfig::branch_gammas`].
    pub fn gammas(&self) -> Vec<f64> {
        self.per_stage.iter().map(|s| s.gamma).collect()
    }
}

/// One validation measurement at a candidate trigger point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub gamma: f64,
    pub accuracy: f64,
    pub forwarded: f64,
}

/// Smallest trigger point reaching `target` accuracy; when none does, the
/// most accurate one (smaller on ties).
pub fn trigger_from_accuracy(target: f64, sweep: &[SweepPoint]) -> Result<f64> {
    if sweep.is_empty() {
        return invalid("empty sweep");
    }
    if sweep.windows(2).any(|w| w[0].gamma > w[1].gamma) {
        return invalid("sweep must be sorted by gamma");
    }
    if let Some(p) = sweep.iter().find(|p| p.accuracy >= target) {
        return Ok(p.gamma);
    }
    let best = sweep
        .iter()
        .fold(sweep[0], |best, p| if p.accuracy > best.accuracy { *p } else { best });
    Ok(best.gamma)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn confidence_examples() {
        assert_eq!(confidence(&[0.1, 0.7, 0.2]).unwrap(), 0.7);
        assert!(close(confidence(&[0.1; 10]).unwrap(), 0.1, 1e-15));
        assert_eq!(confidence(&[0.0, 1.0, 0.0]).unwrap(), 1.0);
        assert!(confidence(&[]).is_err());
        assert!(confidence(&[0.5, 0.2]).is_err());
    }

    #[test]
    fn entropy_examples() {
        assert_eq!(entropy(&[0.0, 1.0, 0.0]).unwrap(), 0.0);
        assert!(close(entropy(&[0.1; 10]).unwrap(), 10f64.ln(), 1e-12));
        assert!(close(entropy(&[0.5, 0.5]).unwrap(), std::f64::consts::LN_2, 1e-12));
        assert!(entropy(&[]).is_err());
    }

    fn probs_with_top(beta: f64, top_class: usize, classes: usize) -> Vec<f64> {
        let rest = (1.0 - beta) / (classes - 1) as f64;
        (0..classes).map(|c| if c == top_class { beta } else { rest }).collect()
    }

    #[test]
    fn decide_examples() {
        let p = probs_with_top(0.9, 0, 10);
        let cfg = GateConfig { theta: 0.0, ..GateConfig::confidence(0.8) };
        assert_eq!(decide(&p, &cfg).unwrap().action, Action::Stop);

        let p = probs_with_top(0.8, 0, 10);
        let d = decide(&p, &cfg).unwrap();
        assert_eq!(d.action, Action::Continue);
        assert_eq!(d.effective_gamma, 0.8);

        let p = probs_with_top(0.85, 3, 10);
        let cfg = GateConfig {
            theta: 0.1,
            top_n: 1,
            priority_classes: [3].into(),
            ..GateConfig::confidence(0.8)
        };
        let d = decide(&p, &cfg).unwrap();
        assert!(d.boosted);
        assert!(close(d.effective_gamma, 0.9, 1e-12));
        assert_eq!(d.action, Action::Continue);

        // priority class outside the top-n: no boost
        let cfg = GateConfig { priority_classes: [5].into(), ..cfg };
        let d = decide(&p, &cfg).unwrap();
        assert!(!d.boosted);
        assert_eq!(d.action, Action::Stop);
    }

    #[test]
    fn boost_clamps_to_one() {
        let cfg = GateConfig {
            theta: 0.5,
            top_n: 1,
            priority_classes: [0].into(),
            ..GateConfig::confidence(0.9)
        };
        let d = decide(&[1.0, 0.0], &cfg).unwrap();
        assert_eq!(d.effective_gamma, 1.0);
        assert_eq!(d.action, Action::Continue);
    }

    #[test]
    fn top_n_larger_than_classes_is_rejected() {
        let cfg = GateConfig { top_n: 3, ..GateConfig::confidence(0.5) };
        assert!(decide(&[0.5, 0.5], &cfg).is_err());
        assert!(cfg.validate(2).is_err());
    }

    #[test]
    fn top_n_tie_break() {
        assert_eq!(top_n(&[0.25, 0.25, 0.5], 2), vec![2, 0]);
    }

    #[test]
    fn entropy_gate_direction() {
        let cfg = GateConfig { kind: GateKind::Entropy, theta: 0.0, top_n: 1, ..GateConfig::confidence(0.5) };
        assert_eq!(decide(&[1.0, 0.0], &cfg).unwrap().action, Action::Stop);
        assert_eq!(decide(&[0.5, 0.5], &cfg).unwrap().action, Action::Continue);
        let boosted = GateConfig {
            theta: 0.4,
            top_n: 1,
            priority_classes: [0].into(),
            ..cfg
        };
        let d = decide(&[0.9, 0.1], &boosted).unwrap();
        assert!(d.boosted);
        assert!(close(d.effective_gamma, 0.1, 1e-12));
        assert_eq!(d.action, Action::Continue);
    }

    #[test]
    fn extremes_agree() {
        let one_hot = [0.0, 0.0, 1.0, 0.0];
        let uniform = [0.25; 4];
        for g in [0.0, 0.3, 0.99] {
            let cfg = GateConfig { theta: 0.0, top_n: 1, ..GateConfig::confidence(g) };
            assert_eq!(decide(&one_hot, &cfg).unwrap().action, Action::Stop);
            let ent = GateConfig { kind: GateKind::Entropy, gamma: g + 0.01, ..cfg.clone() };
            assert_eq!(decide(&one_hot, &ent).unwrap().action, Action::Stop);
        }
        for g in [0.25, 0.5, 1.0] {
            let cfg = GateConfig { theta: 0.0, top_n: 1, ..GateConfig::confidence(g) };
            assert_eq!(decide(&uniform, &cfg).unwrap().action, Action::Continue);
        }
    }

    #[test]
    fn calibrate_examples() {
        let c = calibrate(&[0.5, 0.7, 0.9]).unwrap();
        assert!(close(c.c_mean, 0.7, 1e-12));
        assert!(close(c.c_std, 0.163299, 1e-6));
        assert_eq!(c.per_stage[0].histogram.iter().sum::<u64>(), 3);
        assert_eq!(calibrate(&[0.4; 7]).unwrap().c_std, 0.0);
        assert!(calibrate(&[]).is_err());
        assert!(calibrate(&[1.2]).is_err());
        let h = calibrate(&[0.0, 1.0]).unwrap().per_stage[0].histogram.clone();
        assert_eq!((h[0], h[63]), (1, 1));
    }

    #[test]
    fn calibrate_matches_two_pass_reference() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let v: Vec<f64> = (0..1000).map(|_| rng.random::<f64>()).collect();
        let c = calibrate(&v).unwrap();
        // reference: pairwise-free accumulation in reverse order
        let n = v.len() as f64;
        let m = v.iter().rev().fold(0.0, |a, x| a + x) / n;
        let var = v.iter().rev().fold(0.0, |a, x| a + (x - m) * (x - m)) / n;
        assert!(close(c.c_mean, m, 1e-12));
        assert!(close(c.c_std, var.sqrt(), 1e-12));
    }

    #[test]
    fn candidate_grid_is_clamped() {
        let c = Calibration { c_mean: 0.9, c_std: 0.1, per_stage: vec![] };
        let g = c.candidate_gammas();
        assert_eq!(g.len(), 9);
        assert!(close(g[0], 0.7, 1e-12));
        assert_eq!(g[8], 1.0);
        assert!(g.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn trigger_examples() {
        let sweep = [
            SweepPoint { gamma: 0.5, accuracy: 0.80, forwarded: 0.2 },
            SweepPoint { gamma: 0.7, accuracy: 0.85, forwarded: 0.4 },
            SweepPoint { gamma: 0.9, accuracy: 0.88, forwarded: 0.7 },
        ];
        assert_eq!(trigger_from_accuracy(0.85, &sweep).unwrap(), 0.7);
        assert_eq!(trigger_from_accuracy(0.99, &sweep).unwrap(), 0.9);
        assert_eq!(trigger_from_accuracy(0.0, &sweep).unwrap(), 0.5);
        assert!(trigger_from_accuracy(0.5, &[]).is_err());
        let mut unsorted = sweep;
        unsorted.swap(0, 2);
        assert!(trigger_from_accuracy(0.5, &unsorted).is_err());
        let tied = [
            SweepPoint { gamma: 0.2, accuracy: 0.6, forwarded: 0.1 },
            SweepPoint { gamma: 0.4, accuracy: 0.6, forwarded: 0.3 },
        ];
        assert_eq!(trigger_from_accuracy(0.9, &tied).unwrap(), 0.2);
    }

    #[test]
    fn calibration_json_round_trip() {
        let c = calibrate_stages(&[vec![0.31, 0.77, 0.5], vec![0.9, 0.95]]).unwrap();
        let text = c.to_json().unwrap();
        let back = Calibration::from_json(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_json().unwrap(), text);
        let broken = text.replacen("\"c_mean\"", "\"c_mea\"", 1);
        assert!(Calibration::from_json(&broken).is_err());
    }

    fn probs_strategy() -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(0.001f64..1.0, 2..12).prop_map(|v| {
            let s: f64 = v.iter().sum();
            v.into_iter().map(|x| x / s).collect()
        })
    }

    proptest! {
        #[test]
        fn raising_gamma_only_adds_continues(p in probs_strategy(), a in 0.0f64..1.0, b in 0.0f64..1.0, theta in 0.0f64..0.3) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let base = GateConfig { theta, top_n: 1, priority_classes: [0].into(), ..GateConfig::confidence(lo) };
            let high = GateConfig { gamma: hi, ..base.clone() };
            if decide(&p, &base).unwrap().action == Action::Continue {
                prop_assert_eq!(decide(&p, &high).unwrap().action, Action::Continue);
            }
        }

        #[test]
        fn boost_only_adds_continues(p in probs_strategy(), g in 0.0f64..1.0, theta in 0.0f64..0.5, ent in any::<bool>()) {
            let kind = if ent { GateKind::Entropy } else { GateKind::Confidence };
            let plain = GateConfig { kind, theta: 0.0, top_n: 2, priority_classes: [0, 1].into(), ..GateConfig::confidence(g) };
            let boosted = GateConfig { theta, ..plain.clone() };
            if decide(&p, &plain).unwrap().action == Action::Continue {
                prop_assert_eq!(decide(&p, &boosted).unwrap().action, Action::Continue);
            }
        }

        #[test]
        fn decide_is_pure(p in probs_strategy(), g in 0.0f64..1.0) {
            let cfg = GateConfig { top_n: 1, ..GateConfig::confidence(g) };
            prop_assert_eq!(decide(&p, &cfg).unwrap(), decide(&p, &cfg).unwrap());
        }

        #[test]
        fn histogram_counts_samples(v in proptest::collection::vec(0.0f64..=1.0, 1..200)) {
            let c = calibrate(&v).unwrap();
            prop_assert_eq!(c.per_stage[0].histogram.iter().sum::<u64>(), v.len() as u64);
            prop_assert!(c.c_std >= 0.0 && (0.0..=1.0).contains(&c.c_mean));
        }
    }
}
