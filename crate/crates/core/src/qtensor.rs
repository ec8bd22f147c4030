//! Quantized activation tensors and conversion to and from the real domain.
//!
//! Activations are 5-bit unsigned codes in `0..=31` sharing one per-tensor
//! scale: the real value of a code `q` is `q * scale`. Convolution
//! accumulators live in [`AccumTensor`] and real-valued intermediates
//! (pooled features, reference computations) in [`FloatTensor`].

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Largest activation code.
pub const QMAX: u8 = 31;
/// Number of activation bits.
pub const ACT_BITS: u32 = 5;

/// NCHW tensor shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self { n, c, h, w }
    }

    pub const fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Elements per sample (`c * h * w`).
    pub const fn sample_len(&self) -> usize {
        self.c * self.h * self.w
    }

    #[inline]
    pub const fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.c + c) * self.h + y) * self.w + x
    }

    pub const fn with_batch(&self, n: usize) -> Self {
        Self { n, ..*self }
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}

fn check_len(shape: Shape, len: usize) -> Result<()> {
    if shape.len() != len {
        return invalid(format!(
            "data length {len} does not match shape {shape} ({} elements)",
            shape.len()
        ));
    }
    Ok(())
}

fn check_scale(scale: f64) -> Result<()> {
    if !(scale.is_finite() && scale > 0.0) {
        return invalid(format!("scale must be positive and finite, got {scale}"));
    }
    Ok(())
}

/// 5-bit unsigned activation tensor with a shared scale.
#[derive(Debug, Clone, PartialEq)]
pub struct QTensor {
    shape: Shape,
    data: Vec<u8>,
    scale: f64,
}

impl QTensor {
    pub fn new(shape: Shape, data: Vec<u8>, scale: f64) -> Result<Self> {
        check_len(shape, data.len())?;
        check_scale(scale)?;
        if let Some(bad) = data.iter().find(|&&q| q > QMAX) {
            return invalid(format!("activation code {bad} exceeds {QMAX}"));
        }
        Ok(Self { shape, data, scale })
    }

    pub fn zeros(shape: Shape, scale: f64) -> Result<Self> {
        Self::new(shape, vec![0; shape.len()], scale)
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> u8 {
        self.data[self.shape.index(n, c, y, x)]
    }

    /// Codes of sample `n` in CHW order.
    pub fn sample(&self, n: usize) -> &[u8] {
        let len = self.shape.sample_len();
        &self.data[n * len..(n + 1) * len]
    }

    /// New tensor holding the listed samples, in the listed order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let mut data = Vec::with_capacity(indices.len() * self.shape.sample_len());
        for &i in indices {
            if i >= self.shape.n {
                return invalid(format!("sample {i} out of range for batch {}", self.shape.n));
            }
            data.extend_from_slice(self.sample(i));
        }
        Ok(Self {
            shape: self.shape.with_batch(indices.len()),
            data,
            scale: self.scale,
        })
    }

    /// Concatenates tensors along the batch axis. All parts must share the
    /// per-sample shape and scale.
    pub fn concat(parts: &[QTensor]) -> Result<Self> {
        let Some(first) = parts.first() else {
            return invalid("cannot concatenate zero tensors");
        };
        let mut data = Vec::new();
        let mut n = 0;
        for p in parts {
            if p.shape.with_batch(0) != first.shape.with_batch(0) || p.scale != first.scale {
                return invalid("concatenated tensors differ in sample shape or scale");
            }
            n += p.shape.n;
            data.extend_from_slice(&p.data);
        }
        Ok(Self {
            shape: first.shape.with_batch(n),
            data,
            scale: first.scale,
        })
    }
}

/// Signed convolution accumulators.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AccumTensor {
    shape: Shape,
    data: Vec<i32>,
}

impl AccumTensor {
    pub fn new(shape: Shape, data: Vec<i32>) -> Result<Self> {
        check_len(shape, data.len())?;
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[i32] {
        &self.data
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> i32 {
        self.data[self.shape.index(n, c, y, x)]
    }
}

/// Real-valued tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct FloatTensor {
    shape: Shape,
    data: Vec<f64>,
}

impl FloatTensor {
    pub fn new(shape: Shape, data: Vec<f64>) -> Result<Self> {
        check_len(shape, data.len())?;
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.shape.index(n, c, y, x)]
    }

    pub fn sample(&self, n: usize) -> &[f64] {
        let len = self.shape.sample_len();
        &self.data[n * len..(n + 1) * len]
    }
}

/// Quantizes a single real value to a code: `clamp(round(x / scale), 0, 31)`
/// with rounding half away from zero.
#[inline]
pub fn quantize_scalar(x: f64, scale: f64) -> u8 {
    (x / scale).round().clamp(0.0, QMAX as f64) as u8
}

/// Maps a real tensor onto the 5-bit grid with the given scale.
pub fn quantize(x: &FloatTensor, scale: f64) -> Result<QTensor> {
    check_scale(scale)?;
    if x.data.iter().any(|v| v.is_nan()) {
        return invalid("cannot quantize NaN");
    }
    let data = x.data.iter().map(|&v| quantize_scalar(v, scale)).collect();
    Ok(QTensor {
        shape: x.shape,
        data,
        scale,
    })
}

/// Real values represented by `q`.
pub fn dequantize(q: &QTensor) -> FloatTensor {
    FloatTensor {
        shape: q.shape,
        data: q.data.iter().map(|&v| v as f64 * q.scale).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn single(v: f64) -> FloatTensor {
        FloatTensor::new(Shape::new(1, 1, 1, 1), vec![v]).unwrap()
    }

    #[test]
    fn quantize_fixed_points() {
        let s = 1.0 / 31.0;
        assert_eq!(quantize(&single(0.0), s).unwrap().data(), &[0]);
        assert_eq!(quantize(&single(1.0), s).unwrap().data(), &[31]);
        assert_eq!(quantize(&single(2.0), s).unwrap().data(), &[31]);
        assert_eq!(quantize(&single(-5.0), s).unwrap().data(), &[0]);
        assert_eq!(quantize(&single(f64::INFINITY), s).unwrap().data(), &[31]);
    }

    #[test]
    fn quantize_rounds_half_away_from_zero() {
        assert_eq!(quantize(&single(2.5), 1.0).unwrap().data(), &[3]);
        assert_eq!(quantize(&single(3.5), 1.0).unwrap().data(), &[4]);
        assert_eq!(quantize(&single(2.4999), 1.0).unwrap().data(), &[2]);
    }

    #[test]
    fn quantize_rejects_bad_scale_and_nan() {
        assert!(quantize(&single(1.0), 0.0).is_err());
        assert!(quantize(&single(1.0), -1.0).is_err());
        assert!(quantize(&single(f64::NAN), 1.0).is_err());
    }

    #[test]
    fn quantize_matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let shape = Shape::new(2, 3, 5, 4);
        let x: Vec<f64> = (0..shape.len()).map(|_| rng.random_range(-1.0..2.0)).collect();
        let s = 1.0 / 31.0;
        let q = quantize(&FloatTensor::new(shape, x.clone()).unwrap(), s).unwrap();
        for (i, &v) in x.iter().enumerate() {
            // independent reference: explicit branches instead of clamp/round
            let r = v / s;
            let r = if r >= 0.0 { (r + 0.5).floor() } else { (r - 0.5).ceil() };
            let expected = if r < 0.0 { 0 } else if r > 31.0 { 31 } else { r as u8 };
            assert_eq!(q.data()[i], expected, "element {i} value {v}");
        }
    }

    #[test]
    fn dequantize_examples() {
        let q = QTensor::new(Shape::new(1, 1, 1, 1), vec![31], 1.0 / 31.0).unwrap();
        assert!((dequantize(&q).data()[0] - 1.0).abs() < 1e-15);
        let q = QTensor::new(Shape::new(1, 1, 1, 1), vec![0], 0.37).unwrap();
        assert_eq!(dequantize(&q).data()[0], 0.0);
    }

    #[test]
    fn constructor_rejects_invalid() {
        assert!(QTensor::new(Shape::new(1, 1, 1, 2), vec![0], 1.0).is_err());
        assert!(QTensor::new(Shape::new(1, 1, 1, 1), vec![32], 1.0).is_err());
        assert!(QTensor::new(Shape::new(1, 1, 1, 1), vec![3], 0.0).is_err());
        assert!(AccumTensor::new(Shape::new(1, 2, 1, 1), vec![0]).is_err());
    }

    #[test]
    fn select_and_concat() {
        let q = QTensor::new(Shape::new(3, 1, 1, 2), vec![1, 2, 3, 4, 5, 6], 1.0).unwrap();
        let s = q.select(&[2, 0]).unwrap();
        assert_eq!(s.data(), &[5, 6, 1, 2]);
        let c = QTensor::concat(&[s, q.select(&[1]).unwrap()]).unwrap();
        assert_eq!(c.shape().n, 3);
        assert_eq!(c.data(), &[5, 6, 1, 2, 3, 4]);
        assert!(q.select(&[3]).is_err());
    }

    proptest! {
        #[test]
        fn grid_round_trip(codes in proptest::collection::vec(0u8..=31, 1..64), scale in 1e-3f64..10.0) {
            let shape = Shape::new(1, 1, 1, codes.len());
            let x: Vec<f64> = codes.iter().map(|&c| c as f64 * scale).collect();
            let q = quantize(&FloatTensor::new(shape, x.clone()).unwrap(), scale).unwrap();
            prop_assert_eq!(q.data(), &codes[..]);
            let back = dequantize(&q);
            prop_assert_eq!(back.data(), &x[..]);
        }

        #[test]
        fn monotone_and_saturating(a in -1e6f64..1e6, b in -1e6f64..1e6, scale in 1e-3f64..10.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let ql = quantize_scalar(lo, scale);
            let qh = quantize_scalar(hi, scale);
            prop_assert!(ql <= qh);
            prop_assert!(qh <= QMAX);
        }
    }
}
