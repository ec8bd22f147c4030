//! Dataset ingestion: CIFAR binary batches and a raw quantized-tensor file.

use std::io::Write;

use crate::error::{invalid, ParseError, Result};
use crate::qtensor::{quantize_scalar, QTensor, Shape, QMAX};
use crate::staged_model::FeatureShape;

/// Shape of one CIFAR image.
pub const CIFAR_IMAGE: FeatureShape = FeatureShape::new(3, 32, 32);
const CIFAR_PIXELS: usize = 3 * 32 * 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CifarVariant {
    /// One label byte per record.
    Cifar10,
    /// Coarse then fine label byte; the fine label is used.
    Cifar100,
}

impl CifarVariant {
    pub const fn record_len(self) -> usize {
        CIFAR_PIXELS + self.label_bytes()
    }

    const fn label_bytes(self) -> usize {
        match self {
            Self::Cifar10 => 1,
            Self::Cifar100 => 2,
        }
    }

    pub const fn num_classes(self) -> usize {
        match self {
            Self::Cifar10 => 10,
            Self::Cifar100 => 100,
        }
    }
}

impl std::str::FromStr for CifarVariant {
    type Err = crate::error::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cifar10" => Ok(Self::Cifar10),
            "cifar100" => Ok(Self::Cifar100),
            other => invalid(format!("unknown CIFAR variant {other:?}")),
        }
    }
}

/// Images with optional labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: QTensor,
    pub labels: Option<Vec<usize>>,
}

/// Pixel byte to activation code: `round(pixel / 255 * 31)`.
pub fn pixel_code(pixel: u8) -> u8 {
    quantize_scalar(pixel as f64 / 255.0, 1.0 / QMAX as f64)
}

/// Parses a CIFAR binary batch file.
pub fn ingest_cifar(bytes: &[u8], variant: CifarVariant) -> Result<Dataset> {
    let rec = variant.record_len();
    if !bytes.len().is_multiple_of(rec) {
        return Err(ParseError::Truncated("cifar record").into());
    }
    let n = bytes.len() / rec;
    let lut: Vec<u8> = (0..=255u8).map(pixel_code).collect();
    let mut data = Vec::with_capacity(n * CIFAR_PIXELS);
    let mut labels = Vec::with_capacity(n);
    for r in bytes.chunks_exact(rec) {
        let (label, pixels) = r.split_at(variant.label_bytes());
        let y = *label.last().unwrap() as usize;
        if y >= variant.num_classes() {
            return Err(ParseError::InvalidField(format!("label {y} out of range")).into());
        }
        labels.push(y);
        data.extend(pixels.iter().map(|&p| lut[p as usize]));
    }
    Ok(Dataset {
        images: QTensor::new(CIFAR_IMAGE.batch(n), data, 1.0 / QMAX as f64)?,
        labels: Some(labels),
    })
}

/// Writes records in CIFAR binary layout. For CIFAR-100 the coarse label
/// byte is written as 0.
pub fn write_cifar(mut out: impl Write, variant: CifarVariant, records: &[(u8, Vec<u8>)]) -> Result<()> {
    for (label, pixels) in records {
        if pixels.len() != CIFAR_PIXELS {
            return invalid(format!("record has {} pixels, expected {CIFAR_PIXELS}", pixels.len()));
        }
        if variant == CifarVariant::Cifar100 {
            out.write_all(&[0])?;
        }
        out.write_all(&[*label])?;
        out.write_all(pixels)?;
    }
    Ok(())
}

/// Magic of the raw tensor file.
pub const RAW_MAGIC: [u8; 4] = *b"AHQT";
pub const RAW_VERSION: u32 = 1;

/// Raw file: `"AHQT" | version u32 | N C H W u32 | scale f64 | N*C*H*W code
/// bytes | has_labels u8 | (u32 label) * N if has_labels`, little-endian.
pub fn write_raw(ds: &Dataset) -> Vec<u8> {
    let s = ds.images.shape();
    let mut out = Vec::with_capacity(33 + s.len() + 4 * s.n);
    out.extend_from_slice(&RAW_MAGIC);
    out.extend_from_slice(&RAW_VERSION.to_le_bytes());
    for d in [s.n, s.c, s.h, s.w] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.extend_from_slice(&ds.images.scale().to_le_bytes());
    out.extend_from_slice(ds.images.data());
    match &ds.labels {
        Some(l) => {
            out.push(1);
            for &y in l {
                out.extend_from_slice(&(y as u32).to_le_bytes());
            }
        }
        None => out.push(0),
    }
    out
}

pub fn read_raw(bytes: &[u8]) -> Result<Dataset> {
    let mut pos = 0;
    let mut take = |n: usize, what: &'static str| -> Result<&[u8], ParseError> {
        let s = bytes.get(pos..pos + n).ok_or(ParseError::Truncated(what))?;
        pos += n;
        Ok(s)
    };
    let magic: [u8; 4] = take(4, "magic")?.try_into().unwrap();
    if magic != RAW_MAGIC {
        return Err(ParseError::BadMagic { expected: RAW_MAGIC, found: magic }.into());
    }
    let u32_at = |b: &[u8]| u32::from_le_bytes(b.try_into().unwrap()) as usize;
    let version = u32_at(take(4, "version")?) as u32;
    if version != RAW_VERSION {
        return Err(ParseError::VersionMismatch { expected: RAW_VERSION, found: version }.into());
    }
    let mut dims = [0usize; 4];
    for d in dims.iter_mut() {
        *d = u32_at(take(4, "shape")?);
    }
    let shape = Shape::new(dims[0], dims[1], dims[2], dims[3]);
    let scale = f64::from_le_bytes(take(8, "scale")?.try_into().unwrap());
    let len = dims
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| ParseError::InvalidField("tensor too large".into()))?;
    let data = take(len, "tensor data")?.to_vec();
    let labels = match take(1, "label flag")?[0] {
        0 => None,
        1 => Some(
            take(4 * shape.n, "labels")?
                .chunks_exact(4)
                .map(u32_at)
                .collect(),
        ),
        f => return Err(ParseError::InvalidField(format!("label flag {f}")).into()),
    };
    if pos != bytes.len() {
        return Err(ParseError::TrailingBytes(bytes.len() - pos).into());
    }
    let images = QTensor::new(shape, data, scale)
        .map_err(|e| ParseError::InvalidField(e.to_string()))?;
    Ok(Dataset { images, labels })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn all_white_record() {
        let mut bytes = vec![3u8];
        bytes.extend(std::iter::repeat_n(255u8, CIFAR_PIXELS));
        let ds = ingest_cifar(&bytes, CifarVariant::Cifar10).unwrap();
        assert_eq!(ds.labels, Some(vec![3]));
        assert!(ds.images.data().iter().all(|&c| c == 31));
        assert_eq!(ds.images.shape(), CIFAR_IMAGE.batch(1));
    }

    #[test]
    fn empty_file_is_empty_dataset() {
        let ds = ingest_cifar(&[], CifarVariant::Cifar10).unwrap();
        assert_eq!(ds.images.shape().n, 0);
        assert_eq!(ds.labels, Some(vec![]));
    }

    #[test]
    fn truncated_and_bad_variant() {
        assert!(ingest_cifar(&[0u8; 3072], CifarVariant::Cifar10).is_err());
        assert!(ingest_cifar(&[0u8; 3073], CifarVariant::Cifar100).is_err());
        assert!("svhn".parse::<CifarVariant>().is_err());
        let mut bad = vec![10u8];
        bad.extend([0u8; CIFAR_PIXELS]);
        assert!(ingest_cifar(&bad, CifarVariant::Cifar10).is_err());
    }

    #[test]
    fn pixel_codes() {
        assert_eq!(pixel_code(0), 0);
        assert_eq!(pixel_code(255), 31);
        for p in 0..=255u8 {
            let exact = p as f64 * 31.0 / 255.0;
            assert_eq!(pixel_code(p), exact.round() as u8);
        }
    }

    #[test]
    fn writer_reader_round_trip() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        for variant in [CifarVariant::Cifar10, CifarVariant::Cifar100] {
            let records: Vec<(u8, Vec<u8>)> = (0..5)
                .map(|_| {
                    let y = rng.random_range(0..variant.num_classes() as u8);
                    (y, (0..CIFAR_PIXELS).map(|_| rng.random()).collect())
                })
                .collect();
            let mut buf = Vec::new();
            write_cifar(&mut buf, variant, &records).unwrap();
            assert_eq!(buf.len(), 5 * variant.record_len());
            let ds = ingest_cifar(&buf, variant).unwrap();
            let labels: Vec<usize> = records.iter().map(|r| r.0 as usize).collect();
            assert_eq!(ds.labels.as_ref(), Some(&labels));
            for (i, (_, px)) in records.iter().enumerate() {
                let codes: Vec<u8> = px.iter().map(|&p| pixel_code(p)).collect();
                assert_eq!(ds.images.sample(i), &codes[..]);
            }
        }
    }

    #[test]
    fn raw_round_trip_and_errors() {
        let (images, labels) = crate::zoo::random_images(FeatureShape::new(2, 3, 3), 4, 3, 1);
        for ds in [
            Dataset { images: images.clone(), labels: Some(labels) },
            Dataset { images, labels: None },
        ] {
            let bytes = write_raw(&ds);
            assert_eq!(read_raw(&bytes).unwrap(), ds);
            assert!(read_raw(&bytes[..bytes.len() - 1]).is_err());
            let mut bad = bytes.clone();
            bad[0] = b'X';
            assert!(matches!(
                read_raw(&bad),
                Err(crate::Error::Parse(ParseError::BadMagic { .. }))
            ));
        }
    }
}
