//! `FVOL1` volume container.
//!
//! An ASCII header line `FVOL1 <W> <H> <D> <f32|i32> <channels>\n` followed by
//! the little-endian payload, x fastest, channels interleaved per voxel.

use std::path::Path;

use crate::error::{Error, Result};
use crate::features::FeatureStack;
use crate::fields::{DisplacementField, Dims, LabelMap, ProbMask, ScalarField};
use crate::real::Real;

const MAGIC: &str = "FVOL1";
const MAX_HEADER: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    I32,
}

impl DType {
    fn name(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::I32 => "i32",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    F32(Vec<f32>),
    I32(Vec<i32>),
}

/// Untyped container contents.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub dims: Dims,
    pub channels: usize,
    pub payload: Payload,
    /// Length of the header line including the newline.
    pub header_len: usize,
}

impl Volume {
    pub fn dtype(&self) -> DType {
        match self.payload {
            Payload::F32(_) => DType::F32,
            Payload::I32(_) => DType::I32,
        }
    }

    fn describe(&self) -> String {
        format!("{} x {} channel(s)", self.dtype().name(), self.channels)
    }

    fn expect(&self, dtype: DType, channels: Option<usize>) -> Result<()> {
        let ok = self.dtype() == dtype && channels.is_none_or(|c| c == self.channels);
        if !ok {
            let expected = match channels {
                Some(c) => format!("{} x {c} channel(s)", dtype.name()),
                None => format!("{} x any channels", dtype.name()),
            };
            return Err(Error::TypeMismatch {
                offset: 0,
                expected,
                found: self.describe(),
            });
        }
        Ok(())
    }
}

fn header_error(offset: usize, reason: impl Into<String>) -> Error {
    Error::MalformedHeader {
        offset,
        reason: reason.into(),
    }
}

/// Parses a complete FVOL byte buffer.
pub fn decode(bytes: &[u8]) -> Result<Volume> {
    let newline = bytes
        .iter()
        .take(MAX_HEADER)
        .position(|&b| b == b'\n')
        .ok_or_else(|| header_error(bytes.len().min(MAX_HEADER), "no newline-terminated header line"))?;
    let line = std::str::from_utf8(&bytes[..newline]).map_err(|e| header_error(e.valid_up_to(), "header is not ASCII"))?;
    let mut tokens = Vec::new();
    let mut pos = 0;
    for tok in line.split(' ') {
        tokens.push((pos, tok));
        pos += tok.len() + 1;
    }
    if tokens.len() != 6 {
        return Err(header_error(0, format!("expected 6 header fields, found {}", tokens.len())));
    }
    if tokens[0].1 != MAGIC {
        return Err(header_error(0, format!("bad magic `{}`", tokens[0].1)));
    }
    let parse_dim = |(off, tok): (usize, &str)| -> Result<usize> {
        match tok.parse::<usize>() {
            Ok(v) if v > 0 => Ok(v),
            _ => Err(header_error(off, format!("expected a positive integer, found `{tok}`"))),
        }
    };
    let dims = Dims::new(parse_dim(tokens[1])?, parse_dim(tokens[2])?, parse_dim(tokens[3])?);
    let dtype = match tokens[4].1 {
        "f32" => DType::F32,
        "i32" => DType::I32,
        other => return Err(header_error(tokens[4].0, format!("unknown dtype `{other}`"))),
    };
    let channels = parse_dim(tokens[5])?;
    let header_len = newline + 1;
    let count = dims
        .len()
        .checked_mul(channels)
        .ok_or_else(|| header_error(tokens[1].0, "volume too large"))?;
    let expected = count * 4;
    let actual = bytes.len() - header_len;
    if actual < expected {
        return Err(Error::Truncated {
            offset: header_len,
            expected,
            actual,
        });
    }
    if actual > expected {
        return Err(header_error(
            header_len + expected,
            format!("{} trailing bytes after payload", actual - expected),
        ));
    }
    let body = &bytes[header_len..];
    let words = body.chunks_exact(4).map(|c| [c[0], c[1], c[2], c[3]]);
    let payload = match dtype {
        DType::F32 => Payload::F32(words.map(f32::from_le_bytes).collect()),
        DType::I32 => Payload::I32(words.map(i32::from_le_bytes).collect()),
    };
    Ok(Volume {
        dims,
        channels,
        payload,
        header_len,
    })
}

pub fn encode(dims: Dims, channels: usize, payload: &Payload) -> Vec<u8> {
    let dtype = match payload {
        Payload::F32(_) => DType::F32,
        Payload::I32(_) => DType::I32,
    };
    let mut out = format!("{MAGIC} {} {} {} {} {channels}\n", dims.w, dims.h, dims.d, dtype.name()).into_bytes();
    match payload {
        Payload::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        Payload::I32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
    }
    out
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn f32_payload(v: &Volume) -> &[f32] {
    match &v.payload {
        Payload::F32(d) => d,
        Payload::I32(_) => unreachable!("dtype checked"),
    }
}

fn with_offset(e: Error, offset: usize) -> Error {
    match e {
        Error::TypeMismatch { expected, found, .. } => Error::TypeMismatch {
            offset,
            expected,
            found,
        },
        other => other,
    }
}

pub fn scalar_from_volume<T: Real>(v: &Volume) -> Result<ScalarField<T>> {
    v.expect(DType::F32, Some(1)).map_err(|e| with_offset(e, 0))?;
    ScalarField::new(v.dims, f32_payload(v).iter().map(|&x| T::lit(x as f64)).collect())
}

/// Reads labels; `num_classes = None` infers `max + 1` (at least 2).
pub fn labels_from_volume(v: &Volume, num_classes: Option<usize>) -> Result<LabelMap> {
    v.expect(DType::I32, Some(1)).map_err(|e| with_offset(e, 0))?;
    let Payload::I32(data) = &v.payload else { unreachable!() };
    if let Some(i) = data.iter().position(|&l| l < 0) {
        return Err(Error::LabelOutOfRange {
            label: data[i] as i64,
            index: i,
            num_classes: num_classes.unwrap_or(0),
        });
    }
    let k = num_classes.unwrap_or_else(|| (data.iter().copied().max().unwrap_or(0) as usize + 1).max(2));
    LabelMap::new(v.dims, data.iter().map(|&l| l as u32).collect(), k)
}

pub fn probs_from_volume<T: Real>(v: &Volume, num_classes: Option<usize>) -> Result<ProbMask<T>> {
    v.expect(DType::F32, num_classes).map_err(|e| with_offset(e, 0))?;
    ProbMask::new(v.dims, v.channels, f32_payload(v).iter().map(|&x| T::lit(x as f64)).collect())
}

pub fn displacement_from_volume<T: Real>(v: &Volume) -> Result<DisplacementField<T>> {
    v.expect(DType::F32, Some(3)).map_err(|e| with_offset(e, 0))?;
    let vectors = f32_payload(v)
        .chunks_exact(3)
        .map(|c| [T::lit(c[0] as f64), T::lit(c[1] as f64), T::lit(c[2] as f64)])
        .collect();
    DisplacementField::new(v.dims, vectors)
}

pub fn read_scalar<T: Real>(path: impl AsRef<Path>) -> Result<ScalarField<T>> {
    scalar_from_volume(&read_volume(path)?)
}

pub fn read_labels(path: impl AsRef<Path>, num_classes: Option<usize>) -> Result<LabelMap> {
    labels_from_volume(&read_volume(path)?, num_classes)
}

pub fn read_probs<T: Real>(path: impl AsRef<Path>, num_classes: Option<usize>) -> Result<ProbMask<T>> {
    probs_from_volume(&read_volume(path)?, num_classes)
}

pub fn read_displacement<T: Real>(path: impl AsRef<Path>) -> Result<DisplacementField<T>> {
    displacement_from_volume(&read_volume(path)?)
}

fn to_f32<T: Real>(v: T) -> f32 {
    v.as_f64() as f32
}

pub fn encode_scalar<T: Real>(f: &ScalarField<T>) -> Vec<u8> {
    encode(f.dims(), 1, &Payload::F32(f.data().iter().map(|&v| to_f32(v)).collect()))
}

pub fn encode_labels(l: &LabelMap) -> Vec<u8> {
    encode(l.dims(), 1, &Payload::I32(l.labels().iter().map(|&v| v as i32).collect()))
}

pub fn encode_probs<T: Real>(m: &ProbMask<T>) -> Vec<u8> {
    encode(
        m.dims(),
        m.num_classes(),
        &Payload::F32(m.probs().iter().map(|&v| to_f32(v)).collect()),
    )
}

pub fn encode_displacement<T: Real>(d: &DisplacementField<T>) -> Vec<u8> {
    encode(
        d.dims(),
        3,
        &Payload::F32(d.vectors().iter().flat_map(|v| v.map(to_f32)).collect()),
    )
}

pub fn encode_features<T: Real>(f: &FeatureStack<T>) -> Vec<u8> {
    let c = f.num_channels();
    let n = f.dims().len();
    let mut data = Vec::with_capacity(n * c);
    for v in 0..n {
        for ch in 0..c {
            data.push(to_f32(f.channel(ch)[v]));
        }
    }
    encode(f.dims(), c, &Payload::F32(data))
}

pub fn write_scalar<T: Real>(f: &ScalarField<T>, path: impl AsRef<Path>) -> Result<()> {
    write_bytes(path.as_ref(), &encode_scalar(f))
}

pub fn write_labels(l: &LabelMap, path: impl AsRef<Path>) -> Result<()> {
    write_bytes(path.as_ref(), &encode_labels(l))
}

pub fn write_probs<T: Real>(m: &ProbMask<T>, path: impl AsRef<Path>) -> Result<()> {
    write_bytes(path.as_ref(), &encode_probs(m))
}

pub fn write_displacement<T: Real>(d: &DisplacementField<T>, path: impl AsRef<Path>) -> Result<()> {
    write_bytes(path.as_ref(), &encode_displacement(d))
}

pub fn write_features<T: Real>(f: &FeatureStack<T>, path: impl AsRef<Path>) -> Result<()> {
    write_bytes(path.as_ref(), &encode_features(f))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_built_2d_fixture() {
        let mut bytes = b"FVOL1 4 4 1 f32 1\n".to_vec();
        for i in 0..16 {
            bytes.extend_from_slice(&(i as f32 * 0.5).to_le_bytes());
        }
        let v = decode(&bytes).unwrap();
        assert_eq!(v.dims, Dims::new_2d(4, 4));
        let f: ScalarField<f32> = scalar_from_volume(&v).unwrap();
        assert_eq!(f.get(3, 2, 0), 5.5);
    }

    #[test]
    fn truncated_payload_reports_counts() {
        let mut bytes = b"FVOL1 4 4 1 f32 1\n".to_vec();
        bytes.extend_from_slice(&[0u8; 60]);
        match decode(&bytes) {
            Err(Error::Truncated {
                offset,
                expected,
                actual,
            }) => {
                assert_eq!((offset, expected, actual), (18, 64, 60));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn header_errors_carry_offsets() {
        assert!(matches!(decode(b"FVOL2 1 1 1 f32 1\n\0\0\0\0"), Err(Error::MalformedHeader { offset: 0, .. })));
        assert!(matches!(decode(b"FVOL1 1 x 1 f32 1\n\0\0\0\0"), Err(Error::MalformedHeader { offset: 8, .. })));
        assert!(matches!(decode(b"FVOL1 1 1 1 f64 1\n\0\0\0\0"), Err(Error::MalformedHeader { offset: 12, .. })));
        assert!(matches!(decode(b"FVOL1 1 1 1 f32 1"), Err(Error::MalformedHeader { .. })));
        assert!(matches!(
            decode(b"FVOL1 1 1 1 f32 1\n\0\0\0\0\0"),
            Err(Error::MalformedHeader { offset: 22, .. })
        ));
    }

    #[test]
    fn dtype_and_class_mismatch() {
        let l = LabelMap::new(Dims::new_2d(2, 1), vec![0, 1], 2).unwrap();
        let v = decode(&encode_labels(&l)).unwrap();
        assert!(matches!(scalar_from_volume::<f32>(&v), Err(Error::TypeMismatch { .. })));
        assert!(labels_from_volume(&v, Some(2)).is_ok());
        let m = l.one_hot::<f32>();
        let v = decode(&encode_probs(&m)).unwrap();
        assert!(matches!(probs_from_volume::<f32>(&v, Some(3)), Err(Error::TypeMismatch { .. })));
    }
}
