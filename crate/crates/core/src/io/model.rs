//! `SEGM1` segmenter files: `SEGM1 <hidden> <classes> <kx> <ky> <kz>\n`
//! followed by little-endian f32 parameters in `w1, b1, w2, b2` order.

use std::path::Path;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::segmenter::SegModel;

const MAGIC: &str = "SEGM1";

pub fn encode_model<T: Real>(m: &SegModel<T>) -> Vec<u8> {
    let k = m.kernel();
    let mut out = format!("{MAGIC} {} {} {} {} {}\n", m.hidden(), m.classes(), k[0], k[1], k[2]).into_bytes();
    for p in m.params() {
        out.extend_from_slice(&(p.as_f64() as f32).to_le_bytes());
    }
    out
}

pub fn decode_model<T: Real>(bytes: &[u8]) -> Result<SegModel<T>> {
    let malformed = |offset, reason: &str| Error::MalformedHeader {
        offset,
        reason: reason.to_string(),
    };
    let newline = bytes
        .iter()
        .take(128)
        .position(|&b| b == b'\n')
        .ok_or_else(|| malformed(0, "no newline-terminated header line"))?;
    let line = std::str::from_utf8(&bytes[..newline]).map_err(|_| malformed(0, "header is not ASCII"))?;
    let fields: Vec<&str> = line.split(' ').collect();
    if fields.len() != 6 || fields[0] != MAGIC {
        return Err(malformed(0, "expected `SEGM1 hidden classes kx ky kz`"));
    }
    let mut nums = [0usize; 5];
    let mut offset = MAGIC.len() + 1;
    for (slot, tok) in nums.iter_mut().zip(&fields[1..]) {
        *slot = tok
            .parse()
            .map_err(|_| malformed(offset, &format!("expected an integer, found `{tok}`")))?;
        offset += tok.len() + 1;
    }
    let [hidden, classes, kx, ky, kz] = nums;
    let header_len = newline + 1;
    let body = &bytes[header_len..];
    if body.len() % 4 != 0 {
        return Err(Error::Truncated {
            offset: header_len,
            expected: body.len().next_multiple_of(4),
            actual: body.len(),
        });
    }
    let params: Vec<T> = body
        .chunks_exact(4)
        .map(|c| T::lit(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
        .collect();
    let expected = SegModel::<T>::zeros(hidden, classes, kz == 3)?.num_params() * 4;
    if body.len() != expected {
        return Err(Error::Truncated {
            offset: header_len,
            expected,
            actual: body.len(),
        });
    }
    SegModel::from_params(hidden, classes, [kx, ky, kz], &params)
}

pub fn write_model<T: Real>(m: &SegModel<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_model(m)).map_err(|e| Error::io(path, e))
}

pub fn read_model<T: Real>(path: impl AsRef<Path>) -> Result<SegModel<T>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_model(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_f32() {
        let m = SegModel::<f32>::init(4, 3, false, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let back: SegModel<f32> = decode_model(&encode_model(&m)).unwrap();
        assert_eq!(back.params(), m.params());
        assert_eq!(encode_model(&back), encode_model(&m));
    }

    #[test]
    fn truncated_model() {
        let m = SegModel::<f32>::init(2, 2, false, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let mut bytes = encode_model(&m);
        bytes.truncate(bytes.len() - 4);
        assert!(matches!(decode_model::<f32>(&bytes), Err(Error::Truncated { .. })));
    }
}
