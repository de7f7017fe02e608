//! Binary tensor fixtures: `"DST1"`, u8 rank, `rank` little-endian u32
//! dims, then row-major little-endian f32 values.

use std::io::{Read, Write};

use super::Tensor;
use crate::error::{Error, Result};

pub const FIXTURE_MAGIC: &[u8; 4] = b"DST1";

pub fn write_fixture<W: Write>(tensor: &Tensor<f32>, mut out: W) -> Result<()> {
    let rank = u8::try_from(tensor.rank())
        .map_err(|_| Error::Fixture(format!("rank {} exceeds 255", tensor.rank())))?;
    let mut buf = Vec::with_capacity(5 + 4 * tensor.rank() + 4 * tensor.numel());
    buf.extend_from_slice(FIXTURE_MAGIC);
    buf.push(rank);
    for &d in tensor.shape() {
        let d = u32::try_from(d).map_err(|_| Error::Fixture(format!("dimension {d} exceeds u32")))?;
        buf.extend_from_slice(&d.to_le_bytes());
    }
    for &v in tensor.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    out.write_all(&buf)
        .map_err(|e| Error::Fixture(format!("write failed: {e}")))
}

pub fn read_fixture<R: Read>(mut input: R) -> Result<Tensor<f32>> {
    let mut bytes = Vec::new();
    input
        .read_to_end(&mut bytes)
        .map_err(|e| Error::Fixture(format!("read failed: {e}")))?;
    if bytes.len() < 5 || &bytes[..4] != FIXTURE_MAGIC {
        return Err(Error::Fixture("bad magic".into()));
    }
    let rank = bytes[4] as usize;
    let header = 5 + 4 * rank;
    if bytes.len() < header {
        return Err(Error::Fixture("truncated shape".into()));
    }
    let shape: Vec<usize> = bytes[5..header]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    let numel: usize = shape.iter().product();
    let body = &bytes[header..];
    if body.len() != 4 * numel {
        return Err(Error::Fixture(format!(
            "expected {} data bytes for shape {shape:?}, found {}",
            4 * numel,
            body.len()
        )));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::new(shape, data).map_err(|e| Error::Fixture(e.to_string()))
}
