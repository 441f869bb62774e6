//! Flat binary tensor records:
//!
//! ```text
//! "RDT1" | rank: u32 LE | extents: rank x u32 LE | payload: prod(extents) x f64 LE
//! ```

use std::io::Write;

use crate::error::{Error, Result};

pub const TENSOR_MAGIC: &[u8; 4] = b"RDT1";

const MAX_RANK: usize = 16;

#[derive(Clone, Debug, PartialEq)]
pub struct TensorRecord {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl TensorRecord {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if shape.iter().product::<usize>() != values.len() {
            return Err(Error::format(
                "tensor record",
                format!("shape {:?} does not hold {} values", shape, values.len()),
            ));
        }
        if shape.contains(&0) {
            return Err(Error::format("tensor record", "zero extent"));
        }
        Ok(TensorRecord { shape, values })
    }

    pub fn encoded_len(&self) -> usize {
        4 + 4 + 4 * self.shape.len() + 8 * self.values.len()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        write_tensor_record(&mut out, &self.shape, &self.values).expect("writing to a Vec cannot fail");
        out
    }

    /// Decodes one record from the front of `bytes`, returning it with the
    /// number of bytes consumed.
    pub fn decode(bytes: &[u8]) -> Result<(Self, usize)> {
        read_tensor_record(bytes)
    }
}

pub fn write_tensor_record<W: Write>(mut w: W, shape: &[usize], values: &[f64]) -> Result<()> {
    let rank = u32::try_from(shape.len()).map_err(|_| Error::format("tensor record", "rank overflow"))?;
    w.write_all(TENSOR_MAGIC)?;
    w.write_all(&rank.to_le_bytes())?;
    for &e in shape {
        let e = u32::try_from(e).map_err(|_| Error::format("tensor record", "extent overflow"))?;
        w.write_all(&e.to_le_bytes())?;
    }
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_tensor_record(bytes: &[u8]) -> Result<(TensorRecord, usize)> {
    let mut cursor = Cursor { bytes, pos: 0 };
    if cursor.take(4)? != TENSOR_MAGIC {
        return Err(Error::format("tensor record", "bad magic"));
    }
    let rank = cursor.u32()? as usize;
    if rank > MAX_RANK {
        return Err(Error::format("tensor record", format!("rank {rank} exceeds {MAX_RANK}")));
    }
    let mut shape = Vec::with_capacity(rank);
    let mut count: usize = 1;
    for _ in 0..rank {
        let e = cursor.u32()? as usize;
        if e == 0 {
            return Err(Error::format("tensor record", "zero extent"));
        }
        count = count
            .checked_mul(e)
            .ok_or_else(|| Error::format("tensor record", "element count overflow"))?;
        shape.push(e);
    }
    let payload_len = count
        .checked_mul(8)
        .ok_or_else(|| Error::format("tensor record", "payload size overflow"))?;
    let payload = cursor.take(payload_len)?;
    let values = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    Ok((TensorRecord { shape, values }, cursor.pos))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::format("tensor record", format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}
