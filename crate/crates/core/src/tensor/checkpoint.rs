//! Flat binary checkpoint archive.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   8 bytes  "RSAMCKPT"
//! version u32
//! count   u32
//! count x record:
//!     name_len u32, name (UTF-8)
//!     ndim u32, dims u64 x ndim
//!     data f32 x product(dims)
//! ```

use std::io::{self, Read, Write};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"RSAMCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

pub fn write_checkpoint<W: Write>(mut out: W, records: &[CheckpointRecord]) -> io::Result<()> {
    out.write_all(CHECKPOINT_MAGIC)?;
    out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    out.write_all(&(records.len() as u32).to_le_bytes())?;
    for r in records {
        let expected: usize = r.shape.iter().product();
        if expected != r.data.len() {
            return Err(io::Error::new(
                io::ErrorKind::InvalidInput,
                format!("record {}: {} values for shape {:?}", r.name, r.data.len(), r.shape),
            ));
        }
        out.write_all(&(r.name.len() as u32).to_le_bytes())?;
        out.write_all(r.name.as_bytes())?;
        out.write_all(&(r.shape.len() as u32).to_le_bytes())?;
        for &d in &r.shape {
            out.write_all(&(d as u64).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(r.data.len() * 4);
        for v in &r.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&buf)?;
    }
    out.flush()
}

fn read_u32<R: Read>(r: &mut R) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn invalid(msg: impl Into<String>) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, msg.into())
}

pub fn read_checkpoint<R: Read>(mut input: R) -> io::Result<Vec<CheckpointRecord>> {
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(invalid("not a checkpoint (bad magic)"));
    }
    let version = read_u32(&mut input)?;
    if version != CHECKPOINT_VERSION {
        return Err(invalid(format!("unsupported checkpoint version {version}")));
    }
    let count = read_u32(&mut input)? as usize;
    let mut records = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name_len = read_u32(&mut input)? as usize;
        let mut name = vec![0u8; name_len];
        input.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| invalid("record name is not UTF-8"))?;
        let ndim = read_u32(&mut input)? as usize;
        let shape = (0..ndim).map(|_| read_u64(&mut input).map(|d| d as usize)).collect::<io::Result<Vec<_>>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| invalid(format!("record {name}: shape overflow")))?;
        let mut bytes = vec![0u8; n * 4];
        input.read_exact(&mut bytes)?;
        let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        records.push(CheckpointRecord { name, shape, data });
    }
    Ok(records)
}
