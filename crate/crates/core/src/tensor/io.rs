//! Binary tensor dump: `"COME"`, u32 version, u32 rank, u32 dims, f32
//! payload, all little-endian. A section file prefixes a list of named dumps
//! with `"COMS"`, u32 version and u32 section count; each section is a u32
//! name length, UTF-8 name bytes and one tensor dump.

use std::io::{Read, Write};

use super::DenseTensor;
use crate::error::{Error, Result};

pub const DUMP_VERSION: u32 = 1;
const TENSOR_MAGIC: &[u8; 4] = b"COME";
const SECTION_MAGIC: &[u8; 4] = b"COMS";

pub fn write_tensor<W: Write>(w: &mut W, t: &DenseTensor) -> Result<()> {
    w.write_all(TENSOR_MAGIC)?;
    w.write_all(&DUMP_VERSION.to_le_bytes())?;
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_tensor<R: Read>(r: &mut R) -> Result<DenseTensor> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != TENSOR_MAGIC {
        return Err(Error::Format(format!("bad tensor magic {magic:?}")));
    }
    check_version(read_u32(r)?)?;
    let rank = read_u32(r)? as usize;
    let shape = (0..rank).map(|_| read_u32(r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
    let n: usize = shape.iter().product();
    let mut bytes = vec![0u8; n * 4];
    r.read_exact(&mut bytes)?;
    let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    DenseTensor::new(shape, data)
}

pub fn write_sections<W: Write>(w: &mut W, sections: &[(&str, &DenseTensor)]) -> Result<()> {
    w.write_all(SECTION_MAGIC)?;
    w.write_all(&DUMP_VERSION.to_le_bytes())?;
    w.write_all(&(sections.len() as u32).to_le_bytes())?;
    for (name, t) in sections {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        write_tensor(w, t)?;
    }
    Ok(())
}

pub fn read_sections<R: Read>(r: &mut R) -> Result<Vec<(String, DenseTensor)>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != SECTION_MAGIC {
        return Err(Error::Format(format!("bad section magic {magic:?}")));
    }
    check_version(read_u32(r)?)?;
    let count = read_u32(r)?;
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let len = read_u32(r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| Error::Format(e.to_string()))?;
        out.push((name, read_tensor(r)?));
    }
    Ok(out)
}

fn check_version(v: u32) -> Result<()> {
    if v != DUMP_VERSION {
        return Err(Error::Format(format!("unsupported dump version {v}")));
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}
