//! Binary tensor serialization.
//!
//! Layout, all little-endian: magic `MTNS`, u32 rank, u64 extent per axis,
//! u8 dtype code (0 = f32, 1 = f64, 2 = u8), then the raw payload.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Dtype, Scalar, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"MTNS";
const MAX_RANK: usize = 8;

/// A deserialized tensor of whichever dtype the file carried.
#[derive(Clone, Debug)]
pub enum Mtns {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
    U8(Vec<usize>, Vec<u8>),
}

impl Mtns {
    pub fn shape(&self) -> &[usize] {
        match self {
            Mtns::F32(t) => t.shape(),
            Mtns::F64(t) => t.shape(),
            Mtns::U8(shape, _) => shape,
        }
    }

    pub fn into_f32(self) -> Result<Tensor<f32>> {
        match self {
            Mtns::F32(t) => Ok(t),
            other => Err(Error::format("MTNS", format!("expected f32, got {}", other.dtype_name()))),
        }
    }

    pub fn into_f64(self) -> Result<Tensor<f64>> {
        match self {
            Mtns::F64(t) => Ok(t),
            other => Err(Error::format("MTNS", format!("expected f64, got {}", other.dtype_name()))),
        }
    }

    pub fn into_u8(self) -> Result<(Vec<usize>, Vec<u8>)> {
        match self {
            Mtns::U8(shape, data) => Ok((shape, data)),
            other => Err(Error::format("MTNS", format!("expected u8, got {}", other.dtype_name()))),
        }
    }

    fn dtype_name(&self) -> &'static str {
        match self {
            Mtns::F32(_) => "f32",
            Mtns::F64(_) => "f64",
            Mtns::U8(..) => "u8",
        }
    }
}

fn write_header<W: Write>(w: &mut W, shape: &[usize], code: u8) -> Result<()> {
    if shape.len() > MAX_RANK {
        return Err(Error::format("MTNS", format!("rank {} exceeds {MAX_RANK}", shape.len())));
    }
    w.write_all(MAGIC)?;
    w.write_all(&(shape.len() as u32).to_le_bytes())?;
    for &e in shape {
        w.write_all(&(e as u64).to_le_bytes())?;
    }
    w.write_all(&[code])?;
    Ok(())
}

/// Serialize a float tensor in its scalar type's native width.
pub fn write_tensor_to<T: Scalar, W: Write>(w: &mut W, t: &Tensor<T>) -> Result<()> {
    write_header(w, t.shape(), T::DTYPE.code())?;
    match T::DTYPE {
        Dtype::F32 => {
            for &v in t.data() {
                w.write_all(&(v.to_f64() as f32).to_le_bytes())?;
            }
        }
        Dtype::F64 => {
            for &v in t.data() {
                w.write_all(&v.to_f64().to_le_bytes())?;
            }
        }
        Dtype::U8 => unreachable!("float tensors only"),
    }
    Ok(())
}

pub fn write_u8_to<W: Write>(w: &mut W, shape: &[usize], data: &[u8]) -> Result<()> {
    let n: usize = shape.iter().product();
    if n != data.len() {
        return Err(Error::format(
            "MTNS",
            format!("shape {shape:?} wants {n} bytes, got {}", data.len()),
        ));
    }
    write_header(w, shape, Dtype::U8.code())?;
    w.write_all(data)?;
    Ok(())
}

pub fn read_from<R: Read>(r: &mut R) -> Result<Mtns> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::format("MTNS", format!("bad magic {magic:?}")));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let rank = u32::from_le_bytes(b4) as usize;
    if rank > MAX_RANK {
        return Err(Error::format("MTNS", format!("rank {rank} exceeds {MAX_RANK}")));
    }
    let mut shape = Vec::with_capacity(rank);
    let mut numel: usize = 1;
    for _ in 0..rank {
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8)?;
        let e = u64::from_le_bytes(b8);
        let e = usize::try_from(e)
            .map_err(|_| Error::format("MTNS", format!("extent {e} overflows usize")))?;
        numel = numel
            .checked_mul(e)
            .ok_or_else(|| Error::format("MTNS", "element count overflow".to_string()))?;
        shape.push(e);
    }
    let mut code = [0u8; 1];
    r.read_exact(&mut code)?;
    let dtype = Dtype::from_code(code[0])
        .map_err(|_| Error::format("MTNS", format!("unknown dtype code {}", code[0])))?;
    match dtype {
        Dtype::F32 => {
            let mut data = Vec::with_capacity(numel);
            let mut b = [0u8; 4];
            for _ in 0..numel {
                r.read_exact(&mut b)?;
                data.push(f32::from_le_bytes(b));
            }
            Ok(Mtns::F32(Tensor::from_vec(&shape, data)?))
        }
        Dtype::F64 => {
            let mut data = Vec::with_capacity(numel);
            let mut b = [0u8; 8];
            for _ in 0..numel {
                r.read_exact(&mut b)?;
                data.push(f64::from_le_bytes(b));
            }
            Ok(Mtns::F64(Tensor::from_vec(&shape, data)?))
        }
        Dtype::U8 => {
            let mut data = vec![0u8; numel];
            r.read_exact(&mut data)?;
            Ok(Mtns::U8(shape, data))
        }
    }
}

pub fn write_tensor<T: Scalar>(path: &Path, t: &Tensor<T>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_tensor_to(&mut w, t)?;
    w.flush()?;
    Ok(())
}

pub fn write_u8(path: &Path, shape: &[usize], data: &[u8]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_u8_to(&mut w, shape, data)?;
    w.flush()?;
    Ok(())
}

/// Read one tensor from a file, rejecting trailing bytes.
pub fn read(path: &Path) -> Result<Mtns> {
    let mut r = BufReader::new(File::open(path)?);
    let t = read_from(&mut r)?;
    let mut rest = [0u8; 1];
    match r.read(&mut rest)? {
        0 => Ok(t),
        _ => Err(Error::format("MTNS", "trailing bytes after payload".to_string())),
    }
}
