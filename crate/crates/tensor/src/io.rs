//! FDTN tensor file format.
//!
//! Layout: magic `FDTN`, version byte 0x01, dtype byte (0x00 = f32 LE,
//! 0x01 = f64 LE), u32 LE rank, rank x u64 LE dims, row-major payload.
//! Readers reject unknown magic, versions, and dtypes.

use std::fmt;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::scalar::{Dtype, Scalar};
use crate::tensor::Tensor;

pub const FDTN_MAGIC: [u8; 4] = *b"FDTN";
pub const FDTN_VERSION: u8 = 0x01;

#[derive(Debug)]
pub enum FdtnError {
    BadMagic([u8; 4]),
    BadVersion(u8),
    BadDtype(u8),
    /// File holds a different element type than the caller asked for.
    DtypeMismatch {
        expected: Dtype,
        found: Dtype,
    },
    BadShape(String),
    Io(io::Error),
}

impl fmt::Display for FdtnError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FdtnError::BadMagic(m) => write!(f, "not an FDTN file (magic {m:?})"),
            FdtnError::BadVersion(v) => write!(f, "unsupported FDTN version {v:#04x}"),
            FdtnError::BadDtype(d) => write!(f, "unknown FDTN dtype byte {d:#04x}"),
            FdtnError::DtypeMismatch { expected, found } => {
                write!(
                    f,
                    "FDTN dtype mismatch: expected {expected}, file holds {found}"
                )
            }
            FdtnError::BadShape(s) => write!(f, "bad FDTN shape: {s}"),
            FdtnError::Io(e) => write!(f, "FDTN i/o error: {e}"),
        }
    }
}

impl std::error::Error for FdtnError {}

impl From<io::Error> for FdtnError {
    fn from(e: io::Error) -> Self {
        FdtnError::Io(e)
    }
}

pub fn write_tensor<E: Scalar, W: Write>(mut w: W, t: &Tensor<E>) -> Result<(), FdtnError> {
    w.write_all(&FDTN_MAGIC)?;
    w.write_all(&[FDTN_VERSION, E::DTYPE.byte()])?;
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    match E::DTYPE {
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
    }
    Ok(())
}

pub fn read_tensor<E: Scalar, R: Read>(mut r: R) -> Result<Tensor<E>, FdtnError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic != FDTN_MAGIC {
        return Err(FdtnError::BadMagic(magic));
    }
    let mut head = [0u8; 2];
    r.read_exact(&mut head)?;
    if head[0] != FDTN_VERSION {
        return Err(FdtnError::BadVersion(head[0]));
    }
    let dtype = Dtype::from_byte(head[1]).ok_or(FdtnError::BadDtype(head[1]))?;
    if dtype != E::DTYPE {
        return Err(FdtnError::DtypeMismatch {
            expected: E::DTYPE,
            found: dtype,
        });
    }
    let mut rank_bytes = [0u8; 4];
    r.read_exact(&mut rank_bytes)?;
    let rank = u32::from_le_bytes(rank_bytes) as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut dim = [0u8; 8];
        r.read_exact(&mut dim)?;
        let d = u64::from_le_bytes(dim);
        if d == 0 {
            return Err(FdtnError::BadShape("zero-sized dimension".into()));
        }
        shape.push(d as usize);
    }
    let numel: usize = shape.iter().product();
    let mut data = Vec::with_capacity(numel);
    match dtype {
        Dtype::F32 => {
            let mut buf = [0u8; 4];
            for _ in 0..numel {
                r.read_exact(&mut buf)?;
                data.push(E::from_f64(f32::from_le_bytes(buf) as f64));
            }
        }
        Dtype::F64 => {
            let mut buf = [0u8; 8];
            for _ in 0..numel {
                r.read_exact(&mut buf)?;
                data.push(E::from_f64(f64::from_le_bytes(buf)));
            }
        }
    }
    // strict: no trailing bytes
    let mut extra = [0u8; 1];
    match r.read(&mut extra)? {
        0 => {}
        _ => return Err(FdtnError::BadShape("trailing bytes after payload".into())),
    }
    Tensor::from_vec(shape, data).map_err(|e| FdtnError::BadShape(e.to_string()))
}

pub fn save_tensor<E: Scalar>(path: &Path, t: &Tensor<E>) -> Result<(), FdtnError> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    write_tensor(&mut w, t)?;
    w.flush()?;
    Ok(())
}

pub fn load_tensor<E: Scalar>(path: &Path) -> Result<Tensor<E>, FdtnError> {
    let file = File::open(path)?;
    read_tensor(BufReader::new(file))
}
