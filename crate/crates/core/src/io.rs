//! Binary tensor records, `.nvt` tensor files and PPM frame output.
//!
//! A tensor record is: name length `u16` + UTF-8 name, dtype `u8`
//! (0 = f32, 1 = f64), rank `u8`, dims as `u32`, then the raw payload.
//! All integers and scalars are little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use crate::tensor::DType;
use crate::{Float, NovaError, Result, Tensor};

fn dtype_code(d: DType) -> u8 {
    match d {
        DType::F32 => 0,
        DType::F64 => 1,
    }
}

fn format_err(msg: impl Into<String>) -> NovaError {
    NovaError::Format(msg.into())
}

/// Maps an unexpected end of file to a format error.
pub(crate) fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        ErrorKind::UnexpectedEof => format_err("file is truncated"),
        _ => NovaError::Io(e),
    })
}

pub(crate) fn read_u8(r: &mut impl Read) -> Result<u8> {
    let mut b = [0u8; 1];
    read_exact(r, &mut b)?;
    Ok(b[0])
}

pub(crate) fn read_u16(r: &mut impl Read) -> Result<u16> {
    let mut b = [0u8; 2];
    read_exact(r, &mut b)?;
    Ok(u16::from_le_bytes(b))
}

pub(crate) fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn write_record<T: Float>(w: &mut impl Write, name: &str, t: &Tensor<T>) -> Result<()> {
    let nb = name.as_bytes();
    let nlen = u16::try_from(nb.len()).map_err(|_| format_err(format!("tensor name too long: {name}")))?;
    let rank = u8::try_from(t.rank()).map_err(|_| format_err(format!("rank {} too large", t.rank())))?;
    w.write_all(&nlen.to_le_bytes())?;
    w.write_all(nb)?;
    w.write_all(&[dtype_code(T::DTYPE), rank])?;
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| format_err(format!("dimension {d} too large")))?;
        w.write_all(&d.to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(t.numel() * 8);
    for &v in t.data() {
        match T::DTYPE {
            DType::F32 => buf.extend_from_slice(&v.to_f32().unwrap().to_le_bytes()),
            DType::F64 => buf.extend_from_slice(&v.to_f64().unwrap().to_le_bytes()),
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

/// Reads one record, converting the payload to `T`.
pub fn read_record<T: Float>(r: &mut impl Read) -> Result<(String, Tensor<T>)> {
    let nlen = read_u16(r)? as usize;
    let mut nb = vec![0u8; nlen];
    read_exact(r, &mut nb)?;
    let name = String::from_utf8(nb).map_err(|_| format_err("tensor name is not UTF-8"))?;
    let dtype = read_u8(r)?;
    let rank = read_u8(r)? as usize;
    let shape: Vec<usize> = (0..rank).map(|_| read_u32(r).map(|d| d as usize)).collect::<Result<_>>()?;
    let n: usize = shape.iter().product();
    let data: Vec<T> = match dtype {
        0 => {
            let mut raw = vec![0u8; n * 4];
            read_exact(r, &mut raw)?;
            raw.chunks_exact(4)
                .map(|b| T::lit(f32::from_le_bytes(b.try_into().unwrap()) as f64))
                .collect()
        }
        1 => {
            let mut raw = vec![0u8; n * 8];
            read_exact(r, &mut raw)?;
            raw.chunks_exact(8)
                .map(|b| T::lit(f64::from_le_bytes(b.try_into().unwrap())))
                .collect()
        }
        other => return Err(format_err(format!("tensor {name}: unknown dtype code {other}"))),
    };
    Ok((name, Tensor::new(&shape, data)?))
}

/// Writes a single-record tensor file.
pub fn save_nvt<T: Float>(path: &Path, name: &str, t: &Tensor<T>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_record(&mut w, name, t)?;
    w.flush()?;
    Ok(())
}

pub fn load_nvt<T: Float>(path: &Path) -> Result<(String, Tensor<T>)> {
    let mut r = BufReader::new(File::open(path)?);
    let rec = read_record(&mut r)?;
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(format_err(format!("{}: trailing bytes after tensor", path.display())));
    }
    Ok(rec)
}

/// Binary PPM (P6, maxval 255) of an `[H × W × 3]` frame with values in
/// `[0, 1]`; each value is clamped and mapped to `round(255·x)`.
pub fn write_ppm<T: Float>(path: &Path, frame: &Tensor<T>) -> Result<()> {
    let [h, w, 3] = *frame.shape() else {
        return Err(NovaError::Shape(format!("PPM frame must be [H, W, 3], got {:?}", frame.shape())));
    };
    let mut out = BufWriter::new(File::create(path)?);
    write!(out, "P6\n{w} {h}\n255\n")?;
    let bytes: Vec<u8> = frame
        .data()
        .iter()
        .map(|v| (255.0 * v.to_f64().unwrap().clamp(0.0, 1.0)).round() as u8)
        .collect();
    out.write_all(&bytes)?;
    out.flush()?;
    Ok(())
}
