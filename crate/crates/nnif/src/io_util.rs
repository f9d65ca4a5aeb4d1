//! Little-endian byte plumbing shared by the binary artifact formats.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub(crate) fn write_u32(w: &mut impl Write, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

pub(crate) fn write_u64(w: &mut impl Write, v: u64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

pub(crate) fn write_f64(w: &mut impl Write, v: f64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

pub(crate) fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

pub(crate) fn read_u64(r: &mut impl Read) -> std::io::Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

pub(crate) fn read_f64(r: &mut impl Read) -> std::io::Result<f64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(f64::from_le_bytes(buf))
}

pub(crate) fn read_u8(r: &mut impl Read) -> std::io::Result<u8> {
    let mut buf = [0u8; 1];
    r.read_exact(&mut buf)?;
    Ok(buf[0])
}

/// Writes a length-prefixed UTF-8 string.
pub(crate) fn write_str(w: &mut impl Write, s: &str) -> std::io::Result<()> {
    write_u32(w, s.len() as u32)?;
    w.write_all(s.as_bytes())
}

/// Reads a length-prefixed UTF-8 string.
pub(crate) fn read_str(r: &mut impl Read, path: &Path) -> Result<String> {
    let len = read_u32(r).map_err(|e| Error::io(path, e))? as usize;
    if len > 1 << 20 {
        return Err(Error::format(path, format!("string length {len}")));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf).map_err(|e| Error::io(path, e))?;
    String::from_utf8(buf).map_err(|_| Error::format(path, "string is not UTF-8"))
}

/// Consumes and verifies an 8-byte magic prefix.
pub(crate) fn check_magic(r: &mut impl Read, expect: &[u8; 8], path: &Path) -> Result<()> {
    let mut got = [0u8; 8];
    r.read_exact(&mut got).map_err(|e| Error::io(path, e))?;
    if &got != expect {
        return Err(Error::format(
            path,
            format!(
                "bad magic: expected {:?}, got {:?}",
                String::from_utf8_lossy(expect),
                String::from_utf8_lossy(&got)
            ),
        ));
    }
    Ok(())
}
