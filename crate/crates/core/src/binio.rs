//! Little-endian helpers shared by the on-disk formats.

use std::io::{self, Read, Write};

use crate::error::{Error, Result};

pub(crate) fn write_u32<W: Write>(w: &mut W, v: u32) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

pub(crate) fn write_u64<W: Write>(w: &mut W, v: u64) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

pub(crate) fn write_f32s<W: Write>(w: &mut W, values: impl IntoIterator<Item = f32>) -> io::Result<()> {
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_u64<R: Read>(r: &mut R) -> io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub(crate) fn read_f32s<R: Read>(r: &mut R, n: usize) -> io::Result<Vec<f32>> {
    let mut bytes = vec![0u8; n * 4];
    r.read_exact(&mut bytes)?;
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

/// Read and check the 8-byte magic and the `u32` version that open every file.
pub(crate) fn read_preamble<R: Read>(r: &mut R, magic: [u8; 8], version: u32) -> Result<()> {
    let mut found = [0u8; 8];
    r.read_exact(&mut found)?;
    if found != magic {
        return Err(Error::BadMagic { expected: magic, found });
    }
    let v = read_u32(r)?;
    if v != version {
        return Err(Error::UnsupportedVersion {
            expected: version,
            found: v,
        });
    }
    Ok(())
}

pub(crate) fn write_preamble<W: Write>(w: &mut W, magic: [u8; 8], version: u32) -> io::Result<()> {
    w.write_all(&magic)?;
    write_u32(w, version)
}

/// Fail if anything is left after the last record.
pub(crate) fn expect_eof<R: Read>(r: &mut R) -> Result<()> {
    let mut probe = [0u8; 1];
    match r.read(&mut probe)? {
        0 => Ok(()),
        _ => Err(Error::Format("trailing bytes after payload".into())),
    }
}

/// 64-bit FNV-1a.
#[derive(Clone, Copy, Debug)]
pub struct Fnv64(u64);

impl Default for Fnv64 {
    fn default() -> Self {
        Fnv64(0xcbf2_9ce4_8422_2325)
    }
}

impl Fnv64 {
    pub fn update(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x0100_0000_01b3);
        }
    }

    pub fn finish(self) -> u64 {
        self.0
    }
}
