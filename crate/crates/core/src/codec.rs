//! Little-endian binary helpers shared by the tensor, dataset and checkpoint formats.

use std::io::Read;

use crate::error::{Error, Result};

/// A reader that tracks the byte offset so format errors can point at the
/// place where a file went wrong.
pub(crate) struct OffsetReader<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> OffsetReader<R> {
    pub fn new(inner: R) -> Self {
        Self { inner, offset: 0 }
    }

    pub fn offset(&self) -> u64 {
        self.offset
    }

    pub fn read_exact(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        let mut filled = 0;
        while filled < buf.len() {
            match self.inner.read(&mut buf[filled..]) {
                Ok(0) => {
                    return Err(Error::format(
                        self.offset + filled as u64,
                        format!("unexpected end of file while reading {what}"),
                    ))
                }
                Ok(n) => filled += n,
                Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
                Err(e) => return Err(e.into()),
            }
        }
        self.offset += buf.len() as u64;
        Ok(())
    }

    pub fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        let at = self.offset;
        let mut buf = [0u8; 4];
        self.read_exact(&mut buf, "magic")?;
        if &buf != expected {
            return Err(Error::format(
                at,
                format!(
                    "bad magic {:?}, expected {:?}",
                    String::from_utf8_lossy(&buf),
                    String::from_utf8_lossy(expected)
                ),
            ));
        }
        Ok(())
    }

    pub fn u32(&mut self, what: &str) -> Result<u32> {
        let mut buf = [0u8; 4];
        self.read_exact(&mut buf, what)?;
        Ok(u32::from_le_bytes(buf))
    }

    pub fn u64(&mut self, what: &str) -> Result<u64> {
        let mut buf = [0u8; 8];
        self.read_exact(&mut buf, what)?;
        Ok(u64::from_le_bytes(buf))
    }

    pub fn version(&mut self, expected: u32) -> Result<()> {
        let at = self.offset;
        let v = self.u32("version")?;
        if v != expected {
            return Err(Error::format(
                at,
                format!("unsupported version {v}, expected {expected}"),
            ));
        }
        Ok(())
    }

    pub fn f64s(&mut self, count: usize, what: &str) -> Result<Vec<f64>> {
        let mut bytes = vec![0u8; count * 8];
        self.read_exact(&mut bytes, what)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn f32s(&mut self, count: usize, what: &str) -> Result<Vec<f32>> {
        let mut bytes = vec![0u8; count * 4];
        self.read_exact(&mut bytes, what)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    /// Fails if any bytes remain.
    pub fn expect_eof(&mut self) -> Result<()> {
        let mut probe = [0u8; 1];
        loop {
            match self.inner.read(&mut probe) {
                Ok(0) => return Ok(()),
                Ok(_) => return Err(Error::format(self.offset, "trailing bytes after payload")),
                Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
                Err(e) => return Err(e.into()),
            }
        }
    }
}

pub(crate) fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::config(format!("{what} = {v} does not fit in u32")))
}
