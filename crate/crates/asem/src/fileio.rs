//! Little-endian binary file helpers with byte-offset error reporting.

use crate::error::{Error, Result};
use std::io::{Read, Write};

pub(crate) struct TrackedReader<R: Read> {
    inner: R,
    file: String,
    pub offset: u64,
}

impl<R: Read> TrackedReader<R> {
    pub fn new(inner: R, file: impl Into<String>) -> Self {
        TrackedReader {
            inner,
            file: file.into(),
            offset: 0,
        }
    }

    pub fn malformed(&self, msg: impl Into<String>) -> Error {
        Error::MalformedFile {
            file: self.file.clone(),
            offset: self.offset,
            msg: msg.into(),
        }
    }

    pub fn read_exact(&mut self, buf: &mut [u8]) -> Result<()> {
        match self.inner.read_exact(buf) {
            Ok(()) => {
                self.offset += buf.len() as u64;
                Ok(())
            }
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => {
                Err(self.malformed("unexpected end of file"))
            }
            Err(e) => Err(Error::io(format!("reading {}", self.file), e)),
        }
    }

    pub fn read_u8(&mut self) -> Result<u8> {
        let mut b = [0u8; 1];
        self.read_exact(&mut b)?;
        Ok(b[0])
    }

    pub fn read_u32(&mut self) -> Result<u32> {
        let mut b = [0u8; 4];
        self.read_exact(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }

    pub fn read_f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let mut bytes = vec![0u8; n * 4];
        self.read_exact(&mut bytes)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    /// u32 length-prefixed UTF-8 string.
    pub fn read_string(&mut self, what: &str) -> Result<String> {
        let len = self.read_u32()? as usize;
        if len > 1 << 24 {
            return Err(self.malformed(format!("implausible {what} length {len}")));
        }
        let mut bytes = vec![0u8; len];
        self.read_exact(&mut bytes)?;
        String::from_utf8(bytes).map_err(|_| self.malformed(format!("{what} is not valid UTF-8")))
    }

    /// Errors unless the stream is exactly exhausted.
    pub fn expect_eof(&mut self) -> Result<()> {
        let mut b = [0u8; 1];
        match self.inner.read(&mut b) {
            Ok(0) => Ok(()),
            Ok(_) => Err(self.malformed("trailing bytes after final record")),
            Err(e) => Err(Error::io(format!("reading {}", self.file), e)),
        }
    }
}

pub(crate) fn write_u32<W: Write>(w: &mut W, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

pub(crate) fn write_string<W: Write>(w: &mut W, s: &str) -> std::io::Result<()> {
    write_u32(w, s.len() as u32)?;
    w.write_all(s.as_bytes())
}

pub(crate) fn write_f32s<W: Write>(w: &mut W, data: &[f64]) -> std::io::Result<()> {
    let mut bytes = Vec::with_capacity(data.len() * 4);
    for &v in data {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    w.write_all(&bytes)
}
