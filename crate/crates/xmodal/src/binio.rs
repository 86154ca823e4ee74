//! Little-endian binary readers and writers shared by the on-disk formats.
//! The reader tracks its byte offset so format errors can say where.

use std::io::{Read, Write};

use crate::error::{Error, Result};

pub(crate) struct Reader<R: Read> {
    inner: R,
    path: String,
    offset: u64,
}

impl<R: Read> Reader<R> {
    pub fn new(inner: R, path: impl Into<String>) -> Self {
        Reader {
            inner,
            path: path.into(),
            offset: 0,
        }
    }

    pub fn fail<T>(&self, message: impl Into<String>) -> Result<T> {
        Err(Error::Format {
            path: self.path.clone(),
            offset: self.offset,
            message: message.into(),
        })
    }

    fn fill(&mut self, buf: &mut [u8]) -> Result<()> {
        match self.inner.read_exact(buf) {
            Ok(()) => {
                self.offset += buf.len() as u64;
                Ok(())
            }
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => {
                self.fail("unexpected end of file")
            }
            Err(e) => Err(e.into()),
        }
    }

    pub fn magic(&mut self, expect: &[u8]) -> Result<()> {
        let mut buf = vec![0u8; expect.len()];
        self.fill(&mut buf)?;
        if buf != expect {
            self.offset -= expect.len() as u64;
            return self.fail(format!(
                "bad magic: expected {:?}",
                String::from_utf8_lossy(expect)
            ));
        }
        Ok(())
    }

    pub fn u8(&mut self) -> Result<u8> {
        let mut b = [0u8; 1];
        self.fill(&mut b)?;
        Ok(b[0])
    }

    pub fn u16(&mut self) -> Result<u16> {
        let mut b = [0u8; 2];
        self.fill(&mut b)?;
        Ok(u16::from_le_bytes(b))
    }

    pub fn u32(&mut self) -> Result<u32> {
        let mut b = [0u8; 4];
        self.fill(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }

    pub fn u64(&mut self) -> Result<u64> {
        let mut b = [0u8; 8];
        self.fill(&mut b)?;
        Ok(u64::from_le_bytes(b))
    }

    pub fn f32(&mut self) -> Result<f32> {
        let mut b = [0u8; 4];
        self.fill(&mut b)?;
        Ok(f32::from_le_bytes(b))
    }

    pub fn f64(&mut self) -> Result<f64> {
        let mut b = [0u8; 8];
        self.fill(&mut b)?;
        Ok(f64::from_le_bytes(b))
    }

    pub fn f64_vec(&mut self, n: usize) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            out.push(self.f64()?);
        }
        Ok(out)
    }

    /// Length-prefixed UTF-8 string (u32 length, then bytes).
    pub fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        if len > 1 << 20 {
            return self.fail(format!("string length {len} is implausible"));
        }
        let mut buf = vec![0u8; len];
        self.fill(&mut buf)?;
        match String::from_utf8(buf) {
            Ok(s) => Ok(s),
            Err(_) => self.fail("invalid UTF-8 in string"),
        }
    }

    /// Errors if any input remains, catching truncated-write style corruption.
    pub fn expect_eof(&mut self) -> Result<()> {
        let mut b = [0u8; 1];
        match self.inner.read_exact(&mut b) {
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => Ok(()),
            Ok(()) => self.fail("trailing bytes after end of data"),
            Err(e) => Err(e.into()),
        }
    }
}

pub(crate) struct Writer<W: Write> {
    inner: W,
}

impl<W: Write> Writer<W> {
    pub fn new(inner: W) -> Self {
        Writer { inner }
    }

    pub fn bytes(&mut self, b: &[u8]) -> Result<()> {
        self.inner.write_all(b)?;
        Ok(())
    }

    pub fn u8(&mut self, v: u8) -> Result<()> {
        self.bytes(&[v])
    }

    pub fn u16(&mut self, v: u16) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    pub fn u32(&mut self, v: u32) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    pub fn u64(&mut self, v: u64) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    pub fn f32(&mut self, v: f32) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    pub fn f64(&mut self, v: f64) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    pub fn string(&mut self, s: &str) -> Result<()> {
        self.u32(s.len() as u32)?;
        self.bytes(s.as_bytes())
    }

    pub fn finish(mut self) -> Result<()> {
        self.inner.flush()?;
        Ok(())
    }
}
