//! Versioned little-endian binary blobs.

use std::io::{Cursor, Read};

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};

pub struct BlobWriter {
    buf: Vec<u8>,
}

impl BlobWriter {
    pub fn new(magic: &[u8; 8], version: u32) -> Self {
        let mut buf = magic.to_vec();
        buf.write_u32::<LE>(version).unwrap();
        Self { buf }
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.write_u64::<LE>(v).unwrap();
    }

    pub fn f64(&mut self, v: f64) {
        self.buf.write_f64::<LE>(v).unwrap();
    }

    pub fn str(&mut self, s: &str) {
        self.u64(s.len() as u64);
        self.buf.extend_from_slice(s.as_bytes());
    }

    pub fn f64s(&mut self, v: &[f64]) {
        self.u64(v.len() as u64);
        for &x in v {
            self.f64(x);
        }
    }

    pub fn bytes(&mut self, b: &[u8]) {
        self.u64(b.len() as u64);
        self.buf.extend_from_slice(b);
    }

    pub fn usizes(&mut self, v: &[usize]) {
        self.u64(v.len() as u64);
        for &x in v {
            self.u64(x as u64);
        }
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

pub struct BlobReader<'a> {
    cur: Cursor<&'a [u8]>,
}

fn truncated(e: std::io::Error) -> Error {
    Error::Checkpoint(format!("truncated: {e}"))
}

impl<'a> BlobReader<'a> {
    pub fn new(mut cur: Cursor<&'a [u8]>, magic: &[u8; 8], version: u32) -> Result<Self> {
        let mut m = [0u8; 8];
        cur.read_exact(&mut m).map_err(truncated)?;
        if &m != magic {
            return Err(Error::Checkpoint(format!(
                "magic {:?}, expected {:?}",
                String::from_utf8_lossy(&m),
                String::from_utf8_lossy(magic)
            )));
        }
        let v = cur.read_u32::<LE>().map_err(truncated)?;
        if v != version {
            return Err(Error::Checkpoint(format!("version {v}, expected {version}")));
        }
        Ok(Self { cur })
    }

    fn remaining(&self) -> usize {
        self.cur.get_ref().len() - self.cur.position() as usize
    }

    pub fn u8(&mut self) -> Result<u8> {
        self.cur.read_u8().map_err(truncated)
    }

    pub fn u64(&mut self) -> Result<u64> {
        self.cur.read_u64::<LE>().map_err(truncated)
    }

    pub fn f64(&mut self) -> Result<f64> {
        self.cur.read_f64::<LE>().map_err(truncated)
    }

    fn len(&mut self, elem: usize) -> Result<usize> {
        let n = self.u64()? as usize;
        if n.saturating_mul(elem) > self.remaining() {
            return Err(Error::Checkpoint(format!("length {n} exceeds remaining bytes")));
        }
        Ok(n)
    }

    pub fn str(&mut self) -> Result<String> {
        let n = self.len(1)?;
        let mut b = vec![0u8; n];
        self.cur.read_exact(&mut b).map_err(truncated)?;
        String::from_utf8(b).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.len(8)?;
        (0..n).map(|_| self.f64()).collect()
    }

    pub fn bytes(&mut self) -> Result<Vec<u8>> {
        let n = self.len(1)?;
        let mut b = vec![0u8; n];
        self.cur.read_exact(&mut b).map_err(truncated)?;
        Ok(b)
    }

    pub fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn usizes(&mut self) -> Result<Vec<usize>> {
        let n = self.len(8)?;
        (0..n).map(|_| self.usize()).collect()
    }

    pub fn expect_end(&self) -> Result<()> {
        match self.remaining() {
            0 => Ok(()),
            n => Err(Error::Checkpoint(format!("{n} trailing bytes"))),
        }
    }
}
