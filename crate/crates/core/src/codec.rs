//! Little-endian framing shared by the BVD1, BVE1 and BVC1 formats.
//!
//! Every file is `magic (4) | u32 version | body | u32 CRC32`, where the CRC
//! covers every byte before the trailer.

use std::path::Path;

use crate::error::{Error, Result};

pub struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new(magic: &[u8; 4], version: u32) -> Self {
        let mut w = Writer {
            buf: Vec::with_capacity(1 << 16),
        };
        w.buf.extend_from_slice(magic);
        w.u32(version);
        w
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn bytes(&mut self, v: &[u8]) {
        self.buf.extend_from_slice(v);
    }

    pub fn f32s(&mut self, v: &[f32]) {
        self.buf.reserve(v.len() * 4);
        for x in v {
            self.buf.extend_from_slice(&x.to_le_bytes());
        }
    }

    pub fn finish(mut self) -> Vec<u8> {
        let crc = crc32fast::hash(&self.buf);
        self.buf.extend_from_slice(&crc.to_le_bytes());
        self.buf
    }
}

pub struct Reader<'a> {
    body: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    /// Validate magic and version, then return a reader positioned after
    /// them. The checksum is verified separately by [`Reader::finish`] so that
    /// truncation is reported as such rather than as a CRC failure.
    pub fn open(bytes: &'a [u8], magic: &[u8; 4], version: u32) -> Result<Self> {
        if bytes.len() < 4 {
            return Err(Error::Truncated("magic"));
        }
        let found: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
        if &found != magic {
            return Err(Error::BadMagic {
                expected: *magic,
                found,
            });
        }
        let mut r = Reader { body: bytes, pos: 4 };
        let v = r.u32("version")?;
        if v != version {
            return Err(Error::BadVersion {
                expected: version,
                found: v,
            });
        }
        Ok(r)
    }

    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        // the last 4 bytes are always the CRC trailer
        let end = self.pos.checked_add(n).ok_or(Error::Truncated(what))?;
        if end + 4 > self.body.len() {
            return Err(Error::Truncated(what));
        }
        let s = &self.body[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub fn u8(&mut self, what: &'static str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    pub fn u16(&mut self, what: &'static str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    pub fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    pub fn bytes(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        self.take(n, what)
    }

    pub fn f32s(&mut self, n: usize, what: &'static str) -> Result<Vec<f32>> {
        let len = n.checked_mul(4).ok_or(Error::Truncated(what))?;
        let raw = self.take(len, what)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }

    /// Require that exactly the CRC trailer remains and that it matches.
    pub fn finish(self) -> Result<()> {
        let rest = self.body.len() - self.pos;
        if rest < 4 {
            return Err(Error::Truncated("checksum"));
        }
        if rest > 4 {
            return Err(Error::Malformed(format!("{} unexpected trailing bytes", rest - 4)));
        }
        let stored = u32::from_le_bytes(self.body[self.pos..].try_into().expect("4 bytes"));
        let computed = crc32fast::hash(&self.body[..self.pos]);
        if stored != computed {
            return Err(Error::Checksum { stored, computed });
        }
        Ok(())
    }
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// CRC32 of a float vector's little-endian bytes; used as a compact
/// provenance fingerprint.
pub fn crc_f32(values: &[f32]) -> u32 {
    let mut h = crc32fast::Hasher::new();
    for v in values {
        h.update(&v.to_le_bytes());
    }
    h.finalize()
}
