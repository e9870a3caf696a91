//! Little-endian binary containers with a trailing CRC32.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nd::Tensor;

pub(crate) struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new(magic: &[u8; 4]) -> Self {
        Writer { buf: magic.to_vec() }
    }

    pub fn u32(&mut self, v: u32) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn f32(&mut self, v: f32) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn f64(&mut self, v: f64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    /// Length-prefixed UTF-8.
    pub fn str(&mut self, s: &str) -> Result<&mut Self> {
        self.u32(len_u32(s.len(), "string")?);
        self.buf.extend_from_slice(s.as_bytes());
        Ok(self)
    }

    pub fn finish(mut self) -> Vec<u8> {
        let crc = crc32fast::hash(&self.buf);
        self.buf.extend_from_slice(&crc.to_le_bytes());
        self.buf
    }
}

pub(crate) fn len_u32(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::invalid(format!("{what} length {n} exceeds u32")))
}

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    /// Validates magic and CRC trailer, positioning the cursor after the magic.
    pub fn open(bytes: &'a [u8], magic: &[u8; 4]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != magic {
            return Err(Error::Format {
                offset: 0,
                detail: format!("expected magic {:?}", String::from_utf8_lossy(magic)),
            });
        }
        if bytes.len() < 8 {
            return Err(Error::Format {
                offset: bytes.len(),
                detail: "truncated before CRC trailer".into(),
            });
        }
        let body = bytes.len() - 4;
        let stored = u32::from_le_bytes(bytes[body..].try_into().unwrap());
        let actual = crc32fast::hash(&bytes[..body]);
        if stored != actual {
            return Err(Error::Format {
                offset: body,
                detail: format!("CRC mismatch: stored {stored:08x}, computed {actual:08x}"),
            });
        }
        Ok(Reader {
            buf: &bytes[..body],
            pos: 4,
        })
    }

    pub fn offset(&self) -> usize {
        self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos,
                detail: format!("truncated: need {n} bytes, {} left", self.buf.len() - self.pos),
            });
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn str(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        let at = self.pos;
        let raw = self.take(len)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::Format {
            offset: at,
            detail: "invalid UTF-8".into(),
        })
    }

    pub fn expect_version(&mut self, supported: u32) -> Result<u32> {
        let at = self.pos;
        let v = self.u32()?;
        if v != supported {
            return Err(Error::Format {
                offset: at,
                detail: format!("unsupported version {v}"),
            });
        }
        Ok(v)
    }

    pub fn fail(&self, offset: usize, detail: impl Into<String>) -> Error {
        Error::Format {
            offset,
            detail: detail.into(),
        }
    }

    pub fn finish(self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Format {
                offset: self.pos,
                detail: format!("{} unexpected trailing bytes", self.buf.len() - self.pos),
            });
        }
        Ok(())
    }
}

/// Named-tensor container: magic, version, three shape words, entry count,
/// then `(name, rank, extents, f64 payload)` entries.
pub(crate) struct NamedTensors {
    pub version: u32,
    pub header: [u32; 3],
    pub entries: Vec<(String, Tensor)>,
}

pub(crate) fn encode_named(magic: &[u8; 4], doc: &NamedTensors) -> Result<Vec<u8>> {
    let mut w = Writer::new(magic);
    w.u32(doc.version);
    for h in doc.header {
        w.u32(h);
    }
    w.u32(len_u32(doc.entries.len(), "entry count")?);
    for (name, t) in &doc.entries {
        w.str(name)?;
        w.u32(len_u32(t.rank(), "rank")?);
        for &e in t.shape() {
            w.u32(len_u32(e, "extent")?);
        }
        for &v in t.data() {
            w.f64(v);
        }
    }
    Ok(w.finish())
}

pub(crate) fn decode_named(bytes: &[u8], magic: &[u8; 4], version: u32) -> Result<NamedTensors> {
    let mut r = Reader::open(bytes, magic)?;
    r.expect_version(version)?;
    let header = [r.u32()?, r.u32()?, r.u32()?];
    let count = r.u32()? as usize;
    let mut entries = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name = r.str()?;
        let rank = r.u32()? as usize;
        let at = r.offset();
        let shape = (0..rank).map(|_| r.u32().map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &e| acc.checked_mul(e))
            .ok_or_else(|| r.fail(at, "extent product overflows"))?;
        let mut data = Vec::with_capacity(n.min(1 << 24));
        for _ in 0..n {
            data.push(r.f64()?);
        }
        entries.push((name, Tensor::new(shape, data)?));
    }
    r.finish()?;
    Ok(NamedTensors {
        version,
        header,
        entries,
    })
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}
