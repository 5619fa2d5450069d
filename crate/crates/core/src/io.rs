//! File helpers shared by the binary formats: atomic writes and a
//! little-endian reader that reports byte offsets in its errors.

use std::fs;
use std::io::{self, Read, Seek, SeekFrom, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Writes `bytes` to a temporary sibling and renames it over `path`, so
/// readers never observe a partially written file.
pub fn write_atomic(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::Input(format!("not a file path: {}", path.display())))?;
    let mut tmp_name = file_name.to_os_string();
    tmp_name.push(format!(".tmp-{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}

/// Appends little-endian primitives to a byte buffer.
#[derive(Default)]
pub struct ByteWriter {
    pub buf: Vec<u8>,
}

impl ByteWriter {
    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn i32(&mut self, v: i32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f32s(&mut self, vs: &[f32]) {
        for v in vs {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    /// Length-prefixed UTF-8 string.
    pub fn string(&mut self, s: &str) -> Result<()> {
        self.u32(len_u32(s.len())?);
        self.bytes(s.as_bytes());
        Ok(())
    }
}

pub fn len_u32(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Input(format!("length {n} does not fit in u32")))
}

/// Sequential little-endian reader that tracks its offset.
pub struct ByteReader<R> {
    inner: R,
    offset: u64,
    what: &'static str,
}

impl<R: Read + Seek> ByteReader<R> {
    pub fn new(inner: R, what: &'static str) -> Self {
        ByteReader { inner, offset: 0, what }
    }

    pub fn offset(&self) -> u64 {
        self.offset
    }

    pub fn error(&self, detail: impl Into<String>) -> Error {
        Error::Format {
            what: self.what,
            offset: self.offset,
            detail: detail.into(),
        }
    }

    pub fn exact(&mut self, n: usize, field: &str) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.fill(&mut buf, field)?;
        Ok(buf)
    }

    fn fill(&mut self, buf: &mut [u8], field: &str) -> Result<()> {
        match self.inner.read_exact(buf) {
            Ok(()) => {
                self.offset += buf.len() as u64;
                Ok(())
            }
            Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => {
                Err(self.error(format!("truncated while reading {field}")))
            }
            Err(e) => Err(self.error(format!("read error in {field}: {e}"))),
        }
    }

    pub fn u32(&mut self, field: &str) -> Result<u32> {
        let mut b = [0u8; 4];
        self.fill(&mut b, field)?;
        Ok(u32::from_le_bytes(b))
    }

    pub fn i32(&mut self, field: &str) -> Result<i32> {
        let mut b = [0u8; 4];
        self.fill(&mut b, field)?;
        Ok(i32::from_le_bytes(b))
    }

    pub fn f32s(&mut self, n: usize, field: &str) -> Result<Vec<f32>> {
        let bytes = n
            .checked_mul(4)
            .ok_or_else(|| self.error(format!("{field}: element count overflows")))?;
        let raw = self.exact(bytes, field)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    pub fn string(&mut self, field: &str) -> Result<String> {
        let len = self.u32(field)? as usize;
        let start = self.offset;
        let raw = self.exact(len, field)?;
        String::from_utf8(raw).map_err(|_| Error::Format {
            what: self.what,
            offset: start,
            detail: format!("{field} is not valid UTF-8"),
        })
    }

    /// Skips `n` bytes without reading them, failing if that passes the end.
    pub fn skip(&mut self, n: u64, field: &str) -> Result<()> {
        let here = self
            .inner
            .stream_position()
            .map_err(|e| self.error(format!("seek error: {e}")))?;
        let end = self
            .inner
            .seek(SeekFrom::End(0))
            .map_err(|e| self.error(format!("seek error: {e}")))?;
        if here + n > end {
            return Err(self.error(format!("truncated while skipping {field}")));
        }
        self.inner
            .seek(SeekFrom::Start(here + n))
            .map_err(|e| self.error(format!("seek error: {e}")))?;
        self.offset += n;
        Ok(())
    }

    /// Fails unless the input is exhausted.
    pub fn expect_end(&mut self) -> Result<()> {
        let mut b = [0u8; 1];
        match self.inner.read(&mut b) {
            Ok(0) => Ok(()),
            Ok(_) => Err(self.error("trailing bytes after the last record")),
            Err(e) => Err(self.error(format!("read error: {e}"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    #[test]
    fn round_trip_and_offsets() {
        let mut w = ByteWriter::default();
        w.u32(7);
        w.i32(-1);
        w.string("hé").unwrap();
        w.f32s(&[1.5, -0.0]);
        let mut r = ByteReader::new(Cursor::new(w.buf.clone()), "test");
        assert_eq!(r.u32("a").unwrap(), 7);
        assert_eq!(r.i32("b").unwrap(), -1);
        assert_eq!(r.string("c").unwrap(), "hé");
        let f = r.f32s(2, "d").unwrap();
        assert_eq!(f[1].to_bits(), (-0.0f32).to_bits());
        r.expect_end().unwrap();
        let mut r = ByteReader::new(Cursor::new(w.buf[..6].to_vec()), "test");
        r.u32("a").unwrap();
        match r.i32("b") {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 4),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn atomic_write_replaces_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub").join("f.bin");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"two");
        assert_eq!(fs::read_dir(p.parent().unwrap()).unwrap().count(), 1);
    }
}
