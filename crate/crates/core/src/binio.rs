//! Little-endian framing helpers shared by the dataset and checkpoint formats.

use std::path::Path;

use crate::error::{Error, Result};

pub const VERSION: u32 = 1;

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
    context: String,
}

impl<'a> ByteReader<'a> {
    pub fn new(buf: &'a [u8], context: impl Into<String>) -> Self {
        Self {
            buf,
            pos: 0,
            context: context.into(),
        }
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::Truncated(format!(
                "{}: {what} needs {n} bytes at offset {}, {} left",
                self.context,
                self.pos,
                self.remaining()
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    pub fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    pub fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    pub fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| self.overflow(what))?, what)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn overflow(&self, what: &str) -> Error {
        Error::Truncated(format!("{}: {what} length overflows", self.context))
    }

    /// Checks the 4-byte magic and the version word that follows it.
    pub fn header(&mut self, magic: &[u8; 4]) -> Result<()> {
        let found = self.take(4, "magic").map_err(|_| Error::BadMagic {
            expected: String::from_utf8_lossy(magic).into_owned(),
            found: String::from_utf8_lossy(self.buf).into_owned(),
        })?;
        if found != magic {
            return Err(Error::BadMagic {
                expected: String::from_utf8_lossy(magic).into_owned(),
                found: String::from_utf8_lossy(found).into_owned(),
            });
        }
        let version = self.u32("version")?;
        if version != VERSION {
            return Err(Error::VersionMismatch {
                expected: VERSION,
                found: version,
            });
        }
        Ok(())
    }
}

pub(crate) fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn put_f32s(out: &mut Vec<u8>, vs: impl IntoIterator<Item = f32>) {
    for v in vs {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub const MATRIX_MAGIC: &[u8; 4] = b"GQEX";
pub const PATCH_MAGIC: &[u8; 4] = b"GQPX";

/// Encodes a row-major `rows x cols` f32 matrix in the `GQEX` framing.
pub fn encode_matrix(rows: usize, cols: usize, values: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + values.len() * 4);
    out.extend_from_slice(MATRIX_MAGIC);
    put_u32(&mut out, VERSION);
    put_u32(&mut out, rows as u32);
    put_u32(&mut out, cols as u32);
    put_f32s(&mut out, values.iter().copied());
    out
}

pub fn decode_matrix(bytes: &[u8], context: &str) -> Result<(usize, usize, Vec<f32>)> {
    let mut r = ByteReader::new(bytes, context);
    r.header(MATRIX_MAGIC)?;
    let rows = r.u32("rows")? as usize;
    let cols = r.u32("cols")? as usize;
    let values = r.f32s(rows * cols, "matrix values")?;
    if r.remaining() != 0 {
        return Err(Error::data(context, format!("{} trailing bytes", r.remaining())));
    }
    Ok((rows, cols, values))
}

pub fn read_matrix(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    decode_matrix(&read_file(path)?, &path.display().to_string())
}

pub fn write_matrix(path: &Path, rows: usize, cols: usize, values: &[f32]) -> Result<()> {
    write_file(path, &encode_matrix(rows, cols, values))
}

/// Patch stack: `count` images of `h x w x 3` bytes.
pub fn encode_patches(h: usize, w: usize, patches: &[Vec<u8>]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(PATCH_MAGIC);
    put_u32(&mut out, VERSION);
    put_u32(&mut out, patches.len() as u32);
    put_u32(&mut out, h as u32);
    put_u32(&mut out, w as u32);
    put_u32(&mut out, 3);
    for p in patches {
        out.extend_from_slice(p);
    }
    out
}

pub fn decode_patches(bytes: &[u8], context: &str) -> Result<(usize, usize, Vec<Vec<u8>>)> {
    let mut r = ByteReader::new(bytes, context);
    r.header(PATCH_MAGIC)?;
    let count = r.u32("count")? as usize;
    let h = r.u32("height")? as usize;
    let w = r.u32("width")? as usize;
    let channels = r.u32("channels")? as usize;
    if channels != 3 {
        return Err(Error::data(context, format!("expected 3 channels, found {channels}")));
    }
    let size = h * w * 3;
    let patches = (0..count)
        .map(|i| r.take(size, &format!("patch {i}")).map(<[u8]>::to_vec))
        .collect::<Result<Vec<_>>>()?;
    if r.remaining() != 0 {
        return Err(Error::data(context, format!("{} trailing bytes", r.remaining())));
    }
    Ok((h, w, patches))
}
