//! MRS1 sample files.
//!
//! ```text
//! magic "MRS1" | version u16 | K u16
//! K × { bands u32 | H u32 | W u32 | bands·H·W × f32 }   band-major, row-major
//! C u32 | C × u8 (0 or 1)
//! ```
//! All integers and reals are little-endian.

use std::fs;
use std::path::Path;

use super::Sample;
use crate::error::{Error, FormatError, Result};
use crate::tensor::Tensor;

pub const SAMPLE_MAGIC: [u8; 4] = *b"MRS1";
pub const SAMPLE_VERSION: u16 = 1;

pub fn encode_sample(sample: &Sample) -> Vec<u8> {
    let values: usize = sample.subsets.iter().map(Tensor::len).sum();
    let mut out = Vec::with_capacity(8 + 12 * sample.subsets.len() + 4 * values + 4 + sample.labels.len());
    out.extend_from_slice(&SAMPLE_MAGIC);
    out.extend_from_slice(&SAMPLE_VERSION.to_le_bytes());
    out.extend_from_slice(&(sample.subsets.len() as u16).to_le_bytes());
    for t in &sample.subsets {
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.extend_from_slice(&(sample.labels.len() as u32).to_le_bytes());
    out.extend_from_slice(&sample.labels);
    out
}

/// Little-endian cursor that reports which field ran out of bytes.
pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], FormatError> {
        let end = self.pos.checked_add(n).ok_or(FormatError::Truncated(what))?;
        if end > self.buf.len() {
            return Err(FormatError::Truncated(what));
        }
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub(crate) fn magic(&mut self, expected: [u8; 4]) -> Result<(), FormatError> {
        let found: [u8; 4] = self.take(4, "magic")?.try_into().unwrap();
        if found != expected {
            return Err(FormatError::BadMagic { expected, found });
        }
        Ok(())
    }

    pub(crate) fn u8(&mut self, what: &'static str) -> Result<u8, FormatError> {
        Ok(self.take(1, what)?[0])
    }

    pub(crate) fn u16(&mut self, what: &'static str) -> Result<u16, FormatError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    pub(crate) fn u32(&mut self, what: &'static str) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    pub(crate) fn f32s(&mut self, n: usize, what: &'static str) -> Result<Vec<f32>, FormatError> {
        let bytes = self.take(n.checked_mul(4).ok_or(FormatError::Truncated(what))?, what)?;
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }

    pub(crate) fn finish(&self) -> Result<(), FormatError> {
        match self.buf.len() - self.pos {
            0 => Ok(()),
            n => Err(FormatError::TrailingBytes(n)),
        }
    }
}

pub fn decode_sample(bytes: &[u8], id: &str) -> Result<Sample, FormatError> {
    let mut r = Reader::new(bytes);
    r.magic(SAMPLE_MAGIC)?;
    let version = r.u16("version")?;
    if version != SAMPLE_VERSION {
        return Err(FormatError::UnsupportedVersion(version));
    }
    let k = r.u16("subset count")? as usize;
    let mut subsets = Vec::with_capacity(k);
    for _ in 0..k {
        let c = r.u32("band count")? as usize;
        let h = r.u32("height")? as usize;
        let w = r.u32("width")? as usize;
        let n = c
            .checked_mul(h)
            .and_then(|v| v.checked_mul(w))
            .ok_or_else(|| FormatError::Invalid(format!("subset size {c}x{h}x{w} overflows")))?;
        let data = r.f32s(n, "band values")?;
        subsets.push(Tensor::new([c, h, w], data).expect("shape matches length"));
    }
    let c = r.u32("class count")? as usize;
    let labels = r.take(c, "labels")?.to_vec();
    if let Some(bad) = labels.iter().find(|&&v| v > 1) {
        return Err(FormatError::Invalid(format!("label byte {bad} is not 0 or 1")));
    }
    r.finish()?;
    Ok(Sample { id: id.to_string(), subsets, labels })
}

pub fn write_sample(path: &Path, sample: &Sample) -> Result<()> {
    fs::write(path, encode_sample(sample)).map_err(|e| Error::io(path, e))
}

/// Reads a sample; its id is the file stem.
pub fn read_sample(path: &Path) -> Result<Sample> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let id = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
    decode_sample(&bytes, id).map_err(|source| Error::Format { path: path.to_path_buf(), source })
}
