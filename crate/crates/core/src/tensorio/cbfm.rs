//! The CBFM binary format.
//!
//! Version 1 holds a single matrix:
//!
//! ```text
//! "CBFM" | version: u32 = 1 | rows: u64 | cols: u64 | rows*cols f32
//! ```
//!
//! Version 2 is a container of named, typed sections (used for SAE state and
//! sparse codes):
//!
//! ```text
//! "CBFM" | version: u32 = 2 | section_count: u32 | section*
//! section := name_len: u32 | name (utf-8) | dtype: u8 | rows: u64 | cols: u64 | payload
//! ```
//!
//! All integers and floats are little-endian.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensorio::FeatureMatrix;

pub const MAGIC: &[u8; 4] = b"CBFM";
pub const MATRIX_VERSION: u32 = 1;
pub const CONTAINER_VERSION: u32 = 2;
const MATRIX_HEADER_LEN: usize = 4 + 4 + 8 + 8;

pub fn write_feature_matrix(matrix: &FeatureMatrix, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    matrix.validate_finite()?;
    let bytes = encode_feature_matrix(matrix);
    write_bytes(path, &bytes)
}

pub fn encode_feature_matrix(matrix: &FeatureMatrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(MATRIX_HEADER_LEN + matrix.data().len() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&MATRIX_VERSION.to_le_bytes());
    out.extend_from_slice(&(matrix.rows() as u64).to_le_bytes());
    out.extend_from_slice(&(matrix.cols() as u64).to_le_bytes());
    for v in matrix.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn read_feature_matrix(path: impl AsRef<Path>) -> Result<FeatureMatrix> {
    let path = path.as_ref();
    let bytes = read_bytes(path)?;
    decode_feature_matrix(&bytes, path)
}

pub fn decode_feature_matrix(bytes: &[u8], path: &Path) -> Result<FeatureMatrix> {
    let mut cur = Cursor::new(bytes, path);
    cur.magic()?;
    let version = cur.u32()?;
    if version != MATRIX_VERSION {
        return Err(Error::Format(format!(
            "{}: expected a plain feature matrix (version {MATRIX_VERSION}), found version {version}",
            path.display()
        )));
    }
    let rows = cur.u64()?;
    let cols = cur.u64()?;
    let count = rows
        .checked_mul(cols)
        .ok_or_else(|| Error::Format(format!("{}: {rows}x{cols} overflows", path.display())))?;
    let payload = cur.take_exact(count, 4)?;
    cur.finish()?;
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let matrix = FeatureMatrix::new(rows as usize, cols as usize, data)?;
    matrix.validate_finite()?;
    Ok(matrix)
}

/// Typed payload of a container section.
#[derive(Debug, Clone, PartialEq)]
pub enum SectionData {
    F32 { rows: usize, cols: usize, data: Vec<f32> },
    F64 { rows: usize, cols: usize, data: Vec<f64> },
    U32 { rows: usize, cols: usize, data: Vec<u32> },
    U64 { rows: usize, cols: usize, data: Vec<u64> },
    Bytes(Vec<u8>),
}

impl SectionData {
    fn dtype(&self) -> u8 {
        match self {
            SectionData::F32 { .. } => 0,
            SectionData::F64 { .. } => 1,
            SectionData::U32 { .. } => 2,
            SectionData::U64 { .. } => 3,
            SectionData::Bytes(_) => 4,
        }
    }

    fn shape(&self) -> (usize, usize) {
        match self {
            SectionData::F32 { rows, cols, .. }
            | SectionData::F64 { rows, cols, .. }
            | SectionData::U32 { rows, cols, .. }
            | SectionData::U64 { rows, cols, .. } => (*rows, *cols),
            SectionData::Bytes(b) => (b.len(), 1),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Section {
    pub name: String,
    pub data: SectionData,
}

/// An ordered set of named sections.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Container {
    pub sections: Vec<Section>,
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, data: SectionData) {
        self.sections.push(Section {
            name: name.into(),
            data,
        });
    }

    pub fn get(&self, name: &str) -> Option<&SectionData> {
        self.sections
            .iter()
            .find(|s| s.name == name)
            .map(|s| &s.data)
    }

    fn require(&self, name: &str) -> Result<&SectionData> {
        self.get(name)
            .ok_or_else(|| Error::Format(format!("missing section `{name}`")))
    }

    pub fn f64_matrix(&self, name: &str) -> Result<(usize, usize, &[f64])> {
        match self.require(name)? {
            SectionData::F64 { rows, cols, data } => Ok((*rows, *cols, data)),
            _ => Err(Error::Format(format!("section `{name}` is not f64"))),
        }
    }

    pub fn u32_vec(&self, name: &str) -> Result<&[u32]> {
        match self.require(name)? {
            SectionData::U32 { data, .. } => Ok(data),
            _ => Err(Error::Format(format!("section `{name}` is not u32"))),
        }
    }

    pub fn u64_vec(&self, name: &str) -> Result<&[u64]> {
        match self.require(name)? {
            SectionData::U64 { data, .. } => Ok(data),
            _ => Err(Error::Format(format!("section `{name}` is not u64"))),
        }
    }

    pub fn bytes(&self, name: &str) -> Result<&[u8]> {
        match self.require(name)? {
            SectionData::Bytes(b) => Ok(b),
            _ => Err(Error::Format(format!("section `{name}` is not a byte blob"))),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.sections.len() as u32).to_le_bytes());
        for s in &self.sections {
            out.extend_from_slice(&(s.name.len() as u32).to_le_bytes());
            out.extend_from_slice(s.name.as_bytes());
            out.push(s.data.dtype());
            let (rows, cols) = s.data.shape();
            out.extend_from_slice(&(rows as u64).to_le_bytes());
            out.extend_from_slice(&(cols as u64).to_le_bytes());
            match &s.data {
                SectionData::F32 { data, .. } => {
                    data.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()))
                }
                SectionData::F64 { data, .. } => {
                    data.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()))
                }
                SectionData::U32 { data, .. } => {
                    data.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()))
                }
                SectionData::U64 { data, .. } => {
                    data.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()))
                }
                SectionData::Bytes(b) => out.extend_from_slice(b),
            }
        }
        out
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut cur = Cursor::new(bytes, path);
        cur.magic()?;
        let version = cur.u32()?;
        if version != CONTAINER_VERSION {
            return Err(Error::Format(format!(
                "{}: expected a sectioned container (version {CONTAINER_VERSION}), found version {version}",
                path.display()
            )));
        }
        let count = cur.u32()?;
        let mut sections = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let name_len = cur.u32()? as u64;
            let name = String::from_utf8(cur.take_exact(name_len, 1)?.to_vec())
                .map_err(|_| Error::Format(format!("{}: section name is not utf-8", path.display())))?;
            let dtype = cur.take_exact(1, 1)?[0];
            let rows = cur.u64()?;
            let cols = cur.u64()?;
            let n = rows
                .checked_mul(cols)
                .ok_or_else(|| Error::Format(format!("section `{name}` shape overflows")))?;
            let (r, c) = (rows as usize, cols as usize);
            let data = match dtype {
                0 => SectionData::F32 {
                    rows: r,
                    cols: c,
                    data: cur
                        .take_exact(n, 4)?
                        .chunks_exact(4)
                        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                        .collect(),
                },
                1 => SectionData::F64 {
                    rows: r,
                    cols: c,
                    data: cur
                        .take_exact(n, 8)?
                        .chunks_exact(8)
                        .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                        .collect(),
                },
                2 => SectionData::U32 {
                    rows: r,
                    cols: c,
                    data: cur
                        .take_exact(n, 4)?
                        .chunks_exact(4)
                        .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
                        .collect(),
                },
                3 => SectionData::U64 {
                    rows: r,
                    cols: c,
                    data: cur
                        .take_exact(n, 8)?
                        .chunks_exact(8)
                        .map(|b| u64::from_le_bytes(b.try_into().unwrap()))
                        .collect(),
                },
                4 => SectionData::Bytes(cur.take_exact(n, 1)?.to_vec()),
                other => {
                    return Err(Error::Format(format!(
                        "section `{name}` has unknown dtype {other}"
                    )))
                }
            };
            sections.push(Section { name, data });
        }
        cur.finish()?;
        Ok(Self { sections })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        write_bytes(path.as_ref(), &self.encode())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = read_bytes(path)?;
        Self::decode(&bytes, path)
    }
}

/// Writes a whole file, creating missing parent directories.
pub(crate) fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(bytes).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub(crate) fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    let mut file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    Ok(bytes)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn new(bytes: &'a [u8], path: &'a Path) -> Self {
        Self { bytes, pos: 0, path }
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn magic(&mut self) -> Result<()> {
        if self.remaining() < 4 || &self.bytes[..4] != MAGIC {
            let found = &self.bytes[..self.bytes.len().min(4)];
            return Err(Error::Format(format!(
                "{}: bad magic {:?}, expected \"CBFM\"",
                self.path.display(),
                String::from_utf8_lossy(found)
            )));
        }
        self.pos = 4;
        Ok(())
    }

    fn header(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::Format(format!(
                "{}: header ends early at byte {}",
                self.path.display(),
                self.bytes.len()
            )));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.header(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.header(8)?.try_into().unwrap()))
    }

    fn take_exact(&mut self, count: u64, width: u64) -> Result<&'a [u8]> {
        let need = count.checked_mul(width).unwrap_or(u64::MAX);
        if (self.remaining() as u64) < need {
            return Err(Error::Truncated {
                path: self.path.to_path_buf(),
                expected: self.pos as u64 + need,
                found: self.bytes.len() as u64,
            });
        }
        let need = need as usize;
        let out = &self.bytes[self.pos..self.pos + need];
        self.pos += need;
        Ok(out)
    }

    fn finish(&self) -> Result<()> {
        if self.remaining() != 0 {
            return Err(Error::Format(format!(
                "{}: {} trailing bytes after payload",
                self.path.display(),
                self.remaining()
            )));
        }
        Ok(())
    }
}
