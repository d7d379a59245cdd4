//! On-disk containers.
//!
//! Matrix archives (features and embeddings) are a sequence of records
//! `u32 id_len | id | u32 rows | u32 cols | rows×cols f32`, all little-endian
//! and row-major, after an 8-byte magic. A text sidecar `<file>.idx` lists
//! `<id> <byte offset>` per record.
//!
//! Tensor files (network, LDA and PLDA models) start with a magic, a TOML
//! header and then named row-major f32 tensors.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

const ARCHIVE_MAGIC: &[u8; 8] = b"XVECARK1";
const TENSOR_MAGIC: &[u8; 8] = b"XVECTNS1";

/// Writes via a temporary file in the same directory and renames it into
/// place, so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let name = path
        .file_name()
        .ok_or_else(|| Error::InvalidInput(format!("not a file path: {}", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn index_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".idx");
    PathBuf::from(s)
}

fn push_u32(buf: &mut Vec<u8>, v: usize, what: &str) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::InvalidInput(format!("{what} {v} too large for archive")))?;
    buf.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn push_matrix(buf: &mut Vec<u8>, m: &DMatrix<f64>) -> Result<()> {
    push_u32(buf, m.nrows(), "row count")?;
    push_u32(buf, m.ncols(), "column count")?;
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            buf.extend_from_slice(&(m[(r, c)] as f32).to_le_bytes());
        }
    }
    Ok(())
}

fn push_name(buf: &mut Vec<u8>, name: &str) -> Result<()> {
    if name.is_empty() || name.chars().any(char::is_whitespace) {
        return Err(Error::InvalidInput(format!("invalid record id `{name}`")));
    }
    push_u32(buf, name.len(), "id length")?;
    buf.extend_from_slice(name.as_bytes());
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(self.path, format!("truncated at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn name(&mut self) -> Result<String> {
        let n = self.u32()?;
        let path = self.path;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::format(path, "record id is not UTF-8"))
    }

    fn matrix(&mut self) -> Result<DMatrix<f64>> {
        let rows = self.u32()?;
        let cols = self.u32()?;
        let n = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::format(self.path, "matrix size overflows"))?;
        let data = self.take(n)?;
        let vals: Vec<f64> = data
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        Ok(DMatrix::from_row_slice(rows, cols, &vals))
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

/// Writes an archive and its index. Ids must be unique.
pub fn write_archive(path: &Path, records: &[(String, DMatrix<f64>)]) -> Result<()> {
    let mut buf = ARCHIVE_MAGIC.to_vec();
    let mut idx = String::new();
    let mut seen = std::collections::HashSet::new();
    for (id, m) in records {
        if !seen.insert(id.as_str()) {
            return Err(Error::InvalidInput(format!("duplicate record id `{id}`")));
        }
        idx.push_str(&format!("{id} {}\n", buf.len()));
        push_name(&mut buf, id)?;
        push_matrix(&mut buf, m)?;
    }
    write_atomic(path, &buf)?;
    write_atomic(&index_path(path), idx.as_bytes())
}

/// Reads every record in file order and checks the index agrees.
pub fn read_archive(path: &Path) -> Result<Vec<(String, DMatrix<f64>)>> {
    let bytes = read_file(path)?;
    let mut cur = Cursor {
        bytes: &bytes,
        pos: 0,
        path,
    };
    if cur.take(8)? != ARCHIVE_MAGIC {
        return Err(Error::format(path, "not a matrix archive"));
    }
    let mut out = Vec::new();
    let mut offsets = Vec::new();
    while !cur.done() {
        offsets.push(cur.pos);
        let id = cur.name()?;
        let m = cur.matrix()?;
        out.push((id, m));
    }
    let idx_path = index_path(path);
    let idx = read_text(&idx_path)?;
    let lines: Vec<&str> = idx.lines().filter(|l| !l.trim().is_empty()).collect();
    if lines.len() != out.len() {
        return Err(Error::format(
            &idx_path,
            format!("index lists {} records, archive holds {}", lines.len(), out.len()),
        ));
    }
    for (i, line) in lines.iter().enumerate() {
        let ok = match line.split_whitespace().collect::<Vec<_>>()[..] {
            [id, off] => id == out[i].0 && off.parse::<usize>().ok() == Some(offsets[i]),
            _ => false,
        };
        if !ok {
            return Err(Error::format(&idx_path, format!("line {} disagrees with archive", i + 1)));
        }
    }
    Ok(out)
}

pub fn write_vectors(path: &Path, records: &[(String, DVector<f64>)]) -> Result<()> {
    let rows: Vec<(String, DMatrix<f64>)> = records
        .iter()
        .map(|(id, v)| (id.clone(), DMatrix::from_row_slice(1, v.len(), v.as_slice())))
        .collect();
    write_archive(path, &rows)
}

/// Reads an archive of single-row records.
pub fn read_vectors(path: &Path) -> Result<Vec<(String, DVector<f64>)>> {
    read_archive(path)?
        .into_iter()
        .map(|(id, m)| {
            if m.nrows() != 1 {
                return Err(Error::format(path, format!("record `{id}` has {} rows, expected 1", m.nrows())));
            }
            Ok((id, DVector::from_iterator(m.ncols(), m.iter().copied())))
        })
        .collect()
}

/// Named tensors with a free-form TOML header.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TensorFile {
    pub header: String,
    pub tensors: BTreeMap<String, DMatrix<f64>>,
}

impl TensorFile {
    pub fn new(header: String) -> Self {
        Self {
            header,
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, m: DMatrix<f64>) {
        self.tensors.insert(name.to_string(), m);
    }

    pub fn insert_vector(&mut self, name: &str, v: &DVector<f64>) {
        self.insert(name, DMatrix::from_column_slice(v.len(), 1, v.as_slice()));
    }

    pub fn get(&self, name: &str, path: &Path) -> Result<&DMatrix<f64>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::format(path, format!("tensor `{name}` missing")))
    }

    pub fn get_vector(&self, name: &str, path: &Path) -> Result<DVector<f64>> {
        let m = self.get(name, path)?;
        if m.ncols() != 1 {
            return Err(Error::format(path, format!("tensor `{name}` is not a column vector")));
        }
        Ok(m.column(0).into_owned())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = TENSOR_MAGIC.to_vec();
        push_u32(&mut buf, self.header.len(), "header length")?;
        buf.extend_from_slice(self.header.as_bytes());
        push_u32(&mut buf, self.tensors.len(), "tensor count")?;
        for (name, m) in &self.tensors {
            push_name(&mut buf, name)?;
            push_matrix(&mut buf, m)?;
        }
        Ok(buf)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = read_file(path)?;
        let mut cur = Cursor {
            bytes: &bytes,
            pos: 0,
            path,
        };
        if cur.take(8)? != TENSOR_MAGIC {
            return Err(Error::format(path, "not a tensor file"));
        }
        let n = cur.u32()?;
        let header =
            String::from_utf8(cur.take(n)?.to_vec()).map_err(|_| Error::format(path, "header is not UTF-8"))?;
        let count = cur.u32()?;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let name = cur.name()?;
            let m = cur.matrix()?;
            if tensors.insert(name.clone(), m).is_some() {
                return Err(Error::format(path, format!("duplicate tensor `{name}`")));
            }
        }
        if !cur.done() {
            return Err(Error::format(path, "trailing bytes after last tensor"));
        }
        Ok(Self { header, tensors })
    }
}
