//! Pretext token embeddings and the binary file that stores them.
//!
//! Layout (little-endian): magic `DOKT`, version `u32`, `n: u64`,
//! `tokens: u32`, `dim: u32`, then `n * tokens * dim` `f32` values in
//! sample-major, token-major order.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{DoktError, Result};
use crate::pool::SampleId;
use crate::similarity::{dot, norm};

pub const MAGIC: &[u8; 4] = b"DOKT";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 8 + 4 + 4;

/// One sample's `tokens x dim` matrix of pretext token vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenEmbedding {
    tokens: usize,
    dim: usize,
    values: Vec<f32>,
}

impl TokenEmbedding {
    pub fn new(tokens: usize, dim: usize, values: Vec<f32>) -> Result<Self> {
        if tokens == 0 || dim < 2 {
            return Err(DoktError::Shape(format!(
                "token matrix must have T >= 1 and d >= 2, got {tokens} x {dim}"
            )));
        }
        if values.len() != tokens * dim {
            return Err(DoktError::Shape(format!(
                "expected {} values for {tokens} x {dim}, got {}",
                tokens * dim,
                values.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(DoktError::EmbeddingFormat(format!("non-finite value at offset {pos}")));
        }
        Ok(Self { tokens, dim, values })
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn row(&self, token: usize) -> &[f32] {
        &self.values[token * self.dim..(token + 1) * self.dim]
    }

    pub(crate) fn row_mut(&mut self, token: usize) -> &mut [f32] {
        &mut self.values[token * self.dim..(token + 1) * self.dim]
    }

    /// Component-wise mean over tokens, accumulated in `f64`.
    pub fn pooled(&self) -> Vec<f64> {
        pool_rows(&self.values, self.tokens, self.dim)
    }

    pub fn same_shape(&self, other: &TokenEmbedding) -> bool {
        self.tokens == other.tokens && self.dim == other.dim
    }
}

fn pool_rows(values: &[f32], tokens: usize, dim: usize) -> Vec<f64> {
    let mut acc = vec![0.0f64; dim];
    for row in values.chunks_exact(dim) {
        for (a, &v) in acc.iter_mut().zip(row) {
            *a += f64::from(v);
        }
    }
    let inv = 1.0 / tokens as f64;
    acc.iter_mut().for_each(|a| *a *= inv);
    acc
}

/// All samples' token matrices, exactly as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Embeddings {
    n: usize,
    tokens: usize,
    dim: usize,
    values: Vec<f32>,
}

impl Embeddings {
    pub fn new(n: usize, tokens: usize, dim: usize, values: Vec<f32>) -> Result<Self> {
        if n == 0 {
            return Err(DoktError::EmbeddingFormat("no samples".into()));
        }
        if tokens == 0 || dim < 2 {
            return Err(DoktError::EmbeddingFormat(format!(
                "need T >= 1 and d >= 2, got T={tokens} d={dim}"
            )));
        }
        if values.len() != n * tokens * dim {
            return Err(DoktError::EmbeddingFormat(format!(
                "expected {} values, found {}",
                n * tokens * dim,
                values.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(DoktError::EmbeddingFormat(format!(
                "non-finite value in sample {}",
                pos / (tokens * dim)
            )));
        }
        let e = Self {
            n,
            tokens,
            dim,
            values,
        };
        for i in 0..n {
            if norm(&e.pooled(SampleId(i))) == 0.0 {
                return Err(DoktError::DegenerateVector(format!(
                    "sample {i} has a zero-norm pooled embedding"
                )));
            }
        }
        Ok(e)
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn raw_values(&self) -> &[f32] {
        &self.values
    }

    fn span(&self, id: SampleId) -> &[f32] {
        let stride = self.tokens * self.dim;
        &self.values[id.0 * stride..(id.0 + 1) * stride]
    }

    pub fn sample(&self, id: SampleId) -> TokenEmbedding {
        TokenEmbedding {
            tokens: self.tokens,
            dim: self.dim,
            values: self.span(id).to_vec(),
        }
    }

    pub fn pooled(&self, id: SampleId) -> Vec<f64> {
        pool_rows(self.span(id), self.tokens, self.dim)
    }

    pub fn read_from<R: Read>(mut reader: R) -> Result<Self> {
        let mut header = [0u8; HEADER_LEN];
        reader
            .read_exact(&mut header)
            .map_err(|e| DoktError::EmbeddingFormat(format!("truncated header: {e}")))?;
        let (n, tokens, dim) = parse_header(&header)?;
        let count = n
            .checked_mul(tokens)
            .and_then(|v| v.checked_mul(dim))
            .ok_or_else(|| DoktError::EmbeddingFormat("header sizes overflow".into()))?;
        let mut bytes = Vec::new();
        reader
            .read_to_end(&mut bytes)
            .map_err(|e| DoktError::EmbeddingFormat(format!("read failed: {e}")))?;
        if bytes.len() != count * 4 {
            return Err(DoktError::EmbeddingFormat(format!(
                "payload holds {} bytes, header implies {}",
                bytes.len(),
                count * 4
            )));
        }
        let values = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Self::new(n, tokens, dim, values)
    }

    pub fn write_to<W: Write>(&self, mut writer: W) -> std::io::Result<()> {
        writer.write_all(MAGIC)?;
        writer.write_all(&FORMAT_VERSION.to_le_bytes())?;
        writer.write_all(&(self.n as u64).to_le_bytes())?;
        writer.write_all(&(self.tokens as u32).to_le_bytes())?;
        writer.write_all(&(self.dim as u32).to_le_bytes())?;
        let mut buf = Vec::with_capacity(self.values.len() * 4);
        for v in &self.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        writer.write_all(&buf)?;
        writer.flush()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| DoktError::io(path, e))?;
        Self::read_from(std::io::BufReader::new(file))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| DoktError::io(path, e))?;
        self.write_to(std::io::BufWriter::new(file))
            .map_err(|e| DoktError::io(path, e))
    }
}

/// Reads only the `(n, tokens, dim)` header of an embedding file.
pub fn read_header(path: &Path) -> Result<(usize, usize, usize)> {
    let mut file = std::fs::File::open(path).map_err(|e| DoktError::io(path, e))?;
    let mut header = [0u8; HEADER_LEN];
    file.read_exact(&mut header)
        .map_err(|e| DoktError::EmbeddingFormat(format!("truncated header: {e}")))?;
    parse_header(&header)
}

fn parse_header(header: &[u8; HEADER_LEN]) -> Result<(usize, usize, usize)> {
    if &header[0..4] != MAGIC {
        return Err(DoktError::EmbeddingFormat("bad magic".into()));
    }
    let version = u32::from_le_bytes(header[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(DoktError::EmbeddingFormat(format!("unsupported version {version}")));
    }
    let n = u64::from_le_bytes(header[8..16].try_into().unwrap());
    let tokens = u32::from_le_bytes(header[16..20].try_into().unwrap());
    let dim = u32::from_le_bytes(header[20..24].try_into().unwrap());
    let n = usize::try_from(n).map_err(|_| DoktError::EmbeddingFormat("n too large".into()))?;
    Ok((n, tokens as usize, dim as usize))
}

/// Pooled pretext vectors in `f64`, with cached norms for cosine queries.
#[derive(Debug, Clone)]
pub struct PretextSpace {
    dim: usize,
    vectors: Vec<f64>,
    norms: Vec<f64>,
}

impl PretextSpace {
    pub fn from_embeddings(e: &Embeddings) -> Self {
        let mut vectors = Vec::with_capacity(e.len() * e.dim());
        for i in 0..e.len() {
            vectors.extend(e.pooled(SampleId(i)));
        }
        Self::from_flat(e.dim(), vectors).expect("embeddings validated at construction")
    }

    /// Builds a space from arbitrary row vectors; rejects zero-norm rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map(Vec::len).unwrap_or(0);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(DoktError::Shape("ragged pretext rows".into()));
        }
        Self::from_flat(dim, rows.concat())
    }

    fn from_flat(dim: usize, vectors: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(DoktError::Shape("empty pretext space".into()));
        }
        let norms: Vec<f64> = vectors.chunks_exact(dim).map(norm).collect();
        if let Some(i) = norms.iter().position(|&n| n == 0.0 || !n.is_finite()) {
            return Err(DoktError::DegenerateVector(format!("row {i} has zero or non-finite norm")));
        }
        Ok(Self { dim, vectors, norms })
    }

    pub fn len(&self) -> usize {
        self.norms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.norms.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn vector(&self, id: SampleId) -> &[f64] {
        &self.vectors[id.0 * self.dim..(id.0 + 1) * self.dim]
    }

    /// Raw cosine between two stored rows. A zero comes back as +0.0 so that
    /// orthogonal neighbors tie under `total_cmp`.
    pub fn cosine(&self, a: SampleId, b: SampleId) -> f64 {
        let c = dot(self.vector(a), self.vector(b)) / (self.norms[a.0] * self.norms[b.0]);
        c.clamp(-1.0, 1.0) + 0.0
    }

    /// Returns a copy with every row mapped through `f`.
    pub fn map_rows(&self, mut f: impl FnMut(&[f64]) -> Vec<f64>) -> Result<Self> {
        let rows: Vec<Vec<f64>> = self.vectors.chunks_exact(self.dim).map(&mut f).collect();
        Self::from_rows(&rows)
    }
}
