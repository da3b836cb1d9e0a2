//! Token-level embedding containers and the seeded synthetic corpus generator.
//!
//! A [`TokenMatrix`] is one item's `p × d` token stack stored row-major. An
//! [`EmbeddingStore`] is an ordered, id-keyed collection of equally shaped
//! matrices; it is the unit of on-disk persistence (see [`crate::temb`]).
//!
//! Storage is generic over the float type so the retrieval kernels can run on
//! compact `f32` stores while loss and bound checks use `f64` throughout.

use std::collections::HashSet;

use num_traits::Float;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Rows with a norm below this are rejected by normalization.
pub const MIN_ROW_NORM: f64 = 1e-12;

/// Tolerance on row norms for a matrix flagged as normalized.
pub const UNIT_NORM_TOL: f64 = 1e-6;

/// One item's token embeddings: `p` rows of dimension `d`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenMatrix<T = f32> {
    data: Vec<T>,
    p: usize,
    d: usize,
    normalized: bool,
}

impl<T: Float> TokenMatrix<T> {
    /// Builds a matrix from a flat row-major buffer of `p * d` values.
    pub fn from_flat(p: usize, d: usize, data: Vec<T>) -> Result<Self> {
        if p == 0 || d == 0 {
            return Err(Error::InvalidMatrix(format!("shape {p}x{d} is empty")));
        }
        if data.len() != p * d {
            return Err(Error::InvalidMatrix(format!(
                "expected {} values for shape {p}x{d}, got {}",
                p * d,
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidMatrix(format!(
                "non-finite value at row {}, column {}",
                pos / d,
                pos % d
            )));
        }
        Ok(Self {
            data,
            p,
            d,
            normalized: false,
        })
    }

    /// Builds a matrix from one vector per token.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let p = rows.len();
        let d = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().position(|r| r.len() != d) {
            return Err(Error::InvalidMatrix(format!(
                "row {bad} has {} entries, expected {d}",
                rows[bad].len()
            )));
        }
        Self::from_flat(p, d, rows.concat())
    }

    /// Like [`from_flat`](Self::from_flat) but also checks every row has unit
    /// norm and sets the normalized flag.
    pub fn from_flat_normalized(p: usize, d: usize, data: Vec<T>) -> Result<Self> {
        let mut m = Self::from_flat(p, d, data)?;
        for s in 0..p {
            let norm = row_norm(m.row(s));
            if (norm - 1.0).abs() > UNIT_NORM_TOL {
                return Err(Error::InvalidMatrix(format!(
                    "row {s} has norm {norm}, expected unit norm"
                )));
            }
        }
        m.normalized = true;
        Ok(m)
    }

    pub fn tokens(&self) -> usize {
        self.p
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn row(&self, s: usize) -> &[T] {
        &self.data[s * self.d..(s + 1) * self.d]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[T]> {
        self.data.chunks_exact(self.d)
    }

    /// Returns a copy with every row scaled to unit L2 norm.
    ///
    /// A matrix already flagged as normalized is returned unchanged, which
    /// makes the operation exactly idempotent.
    pub fn normalized(&self) -> Result<Self> {
        if self.normalized {
            return Ok(self.clone());
        }
        let mut data = Vec::with_capacity(self.data.len());
        for (s, row) in self.rows().enumerate() {
            let norm = row_norm(row);
            if norm < MIN_ROW_NORM {
                return Err(Error::ZeroNormToken { row: s });
            }
            data.extend(
                row.iter()
                    .map(|&v| T::from(v.to_f64().unwrap_or(0.0) / norm).unwrap_or_else(T::zero)),
            );
        }
        Ok(Self {
            data,
            p: self.p,
            d: self.d,
            normalized: true,
        })
    }

    /// Widens to `f64`, keeping the normalized flag.
    pub fn to_f64(&self) -> TokenMatrix<f64> {
        TokenMatrix {
            data: self.data.iter().map(|v| v.to_f64().unwrap_or(0.0)).collect(),
            p: self.p,
            d: self.d,
            normalized: self.normalized,
        }
    }

    /// Returns a matrix with rows reordered so that row `s` is `self.row(order[s])`.
    pub fn permute_rows(&self, order: &[usize]) -> Result<Self> {
        if order.len() != self.p || order.iter().any(|&r| r >= self.p) {
            return Err(Error::InvalidMatrix(format!(
                "row order {order:?} invalid for {} tokens",
                self.p
            )));
        }
        let mut data = Vec::with_capacity(self.data.len());
        for &r in order {
            data.extend_from_slice(self.row(r));
        }
        Ok(Self {
            data,
            p: self.p,
            d: self.d,
            normalized: self.normalized,
        })
    }

    /// Appends one token row. Clears the normalized flag unless the row is unit norm.
    pub fn push_row(&mut self, row: &[T]) -> Result<()> {
        if row.len() != self.d {
            return Err(Error::DimensionMismatch {
                left: self.d,
                right: row.len(),
            });
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidMatrix("non-finite value in appended row".into()));
        }
        if (row_norm(row) - 1.0).abs() > UNIT_NORM_TOL {
            self.normalized = false;
        }
        self.data.extend_from_slice(row);
        self.p += 1;
        Ok(())
    }
}

impl TokenMatrix<f64> {
    /// Narrows to `f32` storage. The normalized flag survives because f32
    /// rounding stays far inside the unit-norm tolerance.
    pub fn to_f32(&self) -> TokenMatrix<f32> {
        TokenMatrix {
            data: self.data.iter().map(|&v| v as f32).collect(),
            p: self.p,
            d: self.d,
            normalized: self.normalized,
        }
    }
}

/// Scales every row of `m` to unit norm.
pub fn normalize_tokens<T: Float>(m: &TokenMatrix<T>) -> Result<TokenMatrix<T>> {
    m.normalized()
}

fn row_norm<T: Float>(row: &[T]) -> f64 {
    row.iter()
        .map(|v| {
            let x = v.to_f64().unwrap_or(0.0);
            x * x
        })
        .sum::<f64>()
        .sqrt()
}

/// Ordered, id-keyed collection of equally shaped token matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    ids: Vec<String>,
    matrices: Vec<TokenMatrix<f32>>,
    p: usize,
    d: usize,
}

impl EmbeddingStore {
    pub fn new(ids: Vec<String>, matrices: Vec<TokenMatrix<f32>>) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::InvalidStore("store must hold at least one item".into()));
        }
        if ids.len() != matrices.len() {
            return Err(Error::InvalidStore(format!(
                "{} ids but {} matrices",
                ids.len(),
                matrices.len()
            )));
        }
        let mut seen = HashSet::with_capacity(ids.len());
        for id in &ids {
            if id.is_empty() {
                return Err(Error::InvalidStore("empty id".into()));
            }
            if !seen.insert(id.as_str()) {
                return Err(Error::InvalidStore(format!("duplicate id {id:?}")));
            }
        }
        let (p, d) = (matrices[0].tokens(), matrices[0].dim());
        if let Some(bad) = matrices.iter().position(|m| m.tokens() != p || m.dim() != d) {
            return Err(Error::InvalidStore(format!(
                "item {:?} has shape {}x{}, store shape is {p}x{d}",
                ids[bad],
                matrices[bad].tokens(),
                matrices[bad].dim()
            )));
        }
        Ok(Self { ids, matrices, p, d })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Tokens per item.
    pub fn tokens(&self) -> usize {
        self.p
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn matrices(&self) -> &[TokenMatrix<f32>] {
        &self.matrices
    }

    pub fn get(&self, i: usize) -> (&str, &TokenMatrix<f32>) {
        (&self.ids[i], &self.matrices[i])
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|x| x == id)
    }

    pub fn is_normalized(&self) -> bool {
        self.matrices.iter().all(TokenMatrix::is_normalized)
    }

    /// Returns a copy with every matrix normalized.
    pub fn normalized(&self) -> Result<Self> {
        let matrices = self
            .matrices
            .iter()
            .map(TokenMatrix::normalized)
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            ids: self.ids.clone(),
            matrices,
            p: self.p,
            d: self.d,
        })
    }
}

/// Parameters of a seeded synthetic corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub n: usize,
    pub p: usize,
    pub d: usize,
    pub seed: u64,
    /// When set, items are perturbations of this many seeded centroids.
    pub cluster_count: Option<usize>,
    pub noise_scale: f64,
}

impl SynthSpec {
    pub fn uniform(n: usize, p: usize, d: usize, seed: u64) -> Self {
        Self {
            n,
            p,
            d,
            seed,
            cluster_count: None,
            noise_scale: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(Error::InvalidSpec(format!(
                "n = {} but at least 2 items are required",
                self.n
            )));
        }
        if self.p == 0 || self.d == 0 {
            return Err(Error::InvalidSpec(format!("shape {}x{} is empty", self.p, self.d)));
        }
        match self.cluster_count {
            Some(0) => return Err(Error::InvalidSpec("cluster_count must be positive".into())),
            Some(c) if c > self.n => {
                return Err(Error::InvalidSpec(format!(
                    "cluster_count {c} exceeds item count {}",
                    self.n
                )))
            }
            _ => {}
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return Err(Error::InvalidSpec(format!(
                "noise_scale {} must be finite and non-negative",
                self.noise_scale
            )));
        }
        Ok(())
    }
}

/// Zero-padded id used for synthetic item `i`; lexicographic order matches index order.
pub fn synth_id(i: usize) -> String {
    format!("item_{i:06}")
}

/// Generates a normalized store that is a pure function of `spec`.
///
/// Without clusters every token is an independent Gaussian direction. With
/// `cluster_count = c`, item `i` is a perturbation of centroid `i % c` with
/// Gaussian noise of scale `noise_scale` added before normalization.
pub fn synth_embeddings(spec: &SynthSpec) -> Result<EmbeddingStore> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let width = spec.p * spec.d;
    let draw = |rng: &mut ChaCha8Rng| -> Vec<f64> { (0..width).map(|_| StandardNormal.sample(rng)).collect() };

    let centroids: Vec<Vec<f64>> = match spec.cluster_count {
        Some(c) => (0..c).map(|_| draw(&mut rng)).collect(),
        None => Vec::new(),
    };

    let mut ids = Vec::with_capacity(spec.n);
    let mut matrices = Vec::with_capacity(spec.n);
    for i in 0..spec.n {
        let raw = if centroids.is_empty() {
            draw(&mut rng)
        } else {
            let noise = draw(&mut rng);
            centroids[i % centroids.len()]
                .iter()
                .zip(noise)
                .map(|(c, e)| c + spec.noise_scale * e)
                .collect()
        };
        let m = TokenMatrix::from_flat(spec.p, spec.d, raw)?.normalized()?;
        ids.push(synth_id(i));
        matrices.push(m.to_f32());
    }
    EmbeddingStore::new(ids, matrices)
}

/// Row-major matrix of similarity scores.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl ScoreMatrix {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::InvalidMatrix(format!(
                "score matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                values.len()
            )));
        }
        if values.iter().any(|v| v.is_nan()) {
            return Err(Error::InvalidMatrix("score matrix contains NaN".into()));
        }
        Ok(Self { rows, cols, values })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.cols + j]
    }

    /// Hex SHA-256 over the little-endian bit patterns of all values.
    pub fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update((self.rows as u64).to_le_bytes());
        hasher.update((self.cols as u64).to_le_bytes());
        for v in &self.values {
            hasher.update(v.to_le_bytes());
        }
        hex_digest(&hasher.finalize())
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
