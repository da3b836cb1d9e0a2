//! Token-level maximum cosine similarity.
//!
//! ```text
//! maxsim(a, b) = (1/p_a) Σ_s max_r ⟨a_s, b_r⟩
//! ```
//!
//! Inputs are expected to be row-normalized, so the inner product is the
//! cosine. The outer mean runs over the tokens of the FIRST argument: the
//! reference image when mining, the composed query when scoring. The
//! function is therefore not symmetric.
//!
//! Two paths compute the same quantity. [`maxsim_brute`] is a plain nested
//! loop kept as the oracle. [`maxsim`] and [`maxsim_matrix`] run on a
//! transposed candidate layout ([`PackedTokens`]) so the innermost loop is a
//! contiguous multiply-add across candidate tokens. All accumulation is in
//! `f64` with a fixed sequential order per pair, so the score matrix does
//! not depend on how pairs are spread over workers.

use std::cmp::Ordering;

use num_traits::Float;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tokens::{EmbeddingStore, ScoreMatrix, TokenMatrix};

/// Query rows handled per parallel task in [`maxsim_matrix`].
const QUERY_BLOCK: usize = 8;

fn check_dims<T>(a: &TokenMatrix<T>, b: &TokenMatrix<T>) -> Result<()>
where
    T: Float,
{
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            left: a.dim(),
            right: b.dim(),
        });
    }
    Ok(())
}

#[inline]
fn to64<T: Float>(v: T) -> f64 {
    v.to_f64().unwrap_or(0.0)
}

/// Reference implementation: nested loops in token-major order.
pub fn maxsim_brute<T: Float>(a: &TokenMatrix<T>, b: &TokenMatrix<T>) -> Result<f64> {
    check_dims(a, b)?;
    let mut total = 0.0f64;
    for s in 0..a.tokens() {
        let us = a.row(s);
        let mut best = f64::NEG_INFINITY;
        for r in 0..b.tokens() {
            let vr = b.row(r);
            let mut dot = 0.0f64;
            for k in 0..a.dim() {
                dot += to64(us[k]) * to64(vr[k]);
            }
            if dot > best {
                best = dot;
            }
        }
        total += best;
    }
    Ok(total / a.tokens() as f64)
}

/// Candidate tokens stored transposed (`d × p`) in `f64`.
#[derive(Debug, Clone)]
pub struct PackedTokens {
    cols: Vec<f64>,
    p: usize,
    d: usize,
}

impl PackedTokens {
    pub fn new<T: Float>(m: &TokenMatrix<T>) -> Self {
        let (p, d) = (m.tokens(), m.dim());
        let mut cols = vec![0.0; p * d];
        for (r, row) in m.rows().enumerate() {
            for (k, &v) in row.iter().enumerate() {
                cols[k * p + r] = to64(v);
            }
        }
        Self { cols, p, d }
    }

    pub fn tokens(&self) -> usize {
        self.p
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    /// Scores `query` against these tokens; `scratch` is resized to `p`.
    fn score<T: Float>(&self, query: &TokenMatrix<T>, scratch: &mut Vec<f64>) -> f64 {
        scratch.clear();
        scratch.resize(self.p, 0.0);
        let mut total = 0.0f64;
        for us in query.rows() {
            scratch.iter_mut().for_each(|x| *x = 0.0);
            for (k, &x) in us.iter().enumerate() {
                let x = to64(x);
                let col = &self.cols[k * self.p..(k + 1) * self.p];
                for (acc, &y) in scratch.iter_mut().zip(col) {
                    *acc += x * y;
                }
            }
            total += scratch.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        }
        total / query.tokens() as f64
    }
}

/// Optimized single-pair MaxSim. Same contract as [`maxsim_brute`].
pub fn maxsim<T: Float>(a: &TokenMatrix<T>, b: &TokenMatrix<T>) -> Result<f64> {
    check_dims(a, b)?;
    let packed = PackedTokens::new(b);
    let mut scratch = Vec::with_capacity(packed.tokens());
    Ok(packed.score(a, &mut scratch))
}

/// Scores every query against every candidate, returning a row-major
/// `queries.len() × candidates.len()` buffer.
///
/// Runs on the current rayon pool. Each pair is computed by exactly one
/// task with a fixed reduction order.
pub fn score_pairs<T>(queries: &[TokenMatrix<T>], candidates: &[TokenMatrix<T>]) -> Result<Vec<f64>>
where
    T: Float + Send + Sync,
{
    let dims = queries.iter().chain(candidates).map(TokenMatrix::dim);
    let mut dims = dims.collect::<Vec<_>>();
    dims.dedup();
    if dims.len() > 1 {
        return Err(Error::DimensionMismatch {
            left: dims[0],
            right: dims[1],
        });
    }
    let cols = candidates.len();
    if cols == 0 || queries.is_empty() {
        return Ok(Vec::new());
    }
    let packed: Vec<PackedTokens> = candidates.par_iter().map(PackedTokens::new).collect();
    let mut out = vec![0.0f64; queries.len() * cols];
    out.par_chunks_mut(QUERY_BLOCK * cols)
        .enumerate()
        .for_each(|(block, tile)| {
            let first = block * QUERY_BLOCK;
            let mut scratch = Vec::new();
            let rows = tile.len() / cols;
            for (j, cand) in packed.iter().enumerate() {
                for local in 0..rows {
                    tile[local * cols + j] = cand.score(&queries[first + local], &mut scratch);
                }
            }
        });
    Ok(out)
}

/// All-pairs MaxSim between two stores on the current rayon pool.
pub fn maxsim_matrix(queries: &EmbeddingStore, candidates: &EmbeddingStore) -> Result<ScoreMatrix> {
    if queries.dim() != candidates.dim() {
        return Err(Error::DimensionMismatch {
            left: queries.dim(),
            right: candidates.dim(),
        });
    }
    let values = score_pairs(queries.matrices(), candidates.matrices())?;
    ScoreMatrix::new(queries.len(), candidates.len(), values)
}

/// Runs `f` on a dedicated pool of `threads` workers (0 = one per core).
pub fn with_workers<R: Send>(threads: usize, f: impl FnOnce() -> R + Send) -> Result<R> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::InvalidConfig(format!("cannot start worker pool: {e}")))?;
    Ok(pool.install(f))
}

/// Worker count a pool built with `threads` ends up with.
pub fn effective_threads(threads: usize) -> usize {
    if threads > 0 {
        threads
    } else {
        std::thread::available_parallelism().map_or(1, |n| n.get())
    }
}

/// [`maxsim_matrix`] on a dedicated pool of `threads` workers (0 = auto).
pub fn maxsim_matrix_threads(
    queries: &EmbeddingStore,
    candidates: &EmbeddingStore,
    threads: usize,
) -> Result<ScoreMatrix> {
    with_workers(threads, || maxsim_matrix(queries, candidates))?
}

/// One scored candidate in a [`RankedList`].
#[derive(Debug, Clone, PartialEq)]
pub struct RankedEntry {
    /// Column of the candidate in the score row.
    pub index: usize,
    pub candidate_id: String,
    pub score: f64,
}

/// Candidates for one query, best first.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedList {
    pub query_id: String,
    pub entries: Vec<RankedEntry>,
}

impl RankedList {
    /// Builds a list from `(candidate_id, score)` pairs, sorting them into
    /// canonical order.
    pub fn from_scores<I, S>(query_id: impl Into<String>, scored: I) -> Self
    where
        I: IntoIterator<Item = (S, f64)>,
        S: Into<String>,
    {
        let mut entries: Vec<RankedEntry> = scored
            .into_iter()
            .enumerate()
            .map(|(index, (id, score))| RankedEntry {
                index,
                candidate_id: id.into(),
                score,
            })
            .collect();
        entries.sort_by(|a, b| rank_cmp(a.score, &a.candidate_id, b.score, &b.candidate_id));
        Self {
            query_id: query_id.into(),
            entries,
        }
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.candidate_id.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Canonical ranking order: score descending, then id ascending.
pub fn rank_cmp(score_a: f64, id_a: &str, score_b: f64, id_b: &str) -> Ordering {
    score_b.total_cmp(&score_a).then_with(|| id_a.cmp(id_b))
}

/// Column indices of `row` in canonical ranking order, skipping `exclude`.
pub fn rank_order(row: &[f64], ids: &[String], exclude: Option<usize>) -> Vec<usize> {
    let mut order: Vec<usize> = (0..row.len()).filter(|&j| Some(j) != exclude).collect();
    order.sort_by(|&a, &b| rank_cmp(row[a], &ids[a], row[b], &ids[b]));
    order
}

/// The `k` best candidates of one score row.
///
/// `ids[j]` names column `j` and breaks score ties. Returns every remaining
/// candidate when `k` exceeds the row length and nothing when `k == 0`.
pub fn top_k(query_id: &str, row: &[f64], ids: &[String], k: usize, exclude_self: Option<usize>) -> RankedList {
    assert_eq!(row.len(), ids.len(), "score row and id list differ in length");
    let mut order: Vec<usize> = (0..row.len()).filter(|&j| Some(j) != exclude_self).collect();
    let cmp = |&a: &usize, &b: &usize| rank_cmp(row[a], &ids[a], row[b], &ids[b]);
    if k < order.len() {
        if k > 0 {
            order.select_nth_unstable_by(k - 1, cmp);
        }
        order.truncate(k);
    }
    order.sort_by(cmp);
    RankedList {
        query_id: query_id.to_owned(),
        entries: order
            .into_iter()
            .map(|j| RankedEntry {
                index: j,
                candidate_id: ids[j].clone(),
                score: row[j],
            })
            .collect(),
    }
}
