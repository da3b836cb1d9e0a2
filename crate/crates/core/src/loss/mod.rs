//! InfoNCE with token-level MaxSim similarity, and the tools to check how it
//! relates to the standard flattened-embedding InfoNCE.
//!
//! Sign convention: the objective is the mean log-softmax of the positive,
//!
//! ```text
//! L = (1/N) Σ_i [ s_ii/τ − log Σ_j exp(s_ij/τ) ]      (L ≤ 0)
//! ```
//!
//! a log-likelihood to be maximized. A trainer minimizing a loss uses `−L`.

pub mod bounds;
pub mod collapse;
mod grad;

use crate::error::{Error, Result};
use crate::maxsim::score_pairs;
use crate::tokens::TokenMatrix;

pub use bounds::{
    argmax_assignment, hat_scores, noisy_permutation_batch, random_stacks, standard_infonce, verify_bounds, Assignment,
    BoundReport,
};
pub use collapse::{alignment_error, collapse_lab, etf_error, CollapseConfig, CollapseReport, TraceRow};
pub use grad::{infonce_maxsim_grad, Gradient, TIE_TOL};

/// Matched query/target token stacks plus the softmax temperature.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    queries: Vec<TokenMatrix<f64>>,
    targets: Vec<TokenMatrix<f64>>,
    tau: f64,
}

impl Batch {
    /// Builds a batch, normalizing every token row.
    pub fn new(queries: Vec<TokenMatrix<f64>>, targets: Vec<TokenMatrix<f64>>, tau: f64) -> Result<Self> {
        if queries.is_empty() {
            return Err(Error::InvalidBatch("batch must hold at least one pair".into()));
        }
        if queries.len() != targets.len() {
            return Err(Error::InvalidBatch(format!(
                "{} queries but {} targets",
                queries.len(),
                targets.len()
            )));
        }
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::InvalidBatch(format!(
                "temperature {tau} must be positive and finite"
            )));
        }
        let (p, d) = (queries[0].tokens(), queries[0].dim());
        if let Some(bad) = queries
            .iter()
            .chain(&targets)
            .position(|m| m.tokens() != p || m.dim() != d)
        {
            return Err(Error::InvalidBatch(format!(
                "matrix {bad} differs from the batch shape {p}x{d}"
            )));
        }
        let norm = |v: Vec<TokenMatrix<f64>>| v.iter().map(TokenMatrix::normalized).collect::<Result<Vec<_>>>();
        Ok(Self {
            queries: norm(queries)?,
            targets: norm(targets)?,
            tau,
        })
    }

    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }

    pub fn tokens(&self) -> usize {
        self.queries[0].tokens()
    }

    pub fn dim(&self) -> usize {
        self.queries[0].dim()
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn queries(&self) -> &[TokenMatrix<f64>] {
        &self.queries
    }

    pub fn targets(&self) -> &[TokenMatrix<f64>] {
        &self.targets
    }

    /// Row-major `N × N` MaxSim scores, `s[i][j] = maxsim(U_i, V_j)`.
    pub fn scores(&self) -> Vec<f64> {
        score_pairs(&self.queries, &self.targets).expect("batch shapes are uniform")
    }
}

/// Row-wise softmax of `scores / tau` for an `n × n` matrix, as
/// `(log-softmax of the diagonal, probabilities)`.
fn softmax_rows(scores: &[f64], n: usize, tau: f64) -> (Vec<f64>, Vec<f64>) {
    let mut diag = Vec::with_capacity(n);
    let mut probs = vec![0.0; n * n];
    for i in 0..n {
        let row = &scores[i * n..(i + 1) * n];
        let max = row.iter().map(|s| s / tau).fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|s| (s / tau - max).exp()).sum();
        let lse = max + sum.ln();
        diag.push(row[i] / tau - lse);
        for (j, s) in row.iter().enumerate() {
            probs[i * n + j] = (s / tau - lse).exp();
        }
    }
    (diag, probs)
}

/// InfoNCE objective from a precomputed row-major `n × n` score matrix.
///
/// Uses a max-shifted log-sum-exp per row, so it stays finite for any
/// positive `tau`.
pub fn infonce_from_scores(scores: &[f64], n: usize, tau: f64) -> f64 {
    assert_eq!(scores.len(), n * n, "score matrix must be n x n");
    let (diag, _) = softmax_rows(scores, n, tau);
    diag.iter().sum::<f64>() / n as f64
}

/// The MaxSim InfoNCE objective of a batch.
pub fn infonce_maxsim(batch: &Batch) -> f64 {
    infonce_from_scores(&batch.scores(), batch.len(), batch.tau)
}
