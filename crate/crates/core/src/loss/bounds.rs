//! Standard InfoNCE through a per-item token matching, and a numerical
//! check of how it brackets the MaxSim objective.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use super::grad::best_token;
use super::{infonce_from_scores, Batch};
use crate::error::{Error, Result};
use crate::tokens::TokenMatrix;

/// Token matching from one query stack to one target stack.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Assignment {
    /// `map[s]` is the 0-based target token matched to query token `s`.
    pub map: Vec<usize>,
    pub bijective: bool,
    /// Whether any entry was decided by a tie (smallest index kept).
    pub ties: bool,
}

impl Assignment {
    pub fn identity(p: usize) -> Self {
        Self {
            map: (0..p).collect(),
            bijective: true,
            ties: false,
        }
    }
}

/// Per-token argmax map from `u` to `v`.
pub fn argmax_assignment(u: &TokenMatrix<f64>, v: &TokenMatrix<f64>) -> Assignment {
    assert_eq!(u.tokens(), v.tokens(), "assignment needs equal token counts");
    let mut seen = vec![false; v.tokens()];
    let mut bijective = true;
    let mut ties = false;
    let map = u
        .rows()
        .map(|us| {
            let (r, tie) = best_token(us, v);
            ties |= tie;
            bijective &= !std::mem::replace(&mut seen[r], true);
            r
        })
        .collect();
    Assignment { map, bijective, ties }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// `ŝ_ij = (1/p) Σ_s ⟨u_i^s, v_j^{σ_i(s)}⟩`, row-major `N × N`.
///
/// No bijectivity check: any map gives a lower bound on the MaxSim score.
pub fn hat_scores(batch: &Batch, sigmas: &[Assignment]) -> Vec<f64> {
    let n = batch.len();
    assert_eq!(sigmas.len(), n, "one assignment per item");
    let p = batch.tokens() as f64;
    let mut out = Vec::with_capacity(n * n);
    for (u, sigma) in batch.queries().iter().zip(sigmas) {
        for v in batch.targets() {
            let total: f64 = u
                .rows()
                .zip(&sigma.map)
                .map(|(us, &r)| dot(us, v.row(r)))
                .fold(0.0, |a, b| a + b);
            out.push(total / p);
        }
    }
    out
}

/// Standard InfoNCE over `ŝ`, requiring every map to be a bijection.
pub fn standard_infonce(batch: &Batch, sigmas: &[Assignment]) -> Result<f64> {
    if sigmas.len() != batch.len() {
        return Err(Error::InvalidBatch(format!(
            "{} assignments for {} items",
            sigmas.len(),
            batch.len()
        )));
    }
    if let Some(item) = sigmas
        .iter()
        .position(|s| !s.bijective || s.map.len() != batch.tokens())
    {
        return Err(Error::NonBijectiveSigma { item });
    }
    Ok(infonce_from_scores(
        &hat_scores(batch, sigmas),
        batch.len(),
        batch.tau(),
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundReport {
    pub loss_maxsim: f64,
    pub loss_standard: f64,
    pub gap: f64,
    pub p1: f64,
    pub p2: f64,
    /// `(N − 1)·exp((p2 − p1)/τ)`; infinite when the exponent overflows.
    pub bound: f64,
    /// Natural log of `bound` (`-inf` for `N = 1`), finite far past overflow.
    pub log_bound: f64,
    pub assumption_holds: bool,
    pub proposition_ok: bool,
    pub corollary_ok: bool,
    pub n: usize,
    pub p: usize,
    pub d: usize,
    pub tau: f64,
}

const VERDICT_SLACK: f64 = 1e-9;

/// Evaluates both objectives on `batch` with per-item argmax maps.
///
/// Non-bijective maps still produce `ŝ`; `assumption_holds` records
/// whether all maps were bijections.
pub fn verify_bounds(batch: &Batch) -> BoundReport {
    let n = batch.len();
    let tau = batch.tau();
    let sigmas: Vec<Assignment> = batch
        .queries()
        .iter()
        .zip(batch.targets())
        .map(|(u, v)| argmax_assignment(u, v))
        .collect();
    let assumption_holds = sigmas.iter().all(|s| s.bijective);

    let scores = batch.scores();
    let loss_maxsim = infonce_from_scores(&scores, n, tau);
    let loss_standard = infonce_from_scores(&hat_scores(batch, &sigmas), n, tau);
    let gap = loss_standard - loss_maxsim;

    let p1 = (0..n).map(|i| scores[i * n + i]).fold(f64::INFINITY, f64::min);
    let p2 = if n == 1 {
        p1
    } else {
        (0..n * n)
            .filter(|k| k / n != k % n)
            .map(|k| scores[k])
            .fold(f64::NEG_INFINITY, f64::max)
    };
    let exponent = (p2 - p1) / tau;
    let bound = (n - 1) as f64 * exponent.exp();
    let log_bound = ((n - 1) as f64).ln() + exponent;

    BoundReport {
        loss_maxsim,
        loss_standard,
        gap,
        p1,
        p2,
        bound,
        log_bound,
        assumption_holds,
        proposition_ok: loss_maxsim <= loss_standard + VERDICT_SLACK,
        corollary_ok: gap <= bound + VERDICT_SLACK,
        n,
        p: batch.tokens(),
        d: batch.dim(),
        tau,
    }
}

/// Pairs each query stack with a row-shuffled, perturbed copy of itself.
///
/// Target `i` is `U_i` with its token rows permuted at random, plus
/// `noise · N(0, 1)` per coordinate, then renormalized. Row shuffles and
/// noise come from one ChaCha stream seeded by `seed`.
pub fn noisy_permutation_batch(queries: Vec<TokenMatrix<f64>>, noise: f64, tau: f64, seed: u64) -> Result<Batch> {
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(Error::InvalidBatch(format!(
            "noise {noise} must be finite and non-negative"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let queries = queries
        .iter()
        .map(TokenMatrix::normalized)
        .collect::<Result<Vec<_>>>()?;
    let mut targets = Vec::with_capacity(queries.len());
    for u in &queries {
        let mut order: Vec<usize> = (0..u.tokens()).collect();
        order.shuffle(&mut rng);
        let shuffled = u.permute_rows(&order)?;
        let data = shuffled
            .as_slice()
            .iter()
            .map(|&x| {
                let z: f64 = StandardNormal.sample(&mut rng);
                x + noise * z
            })
            .collect();
        targets.push(TokenMatrix::from_flat(u.tokens(), u.dim(), data)?);
    }
    Batch::new(queries, targets, tau)
}

/// `n` stacks of `p` standard-normal tokens in `R^d`, normalized.
pub fn random_stacks(n: usize, p: usize, d: usize, seed: u64) -> Result<Vec<TokenMatrix<f64>>> {
    if n == 0 || p == 0 || d == 0 {
        return Err(Error::InvalidBatch(format!("empty shape {n}x{p}x{d}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let data = (0..p * d).map(|_| StandardNormal.sample(&mut rng)).collect();
            TokenMatrix::from_flat(p, d, data)?.normalized()
        })
        .collect()
}
