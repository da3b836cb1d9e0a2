//! Moderate-similarity target selection.
//!
//! For each reference, the other `n − 1` items are ranked by MaxSim
//! (reference as first argument) and one target is drawn uniformly from
//! the 1-based rank window `[q1, q2]`. The draw for reference `i` uses a
//! ChaCha stream keyed by `(seed, i)`, so selections do not depend on the
//! order or parallelism in which references are processed.

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::maxsim::rank_order;
use crate::tokens::ScoreMatrix;

pub const DEFAULT_Q1: usize = 51;
pub const DEFAULT_Q2: usize = 60;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MiningConfig {
    /// First rank of the window, 1-based over the other items.
    pub q1: usize,
    /// Last rank of the window, inclusive.
    pub q2: usize,
    pub seed: u64,
    /// Whether one item may be the target of several references.
    pub allow_reuse: bool,
}

impl Default for MiningConfig {
    fn default() -> Self {
        Self {
            q1: DEFAULT_Q1,
            q2: DEFAULT_Q2,
            seed: 0,
            allow_reuse: true,
        }
    }
}

impl MiningConfig {
    pub fn window(q1: usize, q2: usize, seed: u64) -> Self {
        Self {
            q1,
            q2,
            seed,
            allow_reuse: true,
        }
    }

    /// Checks `1 ≤ q1 ≤ q2 ≤ others`.
    pub fn validate(&self, others: usize) -> Result<()> {
        if self.q1 == 0 || self.q1 > self.q2 || self.q2 > others {
            return Err(Error::WindowOutOfRange {
                q1: self.q1,
                q2: self.q2,
                others,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetSelection {
    pub ref_id: String,
    pub target_id: String,
    /// Column of the target in the score matrix.
    pub target_index: usize,
    /// 1-based rank of the target among the other items.
    pub rank: usize,
    pub similarity: f64,
}

/// Random stream used for reference `ref_index`.
pub fn selection_rng(seed: u64, ref_index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(ref_index as u64);
    rng
}

fn pick(
    ref_index: usize,
    row: &[f64],
    ids: &[String],
    cfg: &MiningConfig,
    used: Option<&HashSet<usize>>,
) -> Result<TargetSelection> {
    assert_eq!(row.len(), ids.len(), "score row and id list differ in length");
    let others = row.len().saturating_sub(1);
    cfg.validate(others)?;
    let order = rank_order(row, ids, Some(ref_index));
    let available: Vec<usize> = (cfg.q1..=cfg.q2)
        .filter(|&rank| used.is_none_or(|u| !u.contains(&order[rank - 1])))
        .collect();
    if available.is_empty() {
        return Err(Error::WindowExhausted {
            ref_id: ids[ref_index].clone(),
        });
    }
    let mut rng = selection_rng(cfg.seed, ref_index);
    let rank = available[rng.random_range(0..available.len())];
    let target = order[rank - 1];
    Ok(TargetSelection {
        ref_id: ids[ref_index].clone(),
        target_id: ids[target].clone(),
        target_index: target,
        rank,
        similarity: row[target],
    })
}

/// Draws a target for one reference from its score row.
///
/// `row[j]` is the similarity of the reference to item `j` (`row[ref_index]`
/// is the reference itself and is skipped); `ids[j]` breaks score ties.
pub fn select_target(ref_index: usize, row: &[f64], ids: &[String], cfg: &MiningConfig) -> Result<TargetSelection> {
    pick(ref_index, row, ids, cfg, None)
}

/// Selects a target for every row of a square score matrix.
///
/// With `allow_reuse = false`, references are processed in index order and
/// each draw skips targets already taken by earlier references.
pub fn select_targets(scores: &ScoreMatrix, ids: &[String], cfg: &MiningConfig) -> Result<Vec<TargetSelection>> {
    assert_eq!(scores.rows(), scores.cols(), "mining needs a square score matrix");
    cfg.validate(scores.cols().saturating_sub(1))?;
    if cfg.allow_reuse {
        return (0..scores.rows())
            .map(|i| select_target(i, scores.row(i), ids, cfg))
            .collect();
    }
    let mut used = HashSet::new();
    let mut out = Vec::with_capacity(scores.rows());
    for i in 0..scores.rows() {
        let sel = pick(i, scores.row(i), ids, cfg, Some(&used))?;
        used.insert(sel.target_index);
        out.push(sel);
    }
    Ok(out)
}
