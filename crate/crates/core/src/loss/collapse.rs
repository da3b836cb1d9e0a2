//! Full-batch projected gradient ascent on the MaxSim InfoNCE objective,
//! tracking how far the optimized stacks are from a simplex ETF.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use super::bounds::argmax_assignment;
use super::grad::gradient;
use super::infonce_from_scores;
use crate::error::{Error, Result};
use crate::maxsim::score_pairs;
use crate::tokens::TokenMatrix;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CollapseConfig {
    pub m: usize,
    pub p: usize,
    pub d: usize,
    pub tau: f64,
    pub steps: usize,
    pub step_size: f64,
    pub seed: u64,
    /// Ties the target stacks to the query stacks (`V = U` throughout).
    pub tie_v_to_u: bool,
}

impl Default for CollapseConfig {
    fn default() -> Self {
        Self {
            m: 8,
            p: 1,
            d: 8,
            tau: 0.1,
            steps: 5000,
            step_size: 0.5,
            seed: 11,
            tie_v_to_u: false,
        }
    }
}

impl CollapseConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.m < 2 {
            return bad(format!("collapse needs at least 2 items, got {}", self.m));
        }
        if self.p == 0 || self.d == 0 {
            return bad(format!("empty token shape {}x{}", self.p, self.d));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad(format!("temperature {} must be positive and finite", self.tau));
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return bad(format!("step size {} must be positive and finite", self.step_size));
        }
        if self.d * self.p < self.m - 1 {
            return bad(format!("d*p = {} is below m - 1 = {}", self.d * self.p, self.m - 1));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TraceRow {
    pub step: usize,
    pub objective: f64,
    pub etf_error: f64,
    pub alignment_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CollapseReport {
    pub final_objective: f64,
    pub etf_error: f64,
    pub alignment_error: f64,
    /// State before the first step, then after every step.
    pub objective_trace: Vec<TraceRow>,
    pub config: CollapseConfig,
}

impl CollapseReport {
    /// Checks that the objective never drops by more than `slack` between
    /// consecutive steps once the first `warmup` fraction of steps has passed.
    pub fn is_monotone_after(&self, warmup: f64, slack: f64) -> bool {
        let start = (self.config.steps as f64 * warmup).ceil() as usize;
        self.objective_trace
            .windows(2)
            .filter(|w| w[0].step >= start)
            .all(|w| w[1].objective >= w[0].objective - slack)
    }

    pub fn trace_csv(&self) -> String {
        let mut out = String::from("step,objective,etf_error,alignment_error\n");
        for r in &self.objective_trace {
            out.push_str(&format!(
                "{},{:.12e},{:.12e},{:.12e}\n",
                r.step, r.objective, r.etf_error, r.alignment_error
            ));
        }
        out
    }
}

/// Flattened `(1/√p)`-scaled stack as one vector of length `p·d`.
fn flat(m: &TokenMatrix<f64>) -> Vec<f64> {
    let scale = 1.0 / (m.tokens() as f64).sqrt();
    m.as_slice().iter().map(|v| v * scale).collect()
}

/// `max_{i≠j} |⟨Û_i, Û_j⟩ + 1/(M−1)|`.
pub fn etf_error(stacks: &[TokenMatrix<f64>]) -> f64 {
    let m = stacks.len();
    let target = -1.0 / (m as f64 - 1.0);
    let flats: Vec<Vec<f64>> = stacks.iter().map(flat).collect();
    let mut worst = 0.0f64;
    for i in 0..m {
        for j in i + 1..m {
            let ip: f64 = flats[i].iter().zip(&flats[j]).map(|(a, b)| a * b).sum();
            worst = worst.max((ip - target).abs());
        }
    }
    worst
}

/// `max_i ‖Û_i − V̂_i‖`, with the rows of `V_i` taken in the order of the
/// argmax map from `U_i`.
pub fn alignment_error(queries: &[TokenMatrix<f64>], targets: &[TokenMatrix<f64>]) -> f64 {
    queries
        .iter()
        .zip(targets)
        .map(|(u, v)| {
            let sigma = argmax_assignment(u, v);
            let v = v.permute_rows(&sigma.map).expect("map entries index v");
            flat(u)
                .iter()
                .zip(flat(&v))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
        })
        .fold(0.0, f64::max)
}

fn random_stacks(rng: &mut ChaCha8Rng, m: usize, p: usize, d: usize) -> Result<Vec<TokenMatrix<f64>>> {
    (0..m)
        .map(|_| {
            let data = (0..p * d).map(|_| StandardNormal.sample(&mut *rng)).collect();
            TokenMatrix::from_flat(p, d, data)?.normalized()
        })
        .collect()
}

fn objective(queries: &[TokenMatrix<f64>], targets: &[TokenMatrix<f64>], tau: f64) -> f64 {
    let scores = score_pairs(queries, targets).expect("uniform stacks");
    infonce_from_scores(&scores, queries.len(), tau)
}

fn ascend(stacks: &mut [TokenMatrix<f64>], grads: &[Vec<f64>], extra: Option<&[Vec<f64>]>, eta: f64) -> Result<()> {
    for (i, m) in stacks.iter_mut().enumerate() {
        let data = m
            .as_slice()
            .iter()
            .enumerate()
            .map(|(k, x)| {
                let g = grads[i][k] + extra.map_or(0.0, |e| e[i][k]);
                x + eta * g
            })
            .collect();
        *m = TokenMatrix::from_flat(m.tokens(), m.dim(), data)?.normalized()?;
    }
    Ok(())
}

/// Runs the ascent described by `cfg` and reports the final geometry.
///
/// Argmax ties take the smallest index rather than aborting.
pub fn collapse_lab(cfg: &CollapseConfig) -> Result<CollapseReport> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut u = random_stacks(&mut rng, cfg.m, cfg.p, cfg.d)?;
    let mut v = if cfg.tie_v_to_u {
        u.clone()
    } else {
        random_stacks(&mut rng, cfg.m, cfg.p, cfg.d)?
    };

    let row = |step: usize, u: &[TokenMatrix<f64>], v: &[TokenMatrix<f64>]| TraceRow {
        step,
        objective: objective(u, v, cfg.tau),
        etf_error: etf_error(u),
        alignment_error: alignment_error(u, v),
    };
    let mut trace = Vec::with_capacity(cfg.steps + 1);
    trace.push(row(0, &u, &v));
    for step in 1..=cfg.steps {
        let g = gradient(&u, &v, cfg.tau, false)?;
        if cfg.tie_v_to_u {
            ascend(&mut u, &g.queries, Some(&g.targets), cfg.step_size)?;
            v.clone_from(&u);
        } else {
            ascend(&mut u, &g.queries, None, cfg.step_size)?;
            ascend(&mut v, &g.targets, None, cfg.step_size)?;
        }
        trace.push(row(step, &u, &v));
    }
    let last = *trace.last().expect("trace holds the initial state");
    Ok(CollapseReport {
        final_objective: last.objective,
        etf_error: last.etf_error,
        alignment_error: last.alignment_error,
        objective_trace: trace,
        config: cfg.clone(),
    })
}
