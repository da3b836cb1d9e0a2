//! Analytic gradient of the MaxSim InfoNCE objective.
//!
//! With `P` the row softmax of `s/τ`, `∂L/∂s_ij = (δ_ij − P_ij) / (N τ)`.
//! Each `s_ij` touches only the argmax pairs `(u_i^s, v_j^{r*})`, each with
//! weight `1/p`. The gradient with respect to a raw token `x` follows from
//! the gradient `g` with respect to its normalized direction `x̂` as
//! `(g − ⟨g, x̂⟩ x̂) / ‖x‖`; batch tokens are stored normalized, so `‖x‖ = 1`.

use super::{softmax_rows, Batch};
use crate::error::{Error, Result};
use crate::tokens::TokenMatrix;

/// Inner products closer than this to the maximum count as a tie.
pub const TIE_TOL: f64 = 1e-12;

/// Gradient buffers, one flat row-major `p × d` vector per item.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub queries: Vec<Vec<f64>>,
    pub targets: Vec<Vec<f64>>,
}

impl Gradient {
    pub fn max_abs(&self) -> f64 {
        self.queries
            .iter()
            .chain(&self.targets)
            .flatten()
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// Best target token for `u` among the rows of `v`, plus whether the
/// runner-up is within [`TIE_TOL`]. Ties resolve to the smallest index.
pub(crate) fn best_token(u: &[f64], v: &TokenMatrix<f64>) -> (usize, bool) {
    let mut best = f64::NEG_INFINITY;
    let mut arg = 0;
    let mut tie = false;
    for (r, vr) in v.rows().enumerate() {
        let ip = dot(u, vr);
        if ip > best + TIE_TOL {
            tie = (best - ip).abs() <= TIE_TOL;
            best = ip;
            arg = r;
        } else if (ip - best).abs() <= TIE_TOL {
            tie = true;
        }
    }
    (arg, tie)
}

/// Gradient of the objective with respect to every raw token, failing on
/// any argmax tie.
pub fn infonce_maxsim_grad(batch: &Batch) -> Result<Gradient> {
    gradient(batch.queries(), batch.targets(), batch.tau(), true)
}

/// Shared implementation. With `strict = false`, ties take the smallest
/// index (a valid subgradient) instead of failing.
pub(crate) fn gradient(
    queries: &[TokenMatrix<f64>],
    targets: &[TokenMatrix<f64>],
    tau: f64,
    strict: bool,
) -> Result<Gradient> {
    let n = queries.len();
    let (p, d) = (queries[0].tokens(), queries[0].dim());
    let mut gu = vec![vec![0.0; p * d]; n];
    let mut gv = vec![vec![0.0; p * d]; n];

    // Argmax tables: best[(i * n + j) * p + s] = r*.
    let mut best = vec![0usize; n * n * p];
    let mut scores = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let mut total = 0.0;
            for s in 0..p {
                let us = queries[i].row(s);
                let (r, tie) = best_token(us, &targets[j]);
                if tie && strict {
                    return Err(Error::TieDetected {
                        query: i,
                        target: j,
                        token: s,
                    });
                }
                best[(i * n + j) * p + s] = r;
                total += dot(us, targets[j].row(r));
            }
            scores[i * n + j] = total / p as f64;
        }
    }

    let (_, probs) = softmax_rows(&scores, n, tau);
    let scale = 1.0 / (n as f64 * tau * p as f64);
    for i in 0..n {
        for j in 0..n {
            let delta = if i == j { 1.0 } else { 0.0 };
            let w = (delta - probs[i * n + j]) * scale;
            if w == 0.0 {
                continue;
            }
            for s in 0..p {
                let r = best[(i * n + j) * p + s];
                let us = queries[i].row(s);
                let vr = targets[j].row(r);
                for k in 0..d {
                    gu[i][s * d + k] += w * vr[k];
                    gv[j][r * d + k] += w * us[k];
                }
            }
        }
    }

    project(&mut gu, queries);
    project(&mut gv, targets);
    Ok(Gradient {
        queries: gu,
        targets: gv,
    })
}

/// Chains through row normalization at unit-norm rows: removes the radial
/// component of each row gradient.
fn project(grads: &mut [Vec<f64>], points: &[TokenMatrix<f64>]) {
    for (g, m) in grads.iter_mut().zip(points) {
        let d = m.dim();
        for (s, x) in m.rows().enumerate() {
            let gs = &mut g[s * d..(s + 1) * d];
            let radial = dot(gs, x);
            for (gk, xk) in gs.iter_mut().zip(x) {
                *gk -= radial * xk;
            }
        }
    }
}
