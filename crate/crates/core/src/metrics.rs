//! Misclassification and parameter RMSE after resolving label switching.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::HmmParams;

const MAX_EXHAUSTIVE: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub misclass: f64,
    pub rmse_gamma: f64,
    pub rmse_delta: f64,
    pub rmse_mu: f64,
    pub rmse_sigma: f64,
    /// `permutation[s]` is the fitted label matched to true state `s`.
    pub permutation: Vec<usize>,
}

/// All permutations of `0..m` in lexicographic order.
pub fn permutations(m: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur: Vec<usize> = (0..m).collect();
    loop {
        out.push(cur.clone());
        // next lexicographic permutation
        let Some(i) = (0..m.saturating_sub(1)).rev().find(|&i| cur[i] < cur[i + 1]) else {
            break;
        };
        let j = (i + 1..m).rev().find(|&j| cur[j] > cur[i]).unwrap();
        cur.swap(i, j);
        cur[i + 1..].reverse();
    }
    out
}

/// Fraction of cells with `truth < m` whose decoded label disagrees with
/// `perm[truth]`. Dropped cells (`truth == m`) are skipped.
pub fn misclassification(decoded: &[usize], truth: &[usize], m: usize, perm: &[usize]) -> f64 {
    let mut wrong = 0usize;
    let mut total = 0usize;
    for (&d, &t) in decoded.iter().zip(truth) {
        if t >= m {
            continue;
        }
        total += 1;
        if d != perm[t] {
            wrong += 1;
        }
    }
    if total == 0 {
        0.0
    } else {
        wrong as f64 / total as f64
    }
}

/// Label permutation minimizing misclassification; the first minimum in
/// lexicographic order wins.
pub fn best_permutation(decoded: &[usize], truth: &[usize], m: usize) -> Result<(Vec<usize>, f64)> {
    if m > MAX_EXHAUSTIVE {
        return Err(Error::InvalidInput(format!("label matching supports at most {MAX_EXHAUSTIVE} states")));
    }
    let mut best: Option<(Vec<usize>, f64)> = None;
    for perm in permutations(m) {
        let mc = misclassification(decoded, truth, m, &perm);
        if best.as_ref().map_or(true, |(_, b)| mc < *b) {
            best = Some((perm, mc));
        }
    }
    Ok(best.expect("at least one permutation"))
}

fn rmse(diffs: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = diffs.fold((0.0, 0usize), |(s, n), d| (s + d * d, n + 1));
    if n == 0 {
        0.0
    } else {
        (sum / n as f64).sqrt()
    }
}

/// Scores a fit against the generating parameters.
///
/// RMSE entry sets: `Γ` over the regular rows (with the dropout column when
/// both models carry one), `δ` over regular entries, `μ` over all `m·p`
/// entries and `Σ` over the upper triangle including the diagonal.
pub fn score(decoded: &[usize], truth_states: &[usize], fitted: &HmmParams, truth: &HmmParams) -> Result<ScoreReport> {
    let m = truth.m;
    if fitted.m != m {
        return Err(Error::InvalidInput(format!("fitted model has {} states, truth has {m}", fitted.m)));
    }
    if decoded.len() != truth_states.len() {
        return Err(Error::InvalidInput("decoded and true state sequences differ in length".into()));
    }
    let (perm, misclass) = best_permutation(decoded, truth_states, m)?;
    let aligned = fitted.permuted(&perm);
    let cols = if aligned.dropout && truth.dropout { m + 1 } else { m };
    let rmse_gamma = rmse((0..m).flat_map(|a| (0..cols).map(move |b| (a, b))).map(|(a, b)| aligned.gamma[(a, b)] - truth.gamma[(a, b)]));
    let rmse_delta = rmse((0..m).map(|j| aligned.delta[j] - truth.delta[j]));
    let rmse_mu = rmse((0..m).flat_map(|j| aligned.mu[j].iter().zip(truth.mu[j].iter()).map(|(a, b)| a - b).collect::<Vec<_>>()));
    let rmse_sigma = rmse((0..m).flat_map(|j| {
        let (a, b) = (aligned.sigma(j), truth.sigma(j));
        let p = a.nrows();
        (0..p).flat_map(move |r| (r..p).map(move |c| (r, c))).map(move |(r, c)| a[(r, c)] - b[(r, c)]).collect::<Vec<_>>()
    }));
    Ok(ScoreReport {
        misclass,
        rmse_gamma,
        rmse_delta,
        rmse_mu,
        rmse_sigma,
        permutation: perm,
    })
}
