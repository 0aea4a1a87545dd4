//! Absorbing dropout state: detection from the mask and the transition
//! update that keeps the absorbing structure intact.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::forward_backward::Posteriors;

/// Chain size bookkeeping for the optional absorbing state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DropoutAugmentation {
    pub enabled: bool,
    pub m: usize,
}

impl DropoutAugmentation {
    pub fn new(m: usize, enabled: bool) -> Self {
        DropoutAugmentation { enabled, m }
    }

    /// `m + 1` with the absorbing state, `m` otherwise.
    pub fn k(&self) -> usize {
        self.m + usize::from(self.enabled)
    }

    /// Forces `δ[K] = 0` and the absorbing row of `Γ` to a unit vector.
    pub fn enforce(&self, delta: &mut [f64], gamma: &mut DMatrix<f64>) {
        if !self.enabled {
            return;
        }
        let a = self.m;
        delta[a] = 0.0;
        let total: f64 = delta.iter().sum();
        if total > 0.0 {
            delta.iter_mut().for_each(|d| *d /= total);
        }
        gamma.row_mut(a).fill(0.0);
        gamma[(a, a)] = 1.0;
    }
}

/// First dropped time index (0-based) per subject: the start of the trailing
/// run of all-missing rows, if that run starts after the first time point.
/// Interior all-missing rows followed by observations are not dropout.
///
/// `mask` is `[i][t][j]` with `true` marking a missing cell.
pub fn detect_dropout(mask: &[bool], n: usize, n_times: usize, p: usize) -> Result<Vec<Option<usize>>> {
    if mask.len() != n * n_times * p {
        return Err(Error::InvalidInput(format!(
            "mask has {} cells, expected {}",
            mask.len(),
            n * n_times * p
        )));
    }
    let row_missing = |i: usize, t: usize| {
        let o = (i * n_times + t) * p;
        mask[o..o + p].iter().all(|&m| m)
    };
    (0..n)
        .map(|i| {
            let mut start = n_times;
            while start > 0 && row_missing(i, start - 1) {
                start -= 1;
            }
            match start {
                0 => Err(Error::Data(format!(
                    "subject {} has no observed values; dropout can only occur after the first time point",
                    i + 1
                ))),
                s if s == n_times => Ok(None),
                s => Ok(Some(s)),
            }
        })
        .collect()
}

/// Updated initial distribution and transition matrix, plus notes about
/// rows that had no posterior mass.
#[derive(Debug, Clone)]
pub struct TransitionUpdate {
    pub delta: Vec<f64>,
    pub gamma: DMatrix<f64>,
    pub flags: Vec<String>,
}

/// `δ_j = (1/n) Σ_i û_i1j` and `γ_jk ∝ Σ_i Σ_{t≥2} v̂_itjk`, with the
/// absorbing structure imposed afterwards.
pub fn mstep_transition(post: &Posteriors, aug: DropoutAugmentation) -> TransitionUpdate {
    let (n, nt, k) = (post.n, post.n_times, post.k);
    debug_assert_eq!(k, aug.k());
    let mut delta = vec![0.0; k];
    for i in 0..n {
        for (d, u) in delta.iter_mut().zip(post.u(i, 0)) {
            *d += u;
        }
    }
    delta.iter_mut().for_each(|d| *d /= n as f64);

    let mut counts = DMatrix::<f64>::zeros(k, k);
    for i in 0..n {
        for t in 1..nt {
            for j in 0..k {
                for l in 0..k {
                    counts[(j, l)] += post.v(i, t, j, l);
                }
            }
        }
    }
    let mut flags = Vec::new();
    let mut gamma = DMatrix::<f64>::zeros(k, k);
    for j in 0..aug.m {
        let total: f64 = counts.row(j).sum();
        if total > 0.0 {
            for l in 0..k {
                gamma[(j, l)] = counts[(j, l)] / total;
            }
        } else {
            flags.push(format!("state {}: no transition mass, uniform row used", j + 1));
            gamma.row_mut(j).fill(1.0 / k as f64);
        }
    }
    aug.enforce(&mut delta, &mut gamma);
    TransitionUpdate { delta, gamma, flags }
}
