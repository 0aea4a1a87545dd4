//! M-step for the means and the `(T_j, D_j)` factors of all eight members.
//!
//! Up to constants the Gaussian part of the expected complete-data
//! log-likelihood is
//!
//! ```text
//! Q = -Σ_j n_j/2 [ log|D_j| + tr(T_j S_j T_j' D_j⁻¹) ]
//! ```
//!
//! Row `r` of `T` only enters through `Σ_j n_j t_r' S_j t_r / d_r^(j)`, so the
//! free part of each row solves an `(r-1)`-dimensional linear system. When
//! the divisor `d_r^(j)` does not vary with `j` it cancels from the system
//! and `T` is independent of `D`; this holds for every member except EVA and
//! EVI, which are updated by one conditional-maximization cycle at the
//! current `D_j`.

use nalgebra::{DMatrix, DVector};

use crate::cholesky::{symmetrize, ModChol};
use crate::error::{Error, Result};
use crate::forward_backward::Posteriors;
use crate::missingness::ImputedMoments;
use crate::types::{ModelStructure, PanelDataset};

/// Relative floor for innovation variances.
const D_FLOOR: f64 = 1e-10;
const EMPTY_STATE: f64 = 1e-10;

/// Posterior-weighted scatter matrices about the updated means.
#[derive(Debug, Clone)]
pub struct WeightedScatter {
    pub s: Vec<DMatrix<f64>>,
    /// Effective count per regular state, `Σ_{i,t} û_itj`.
    pub n_j: Vec<f64>,
    /// `n_j / Σ_k n_k`
    pub pi: Vec<f64>,
    pub total: f64,
    pub warnings: Vec<String>,
}

impl WeightedScatter {
    pub fn new(s: Vec<DMatrix<f64>>, n_j: Vec<f64>) -> Self {
        let total: f64 = n_j.iter().sum();
        let pi = n_j.iter().map(|v| v / total).collect();
        WeightedScatter {
            s,
            n_j,
            pi,
            total,
            warnings: Vec::new(),
        }
    }

    pub fn m(&self) -> usize {
        self.s.len()
    }

    pub fn p(&self) -> usize {
        self.s.first().map_or(0, |s| s.nrows())
    }

    /// `Σ_j π_j S_j`
    pub fn pooled(&self) -> DMatrix<f64> {
        let p = self.p();
        self.s
            .iter()
            .zip(&self.pi)
            .fold(DMatrix::zeros(p, p), |acc, (s, &w)| acc + s * w)
    }
}

/// Weighted means of the conditional expectations, and the scatter of the
/// conditional second moments about those means. The dropout state carries
/// no emission parameters and is skipped.
pub fn update_mean_and_scatter(
    data: &PanelDataset,
    post: &Posteriors,
    moments: &ImputedMoments,
    prev_mu: &[DVector<f64>],
) -> (Vec<DVector<f64>>, WeightedScatter) {
    let (m, p, nt) = (moments.m, data.p, data.n_times);
    let mut n_j = vec![0.0; m];
    let mut sums = vec![DVector::<f64>::zeros(p); m];
    for i in 0..data.n {
        for t in 0..nt {
            let u = post.u(i, t);
            for j in 0..m {
                let w = u[j];
                if w == 0.0 {
                    continue;
                }
                n_j[j] += w;
                let e = moments.mean(i, t, j);
                for a in 0..p {
                    sums[j][a] += w * e[a];
                }
            }
        }
    }
    let mut warnings = Vec::new();
    let mu: Vec<DVector<f64>> = (0..m)
        .map(|j| {
            if n_j[j] > EMPTY_STATE {
                &sums[j] / n_j[j]
            } else {
                warnings.push(format!("state {}: no posterior mass, mean kept", j + 1));
                prev_mu[j].clone()
            }
        })
        .collect();
    let mut s = vec![DMatrix::<f64>::zeros(p, p); m];
    let mut dev = vec![0.0; p];
    for i in 0..data.n {
        for t in 0..nt {
            let u = post.u(i, t);
            for j in 0..m {
                let w = u[j];
                if w == 0.0 {
                    continue;
                }
                let e = moments.mean(i, t, j);
                for a in 0..p {
                    dev[a] = e[a] - mu[j][a];
                }
                let sj = &mut s[j];
                for a in 0..p {
                    for b in 0..=a {
                        let v = w * (moments.var(i, t, j, a, b) + dev[a] * dev[b]);
                        sj[(a, b)] += v;
                    }
                }
            }
        }
    }
    for j in 0..m {
        let sj = &mut s[j];
        for a in 0..p {
            for b in 0..a {
                sj[(b, a)] = sj[(a, b)];
            }
        }
        if n_j[j] > EMPTY_STATE {
            *sj /= n_j[j];
        }
        if n_j[j] < p as f64 {
            warnings.push(format!(
                "state {}: effective count {:.3} below dimension {p}",
                j + 1,
                n_j[j]
            ));
        }
    }
    // empty states borrow the pooled scatter so the solvers stay defined
    let total: f64 = n_j.iter().sum();
    if n_j.iter().any(|&v| v <= EMPTY_STATE) && total > EMPTY_STATE {
        let mut pooled = DMatrix::zeros(p, p);
        for j in 0..m {
            pooled += &s[j] * (n_j[j] / total);
        }
        for j in 0..m {
            if n_j[j] <= EMPTY_STATE {
                s[j] = pooled.clone();
            }
        }
    }
    let mut scatter = WeightedScatter::new(s, n_j);
    scatter.warnings = warnings;
    (mu, scatter)
}

/// Estimated factors plus notes about fallbacks taken.
#[derive(Debug, Clone)]
pub struct CovFit {
    pub chol: Vec<ModChol>,
    pub flags: Vec<String>,
}

/// Autoregressive rows of `T` from a symmetric weight matrix `w`.
///
/// Row `r` solves `w[..r, ..r] φ = -w[r, ..r]`. A singular subsystem falls
/// back to the minimum-norm least-squares solution and is reported.
fn solve_rows(w: &DMatrix<f64>, state: usize, flags: &mut Vec<String>) -> Result<DMatrix<f64>> {
    let p = w.nrows();
    let mut t = DMatrix::identity(p, p);
    for r in 1..p {
        let a = w.view((0, 0), (r, r)).into_owned();
        let b = -w.view((r, 0), (1, r)).transpose();
        let phi = match a.clone().cholesky() {
            Some(ch) => ch.solve(&b),
            None => {
                flags.push(format!("state {}, row {}: singular system, least-squares fallback", state + 1, r + 1));
                let svd = a.svd(true, true);
                let eps = 1e-12 * svd.singular_values.max().max(f64::MIN_POSITIVE);
                svd.solve(&b, eps)
                    .map_err(|_| Error::SingularRowSystem { state: state + 1, row: r + 1 })?
            }
        };
        if phi.iter().any(|v| !v.is_finite()) {
            return Err(Error::SingularRowSystem { state: state + 1, row: r + 1 });
        }
        for c in 0..r {
            t[(r, c)] = phi[c];
        }
    }
    Ok(t)
}

/// Row-`r` system with a per-state divisor: `Σ_j π_j S_j / d_r^(j)`.
fn solve_rows_weighted(
    scatter: &WeightedScatter,
    divisors: &[DVector<f64>],
    flags: &mut Vec<String>,
) -> Result<DMatrix<f64>> {
    let p = scatter.p();
    let mut t = DMatrix::identity(p, p);
    for r in 1..p {
        let mut kappa = DMatrix::<f64>::zeros(r + 1, r + 1);
        for (j, s) in scatter.s.iter().enumerate() {
            let w = scatter.pi[j] / divisors[j][r];
            kappa += s.view((0, 0), (r + 1, r + 1)) * w;
        }
        let row = solve_rows(&kappa, 0, flags)?;
        for c in 0..r {
            t[(r, c)] = row[(r, c)];
        }
    }
    Ok(t)
}

/// `diag(T S T')`
pub fn innovation_diag(t: &DMatrix<f64>, s: &DMatrix<f64>) -> DVector<f64> {
    let ts = t * s;
    DVector::from_fn(t.nrows(), |r, _| ts.row(r).dot(&t.row(r)))
}

fn floor_d(mut d: DVector<f64>, scale: f64, state: usize, flags: &mut Vec<String>) -> DVector<f64> {
    let floor = D_FLOOR * scale.max(f64::MIN_POSITIVE);
    for v in d.iter_mut() {
        if !(*v > floor) {
            flags.push(format!("state {}: innovation variance floored", state + 1));
            *v = floor;
        }
    }
    d
}

fn scatter_scale(scatter: &WeightedScatter) -> f64 {
    scatter
        .s
        .iter()
        .flat_map(|s| (0..s.nrows()).map(move |i| s[(i, i)]))
        .fold(0.0, f64::max)
}

fn per_state_t(scatter: &WeightedScatter, flags: &mut Vec<String>) -> Result<Vec<DMatrix<f64>>> {
    scatter
        .s
        .iter()
        .enumerate()
        .map(|(j, s)| solve_rows(s, j, flags))
        .collect()
}

/// Unconstrained: `T_j` from the row systems in `S_j`, `D_j = diag(T_j S_j T_j')`.
pub fn solve_vva(scatter: &WeightedScatter) -> Result<CovFit> {
    let mut flags = Vec::new();
    let scale = scatter_scale(scatter);
    let ts = per_state_t(scatter, &mut flags)?;
    let chol = ts
        .into_iter()
        .enumerate()
        .map(|(j, t)| {
            let d = floor_d(innovation_diag(&t, &scatter.s[j]), scale, j, &mut flags);
            ModChol { t, d }
        })
        .collect();
    Ok(CovFit { chol, flags })
}

/// Per-state `T_j`, shared anisotropic `D = Σ_j π_j diag(T_j S_j T_j')`.
pub fn solve_vea(scatter: &WeightedScatter) -> Result<CovFit> {
    let mut flags = Vec::new();
    let scale = scatter_scale(scatter);
    let ts = per_state_t(scatter, &mut flags)?;
    let p = scatter.p();
    let mut d = DVector::zeros(p);
    for (j, t) in ts.iter().enumerate() {
        d += innovation_diag(t, &scatter.s[j]) * scatter.pi[j];
    }
    let d = floor_d(d, scale, 0, &mut flags);
    let chol = ts.into_iter().map(|t| ModChol { t, d: d.clone() }).collect();
    Ok(CovFit { chol, flags })
}

/// Per-state `T_j`, `D_j = δ_j I` with `δ_j = tr(T_j S_j T_j') / p`.
pub fn solve_vvi(scatter: &WeightedScatter) -> Result<CovFit> {
    let mut flags = Vec::new();
    let scale = scatter_scale(scatter);
    let p = scatter.p();
    let ts = per_state_t(scatter, &mut flags)?;
    let chol = ts
        .into_iter()
        .enumerate()
        .map(|(j, t)| {
            let delta = innovation_diag(&t, &scatter.s[j]).sum() / p as f64;
            let d = floor_d(DVector::from_element(p, delta), scale, j, &mut flags);
            ModChol { t, d }
        })
        .collect();
    Ok(CovFit { chol, flags })
}

/// Per-state `T_j`, shared `δ I` with `δ = Σ_j π_j tr(T_j S_j T_j') / p`.
pub fn solve_vei(scatter: &WeightedScatter) -> Result<CovFit> {
    let mut flags = Vec::new();
    let scale = scatter_scale(scatter);
    let p = scatter.p();
    let ts = per_state_t(scatter, &mut flags)?;
    let delta: f64 = ts
        .iter()
        .enumerate()
        .map(|(j, t)| scatter.pi[j] * innovation_diag(t, &scatter.s[j]).sum())
        .sum::<f64>()
        / p as f64;
    let d = floor_d(DVector::from_element(p, delta), scale, 0, &mut flags);
    let chol = ts.into_iter().map(|t| ModChol { t, d: d.clone() }).collect();
    Ok(CovFit { chol, flags })
}

/// Shared `T` from the pooled `κ` systems, shared anisotropic
/// `D = Σ_j π_j diag(T S_j T')`.
pub fn solve_eea(scatter: &WeightedScatter) -> Result<CovFit> {
    let mut flags = Vec::new();
    let scale = scatter_scale(scatter);
    let t = solve_rows(&scatter.pooled(), 0, &mut flags)?;
    let p = scatter.p();
    let mut d = DVector::zeros(p);
    for (j, s) in scatter.s.iter().enumerate() {
        d += innovation_diag(&t, s) * scatter.pi[j];
    }
    let d = floor_d(d, scale, 0, &mut flags);
    let pair = ModChol { t, d };
    Ok(CovFit {
        chol: vec![pair; scatter.m()],
        flags,
    })
}

/// Shared `T` from the pooled `κ` systems, `δ = Σ_j π_j tr(T S_j T') / p`.
pub fn solve_eei(scatter: &WeightedScatter) -> Result<CovFit> {
    let mut flags = Vec::new();
    let scale = scatter_scale(scatter);
    let p = scatter.p();
    let t = solve_rows(&scatter.pooled(), 0, &mut flags)?;
    let delta: f64 = scatter
        .s
        .iter()
        .enumerate()
        .map(|(j, s)| scatter.pi[j] * innovation_diag(&t, s).sum())
        .sum::<f64>()
        / p as f64;
    let d = floor_d(DVector::from_element(p, delta), scale, 0, &mut flags);
    let pair = ModChol { t, d };
    Ok(CovFit {
        chol: vec![pair; scatter.m()],
        flags,
    })
}

fn ecm_start(scatter: &WeightedScatter, prev: Option<&[ModChol]>, isotropic: bool) -> Result<Vec<DVector<f64>>> {
    if let Some(prev) = prev.filter(|p| p.len() == scatter.m()) {
        return Ok(prev.iter().map(|c| c.d.clone()).collect());
    }
    let start = solve_vva(scatter)?;
    Ok(start
        .chol
        .into_iter()
        .map(|c| {
            if isotropic {
                DVector::from_element(c.d.len(), c.d.mean())
            } else {
                c.d
            }
        })
        .collect())
}

/// One conditional cycle for shared `T` with per-state anisotropic `D_j`:
/// rows of `T` from `Σ_j π_j S_j / d_r^(j)` at the current `D_j`, then
/// `D_j = diag(T S_j T')`.
pub fn solve_eva(scatter: &WeightedScatter, prev: Option<&[ModChol]>) -> Result<CovFit> {
    let mut flags = Vec::new();
    let scale = scatter_scale(scatter);
    let divisors = ecm_start(scatter, prev, false)?;
    let t = solve_rows_weighted(scatter, &divisors, &mut flags)?;
    let chol = scatter
        .s
        .iter()
        .enumerate()
        .map(|(j, s)| ModChol {
            t: t.clone(),
            d: floor_d(innovation_diag(&t, s), scale, j, &mut flags),
        })
        .collect();
    Ok(CovFit { chol, flags })
}

/// One conditional cycle for shared `T` with `D_j = δ_j I`.
pub fn solve_evi(scatter: &WeightedScatter, prev: Option<&[ModChol]>) -> Result<CovFit> {
    let mut flags = Vec::new();
    let scale = scatter_scale(scatter);
    let p = scatter.p();
    let divisors = ecm_start(scatter, prev, true)?;
    let t = solve_rows_weighted(scatter, &divisors, &mut flags)?;
    let chol = scatter
        .s
        .iter()
        .enumerate()
        .map(|(j, s)| {
            let delta = innovation_diag(&t, s).sum() / p as f64;
            ModChol {
                t: t.clone(),
                d: floor_d(DVector::from_element(p, delta), scale, j, &mut flags),
            }
        })
        .collect();
    Ok(CovFit { chol, flags })
}

/// Dispatches to the solver for `structure`. `prev` seeds the conditional
/// cycle of EVA/EVI and is ignored by the closed-form members.
pub fn solve_member(structure: ModelStructure, scatter: &WeightedScatter, prev: Option<&[ModChol]>) -> Result<CovFit> {
    match structure.code() {
        "VVA" => solve_vva(scatter),
        "VEA" => solve_vea(scatter),
        "VVI" => solve_vvi(scatter),
        "VEI" => solve_vei(scatter),
        "EEA" => solve_eea(scatter),
        "EEI" => solve_eei(scatter),
        "EVA" => solve_eva(scatter, prev),
        "EVI" => solve_evi(scatter, prev),
        _ => unreachable!("eight members"),
    }
}

/// Gaussian part of the expected complete-data log-likelihood divided by the
/// total weight, without the `2π` constant.
pub fn gaussian_q(scatter: &WeightedScatter, chol: &[ModChol]) -> f64 {
    scatter
        .s
        .iter()
        .zip(chol)
        .zip(&scatter.pi)
        .map(|((s, c), &w)| {
            let diag = innovation_diag(&c.t, s);
            let tr: f64 = diag.iter().zip(c.d.iter()).map(|(a, d)| a / d).sum();
            -0.5 * w * (c.log_det() + tr)
        })
        .sum()
}

/// Largest absolute entry of the score equations at `chol`, per unit weight.
///
/// The `T` score is the strict lower triangle of `-Σ_j π_j D_j⁻¹ T_j S_j`
/// (summed over states when `T` is shared); the `D` score is the derivative
/// with respect to `D⁻¹`, `π_j/2 (D_j − T_j S_j T_j')` on the diagonal,
/// summed over states when `D` is shared and traced when isotropic.
pub fn score_residual(structure: ModelStructure, scatter: &WeightedScatter, chol: &[ModChol]) -> f64 {
    let (m, p) = (scatter.m(), scatter.p());
    let mut worst: f64 = 0.0;
    let t_scores: Vec<DMatrix<f64>> = (0..m)
        .map(|j| {
            let c = &chol[j];
            let mut g = &c.t * &scatter.s[j];
            for r in 0..p {
                let w = -scatter.pi[j] / c.d[r];
                g.row_mut(r).scale_mut(w);
            }
            g
        })
        .collect();
    let lower_max = |g: &DMatrix<f64>| {
        let mut v: f64 = 0.0;
        for r in 0..p {
            for c in 0..r {
                v = v.max(g[(r, c)].abs());
            }
        }
        v
    };
    if structure.shared_t() {
        let total = t_scores.iter().fold(DMatrix::zeros(p, p), |a, g| a + g);
        worst = worst.max(lower_max(&total));
    } else {
        for g in &t_scores {
            worst = worst.max(lower_max(g));
        }
    }
    let d_scores: Vec<DVector<f64>> = (0..m)
        .map(|j| (&chol[j].d - innovation_diag(&chol[j].t, &scatter.s[j])) * (0.5 * scatter.pi[j]))
        .collect();
    let reduce = |v: &DVector<f64>| if structure.isotropic() { v.sum().abs() } else { v.amax() };
    if structure.shared_d() {
        let total = d_scores.iter().fold(DVector::zeros(p), |a, g| a + g);
        worst = worst.max(reduce(&total));
    } else {
        for g in &d_scores {
            worst = worst.max(reduce(g));
        }
    }
    worst
}

/// Symmetric copy used by tests and the scatter builders.
pub fn symmetrized(mut m: DMatrix<f64>) -> DMatrix<f64> {
    symmetrize(&mut m);
    m
}
