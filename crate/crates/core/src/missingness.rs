//! Conditional-Gaussian imputation moments and probit missingness mechanisms.
//!
//! For a cell with observed coordinates `o` and missing coordinates `m`, the
//! state-`j` conditional law of the missing part is Gaussian with mean
//! `μ_m + Σ_mo Σ_oo⁻¹ (x_o − μ_o)` and covariance `Σ_mm − Σ_mo Σ_oo⁻¹ Σ_om`.
//! Everything that depends only on `(state, pattern)` is factored once per
//! E-step in [`PatternCache`].

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::cholesky::{self, log_density};
use crate::error::{Error, Result};
use crate::types::{HmmParams, Mechanism, MissParams, PanelDataset};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Bounds applied to `Φ` before taking logs.
pub const PHI_CLIP: f64 = 1e-12;

const MAX_SCORING_ITERS: usize = 100;
const GRAD_TOL: f64 = 1e-8;
const EMPTY_WEIGHT: f64 = 1e-12;

pub fn norm_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

pub fn norm_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

pub fn norm_quantile(p: f64) -> f64 {
    let x = Normal::new(0.0, 1.0).expect("standard normal").inverse_cdf(p);
    if !x.is_finite() {
        return x;
    }
    // one Newton step against the accurate CDF
    let d = norm_pdf(x);
    if d > 0.0 {
        x - (norm_cdf(x) - p) / d
    } else {
        x
    }
}

#[inline]
fn clipped_cdf(x: f64) -> f64 {
    norm_cdf(x).clamp(PHI_CLIP, 1.0 - PHI_CLIP)
}

/// Bit pattern of missing coordinates.
pub type PatternKey = u64;

pub fn pattern_key(mask_row: &[bool]) -> PatternKey {
    mask_row
        .iter()
        .enumerate()
        .fold(0, |acc, (j, &m)| if m { acc | (1 << j) } else { acc })
}

fn pattern_label(key: PatternKey, p: usize) -> String {
    (0..p).map(|j| if key & (1 << j) != 0 { 'M' } else { 'O' }).collect()
}

/// State-`j` quantities for one missingness pattern.
#[derive(Debug, Clone)]
pub struct PatternFactor {
    pub obs: Vec<usize>,
    pub mis: Vec<usize>,
    /// Lower Cholesky factor of `Σ_oo`.
    chol_oo: DMatrix<f64>,
    log_det_oo: f64,
    /// `Σ_mo Σ_oo⁻¹`
    coef: DMatrix<f64>,
    /// `Σ_mm − Σ_mo Σ_oo⁻¹ Σ_om`
    cond_cov: DMatrix<f64>,
}

impl PatternFactor {
    fn build(sigma: &DMatrix<f64>, key: PatternKey, state: usize) -> Result<Self> {
        let p = sigma.nrows();
        let obs: Vec<usize> = (0..p).filter(|j| key & (1 << j) == 0).collect();
        let mis: Vec<usize> = (0..p).filter(|j| key & (1 << j) != 0).collect();
        let soo = sigma.select_rows(&obs).select_columns(&obs);
        let smo = sigma.select_rows(&mis).select_columns(&obs);
        let smm = sigma.select_rows(&mis).select_columns(&mis);
        if obs.is_empty() {
            return Ok(PatternFactor {
                obs,
                mis,
                chol_oo: DMatrix::zeros(0, 0),
                log_det_oo: 0.0,
                coef: DMatrix::zeros(p, 0),
                cond_cov: smm,
            });
        }
        let chol_oo = cholesky::lower_cholesky(&soo).map_err(|_| Error::SingularObservedBlock {
            state: state + 1,
            pattern: pattern_label(key, p),
        })?;
        let log_det_oo = 2.0 * (0..obs.len()).map(|k| chol_oo[(k, k)].ln()).sum::<f64>();
        let linv = cholesky::lower_inverse(&chol_oo);
        let soo_inv = linv.transpose() * &linv;
        let coef = &smo * &soo_inv;
        let mut cond_cov = &smm - &coef * smo.transpose();
        cholesky::symmetrize(&mut cond_cov);
        Ok(PatternFactor {
            obs,
            mis,
            chol_oo,
            log_det_oo,
            coef,
            cond_cov,
        })
    }

    /// Gaussian log-density of the observed coordinates.
    fn log_density_observed(&self, x: &[f64], mu: &DVector<f64>) -> f64 {
        let q = self.obs.len();
        if q == 0 {
            return 0.0;
        }
        // forward-solve L z = x_o − μ_o
        let mut z = vec![0.0; q];
        for r in 0..q {
            let mut v = x[self.obs[r]] - mu[self.obs[r]];
            for c in 0..r {
                v -= self.chol_oo[(r, c)] * z[c];
            }
            z[r] = v / self.chol_oo[(r, r)];
        }
        let quad: f64 = z.iter().map(|v| v * v).sum();
        -0.5 * (q as f64) * LN_2PI - 0.5 * self.log_det_oo - 0.5 * quad
    }
}

/// Per-state covariance geometry for every pattern present in the data.
#[derive(Debug, Clone)]
pub struct PatternCache {
    p: usize,
    sigma: Vec<DMatrix<f64>>,
    factors: Vec<HashMap<PatternKey, PatternFactor>>,
}

impl PatternCache {
    pub fn build(data: &PanelDataset, params: &HmmParams) -> Result<Self> {
        let mut keys: Vec<PatternKey> = Vec::new();
        for i in 0..data.n {
            for t in 0..data.n_times {
                let key = pattern_key(data.mask_row(i, t));
                if key != 0 && !keys.contains(&key) {
                    keys.push(key);
                }
            }
        }
        keys.sort_unstable();
        let sigma: Vec<DMatrix<f64>> = (0..params.m).map(|j| params.sigma(j)).collect();
        let mut factors = Vec::with_capacity(params.m);
        for (j, s) in sigma.iter().enumerate() {
            let mut map = HashMap::with_capacity(keys.len());
            for &key in &keys {
                map.insert(key, PatternFactor::build(s, key, j)?);
            }
            factors.push(map);
        }
        Ok(PatternCache {
            p: data.p,
            sigma,
            factors,
        })
    }

    pub fn factor(&self, state: usize, key: PatternKey) -> Option<&PatternFactor> {
        self.factors[state].get(&key)
    }

    /// `log f(x^o | j)`; zero for a fully unobserved row.
    pub fn observed_log_density(&self, params: &HmmParams, state: usize, x: &[f64], mask_row: &[bool]) -> f64 {
        let key = pattern_key(mask_row);
        if key == 0 {
            return log_density(x, params.mu[state].as_slice(), &params.chol[state]);
        }
        let f = self
            .factor(state, key)
            .expect("pattern cache covers every pattern in the dataset");
        f.log_density_observed(x, &params.mu[state])
    }

    pub fn sigma(&self, state: usize) -> &DMatrix<f64> {
        &self.sigma[state]
    }

    pub fn dim(&self) -> usize {
        self.p
    }
}

/// `log P(M_it = mask_row | C_it = state)`; zero for MAR.
pub fn miss_log_prob(mask_row: &[bool], state: usize, t: usize, miss: &MissParams) -> f64 {
    if miss.mechanism == Mechanism::Mar {
        return 0.0;
    }
    mask_row
        .iter()
        .enumerate()
        .map(|(j, &m)| {
            let prob = clipped_cdf(miss.eta(state, j, t));
            if m {
                prob.ln()
            } else {
                (1.0 - prob).ln()
            }
        })
        .sum()
}

/// Precomputed `log Φ(η)` and `log(1 − Φ(η))` per `(state, variable, time)`.
#[derive(Debug, Clone)]
pub struct MissTable {
    mar: bool,
    p: usize,
    n_times: usize,
    log_missing: Vec<f64>,
    log_observed: Vec<f64>,
}

impl MissTable {
    pub fn new(miss: &MissParams) -> Self {
        let (m, p, nt) = (miss.m, miss.p, miss.n_times);
        let mar = miss.mechanism == Mechanism::Mar;
        let len = if mar { 0 } else { m * p * nt };
        let mut log_missing = Vec::with_capacity(len);
        let mut log_observed = Vec::with_capacity(len);
        if !mar {
            for c in 0..m {
                for j in 0..p {
                    for t in 0..nt {
                        let prob = clipped_cdf(miss.eta(c, j, t));
                        log_missing.push(prob.ln());
                        log_observed.push((1.0 - prob).ln());
                    }
                }
            }
        }
        MissTable {
            mar,
            p,
            n_times: nt,
            log_missing,
            log_observed,
        }
    }

    pub fn log_prob(&self, mask_row: &[bool], state: usize, t: usize) -> f64 {
        if self.mar {
            return 0.0;
        }
        let mut acc = 0.0;
        for (j, &m) in mask_row.iter().enumerate() {
            let idx = (state * self.p + j) * self.n_times + t;
            acc += if m { self.log_missing[idx] } else { self.log_observed[idx] };
        }
        acc
    }
}

/// Conditional first and second moments per cell and regular state.
#[derive(Debug, Clone)]
pub struct ImputedMoments {
    pub n: usize,
    pub n_times: usize,
    pub m: usize,
    pub p: usize,
    /// `[i][t][j][·]`, data on observed coordinates.
    pub cond_mean: Vec<f64>,
    /// `Var(X | x^o, j)` as `[i][t][j][p×p]` row-major; `None` when the
    /// dataset has no missing cells at all.
    pub cond_var: Option<Vec<f64>>,
}

impl ImputedMoments {
    #[inline]
    fn slot(&self, i: usize, t: usize, j: usize) -> usize {
        (i * self.n_times + t) * self.m + j
    }

    pub fn mean(&self, i: usize, t: usize, j: usize) -> &[f64] {
        let o = self.slot(i, t, j) * self.p;
        &self.cond_mean[o..o + self.p]
    }

    /// Conditional covariance entry `(a, b)`; zero for complete data.
    #[inline]
    pub fn var(&self, i: usize, t: usize, j: usize, a: usize, b: usize) -> f64 {
        match &self.cond_var {
            None => 0.0,
            Some(v) => v[self.slot(i, t, j) * self.p * self.p + a * self.p + b],
        }
    }

    pub fn var_matrix(&self, i: usize, t: usize, j: usize) -> DMatrix<f64> {
        DMatrix::from_fn(self.p, self.p, |a, b| self.var(i, t, j, a, b))
    }

    /// `E[(X − c)(X − c)' | x^o, j]` about an arbitrary centre `c`.
    pub fn cond_sscp(&self, i: usize, t: usize, j: usize, center: &DVector<f64>) -> DMatrix<f64> {
        let e = self.mean(i, t, j);
        DMatrix::from_fn(self.p, self.p, |a, b| {
            self.var(i, t, j, a, b) + (e[a] - center[a]) * (e[b] - center[b])
        })
    }
}

/// Imputation moments under the current parameters.
pub fn conditional_moments(data: &PanelDataset, params: &HmmParams, cache: &PatternCache) -> ImputedMoments {
    let (n, nt, m, p) = (data.n, data.n_times, params.m, data.p);
    let mut cond_mean = vec![0.0; n * nt * m * p];
    let any_missing = data.has_missing();
    let mut cond_var = any_missing.then(|| vec![0.0; n * nt * m * p * p]);
    for i in 0..n {
        for t in 0..nt {
            let x = data.row(i, t);
            let mask = data.mask_row(i, t);
            let key = pattern_key(mask);
            for j in 0..m {
                let slot = (i * nt + t) * m + j;
                let out = &mut cond_mean[slot * p..(slot + 1) * p];
                if key == 0 {
                    out.copy_from_slice(x);
                    continue;
                }
                let f = cache.factor(j, key).expect("pattern present");
                let mu = &params.mu[j];
                for &o in &f.obs {
                    out[o] = x[o];
                }
                for (a, &mi) in f.mis.iter().enumerate() {
                    let mut v = mu[mi];
                    for (b, &o) in f.obs.iter().enumerate() {
                        v += f.coef[(a, b)] * (x[o] - mu[o]);
                    }
                    out[mi] = v;
                }
                if let Some(cv) = cond_var.as_mut() {
                    let block = &mut cv[slot * p * p..(slot + 1) * p * p];
                    for (a, &ma) in f.mis.iter().enumerate() {
                        for (b, &mb) in f.mis.iter().enumerate() {
                            block[ma * p + mb] = f.cond_cov[(a, b)];
                        }
                    }
                }
            }
        }
    }
    ImputedMoments {
        n,
        n_times: nt,
        m,
        p,
        cond_mean,
        cond_var,
    }
}

/// Weighted sufficient statistics of the probit design: for every
/// `(state c, variable j, time t)`, the posterior weight `Σ_i û_itc` and the
/// weighted count of missing cells `Σ_i û_itc m_itj`. The probit likelihood
/// over the `(i, t, j)` rows depends on the data only through these sums.
#[derive(Debug, Clone)]
pub struct MissDesign {
    pub m: usize,
    pub p: usize,
    pub n_times: usize,
    pub times: Vec<f64>,
    pub weight: Vec<f64>,
    pub missing: Vec<f64>,
}

impl MissDesign {
    /// Rows over regular states only; post-dropout cells are excluded when
    /// the absorbing state is in use.
    pub fn from_posteriors(data: &PanelDataset, u_hat: &[f64], k: usize, m: usize, dropout: bool, times: Vec<f64>) -> Self {
        let (p, nt) = (data.p, data.n_times);
        let mut weight = vec![0.0; m * p * nt];
        let mut missing = vec![0.0; m * p * nt];
        for i in 0..data.n {
            for t in 0..nt {
                if dropout && data.is_dropped(i, t) {
                    continue;
                }
                let mask = data.mask_row(i, t);
                let u = &u_hat[(i * nt + t) * k..(i * nt + t) * k + k];
                for c in 0..m {
                    let w = u[c];
                    if w == 0.0 {
                        continue;
                    }
                    for (j, &mj) in mask.iter().enumerate() {
                        let idx = (c * p + j) * nt + t;
                        weight[idx] += w;
                        if mj {
                            missing[idx] += w;
                        }
                    }
                }
            }
        }
        MissDesign {
            m,
            p,
            n_times: nt,
            times,
            weight,
            missing,
        }
    }

    #[inline]
    fn idx(&self, c: usize, j: usize, t: usize) -> usize {
        (c * self.p + j) * self.n_times + t
    }

    /// Weighted probit log-likelihood of `miss` on this design.
    pub fn log_likelihood(&self, miss: &MissParams) -> f64 {
        if miss.mechanism == Mechanism::Mar {
            return 0.0;
        }
        let mut ll = 0.0;
        for c in 0..self.m {
            for j in 0..self.p {
                for t in 0..self.n_times {
                    let idx = self.idx(c, j, t);
                    let (w, y) = (self.weight[idx], self.missing[idx]);
                    if w == 0.0 {
                        continue;
                    }
                    let prob = clipped_cdf(miss.eta(c, j, t));
                    ll += y * prob.ln() + (w - y) * (1.0 - prob).ln();
                }
            }
        }
        ll
    }
}

/// Fitted coefficients plus any clamping/empty-cell notes.
#[derive(Debug, Clone)]
pub struct MissFit {
    pub params: MissParams,
    pub flags: Vec<String>,
}

fn closed_form(y: f64, w: f64, label: impl FnOnce() -> String, flags: &mut Vec<String>) -> f64 {
    if w <= EMPTY_WEIGHT {
        flags.push(format!("{}: no posterior weight, coefficient set to 0", label()));
        return 0.0;
    }
    let frac = y / w;
    if frac <= PHI_CLIP || frac >= 1.0 - PHI_CLIP {
        flags.push(format!("{}: complete separation (fraction {frac}), coefficient clamped", label()));
    }
    norm_quantile(frac.clamp(PHI_CLIP, 1.0 - PHI_CLIP))
}

/// Weighted maximum-likelihood probit coefficients.
///
/// Saturated mechanisms use per-cell closed forms `Φ⁻¹(weighted fraction)`;
/// the shared-slope mechanisms run damped Fisher scoring from `start` (or
/// zeros) until the gradient norm drops below `1e-8`.
pub fn fit_miss_params(design: &MissDesign, mechanism: Mechanism, start: Option<&MissParams>) -> MissFit {
    let (m, p, nt) = (design.m, design.p, design.n_times);
    let mut flags = Vec::new();
    let mut params = MissParams::zeros(mechanism, m, p, design.times.clone());
    match mechanism {
        Mechanism::Mar => {}
        Mechanism::State => {
            for c in 0..m {
                let (mut y, mut w) = (0.0, 0.0);
                for j in 0..p {
                    for t in 0..nt {
                        let idx = design.idx(c, j, t);
                        y += design.missing[idx];
                        w += design.weight[idx];
                    }
                }
                params.alpha[c] = closed_form(y, w, || format!("state {}", c + 1), &mut flags);
            }
        }
        Mechanism::StateVariable => {
            for c in 0..m {
                for j in 0..p {
                    let (mut y, mut w) = (0.0, 0.0);
                    for t in 0..nt {
                        let idx = design.idx(c, j, t);
                        y += design.missing[idx];
                        w += design.weight[idx];
                    }
                    params.alpha[c * p + j] =
                        closed_form(y, w, || format!("state {}, variable {}", c + 1, j + 1), &mut flags);
                }
            }
        }
        Mechanism::StateTimeFull => {
            for c in 0..m {
                for t in 0..nt {
                    let (mut y, mut w) = (0.0, 0.0);
                    for j in 0..p {
                        let idx = design.idx(c, j, t);
                        y += design.missing[idx];
                        w += design.weight[idx];
                    }
                    params.alpha[c * nt + t] =
                        closed_form(y, w, || format!("state {}, time {}", c + 1, t + 1), &mut flags);
                }
            }
        }
        Mechanism::StateVarTimeFull => {
            for c in 0..m {
                for j in 0..p {
                    for t in 0..nt {
                        let idx = design.idx(c, j, t);
                        params.alpha[idx] = closed_form(
                            design.missing[idx],
                            design.weight[idx],
                            || format!("state {}, variable {}, time {}", c + 1, j + 1, t + 1),
                            &mut flags,
                        );
                    }
                }
            }
        }
        Mechanism::StateTimeShared | Mechanism::StateVarTimeShared => {
            if let Some(s) = start.filter(|s| s.mechanism == mechanism && s.alpha.len() == params.alpha.len()) {
                params.alpha.clone_from(&s.alpha);
                params.beta_t = s.beta_t;
            }
            fisher_scoring(design, &mut params, &mut flags);
        }
    }
    MissFit { params, flags }
}

/// Index of the `α` coefficient used by cell `(c, j)` in a shared-slope model.
fn shared_alpha_index(mechanism: Mechanism, p: usize, c: usize, j: usize) -> usize {
    match mechanism {
        Mechanism::StateTimeShared => c,
        _ => c * p + j,
    }
}

fn fisher_scoring(design: &MissDesign, params: &mut MissParams, flags: &mut Vec<String>) {
    let (m, p, nt) = (design.m, design.p, design.n_times);
    let na = params.alpha.len();
    let dim = na + 1;
    let mech = params.mechanism;
    let mut alpha_weight = vec![0.0; na];
    for c in 0..m {
        for j in 0..p {
            let a = shared_alpha_index(mech, p, c, j);
            alpha_weight[a] += (0..nt).map(|t| design.weight[design.idx(c, j, t)]).sum::<f64>();
        }
    }
    for (a, &w) in alpha_weight.iter().enumerate() {
        if w <= EMPTY_WEIGHT {
            params.alpha[a] = 0.0;
            flags.push(format!("coefficient {}: no posterior weight, set to 0", a + 1));
        }
    }
    let mut current = design.log_likelihood(params);
    let mut converged = false;
    for _ in 0..MAX_SCORING_ITERS {
        let mut grad = DVector::<f64>::zeros(dim);
        let mut info = DMatrix::<f64>::zeros(dim, dim);
        for c in 0..m {
            for j in 0..p {
                let a = shared_alpha_index(mech, p, c, j);
                for t in 0..nt {
                    let idx = design.idx(c, j, t);
                    let (w, y) = (design.weight[idx], design.missing[idx]);
                    if w == 0.0 {
                        continue;
                    }
                    let eta = params.eta(c, j, t);
                    let raw = norm_cdf(eta);
                    if raw <= PHI_CLIP || raw >= 1.0 - PHI_CLIP {
                        continue;
                    }
                    let dens = norm_pdf(eta);
                    let denom = raw * (1.0 - raw);
                    let score = dens * (y - w * raw) / denom;
                    let fisher = w * dens * dens / denom;
                    let tv = design.times[t];
                    grad[a] += score;
                    grad[na] += score * tv;
                    info[(a, a)] += fisher;
                    info[(a, na)] += fisher * tv;
                    info[(na, a)] += fisher * tv;
                    info[(na, na)] += fisher * tv * tv;
                }
            }
        }
        if grad.norm() < GRAD_TOL {
            converged = true;
            break;
        }
        let ridge = 1e-10 * (1.0 + info.diagonal().amax());
        for d in 0..dim {
            info[(d, d)] += ridge;
        }
        let step = match info.clone().cholesky() {
            Some(ch) => ch.solve(&grad),
            None => grad.clone(),
        };
        let mut scale = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let mut trial = params.clone();
            for a in 0..na {
                trial.alpha[a] += scale * step[a];
            }
            trial.beta_t = Some(trial.beta_t.unwrap_or(0.0) + scale * step[na]);
            let ll = design.log_likelihood(&trial);
            if ll >= current {
                let gain = ll - current;
                *params = trial;
                current = ll;
                accepted = true;
                if gain == 0.0 {
                    converged = true;
                }
                break;
            }
            scale *= 0.5;
        }
        if !accepted || converged {
            converged = true;
            break;
        }
    }
    if !converged {
        flags.push(format!(
            "probit scoring stopped after {MAX_SCORING_ITERS} iterations without reaching gradient tolerance"
        ));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cholesky::ModChol;
    use crate::types::HmmParams;

    fn miss(mechanism: Mechanism, alpha: Vec<f64>, beta: Option<f64>, p: usize, nt: usize, m: usize) -> MissParams {
        MissParams {
            mechanism,
            m,
            p,
            n_times: nt,
            alpha,
            beta_t: beta,
            times: (1..=nt).map(|t| t as f64).collect(),
        }
    }

    #[test]
    fn mar_has_no_factor() {
        let mp = MissParams::mar(2, 3, 4);
        assert_eq!(miss_log_prob(&[true, false, true], 1, 2, &mp), 0.0);
    }

    #[test]
    fn zero_intercept_gives_half_per_variable() {
        let mp = miss(Mechanism::State, vec![0.0, 0.0], None, 4, 3, 2);
        let lp = miss_log_prob(&[true, false, false, true], 0, 0, &mp);
        assert!((lp - 4.0 * 0.5f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn shared_slope_uses_time() {
        let mp = miss(Mechanism::StateTimeShared, vec![0.0, 0.0], Some(1.0), 3, 4, 2);
        // Φ(1) = 0.841344746068543 (normal CDF reference value)
        let lp = miss_log_prob(&[true, true, true], 0, 0, &mp);
        assert!((lp - 3.0 * 0.841_344_746_068_542_9f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn table_matches_direct_evaluation() {
        let mp = miss(
            Mechanism::StateVarTimeShared,
            vec![0.1, -0.3, 0.7, 0.2, -1.0, 0.4],
            Some(-0.2),
            3,
            4,
            2,
        );
        let table = MissTable::new(&mp);
        let mask = [true, false, true];
        for c in 0..2 {
            for t in 0..4 {
                assert!((table.log_prob(&mask, c, t) - miss_log_prob(&mask, c, t, &mp)).abs() < 1e-14);
            }
        }
    }

    fn design_from_fractions(fracs: &[(usize, usize, usize, f64, f64)], m: usize, p: usize, nt: usize) -> MissDesign {
        let mut d = MissDesign {
            m,
            p,
            n_times: nt,
            times: (1..=nt).map(|t| t as f64).collect(),
            weight: vec![0.0; m * p * nt],
            missing: vec![0.0; m * p * nt],
        };
        for &(c, j, t, w, y) in fracs {
            let idx = d.idx(c, j, t);
            d.weight[idx] = w;
            d.missing[idx] = y;
        }
        d
    }

    #[test]
    fn state_closed_form() {
        let d = design_from_fractions(&[(0, 0, 0, 10.0, 5.0), (0, 1, 0, 10.0, 5.0)], 1, 2, 1);
        let fit = fit_miss_params(&d, Mechanism::State, None);
        assert!(fit.params.alpha[0].abs() < 1e-12);

        let d = design_from_fractions(&[(0, 0, 0, 40.0, 39.0)], 1, 1, 1);
        let fit = fit_miss_params(&d, Mechanism::State, None);
        // Φ⁻¹(0.975) = 1.959963984540054
        assert!((fit.params.alpha[0] - 1.959_963_984_540_054).abs() < 1e-9);
    }

    #[test]
    fn state_variable_cells_are_independent() {
        let d = design_from_fractions(&[(0, 0, 0, 10.0, 1.0), (0, 1, 0, 10.0, 3.0)], 1, 2, 1);
        let fit = fit_miss_params(&d, Mechanism::StateVariable, None);
        // Φ⁻¹(0.1) = -1.2815515655446004, Φ⁻¹(0.3) = -0.5244005127080407
        assert!((fit.params.alpha[0] + 1.281_551_565_544_600_4).abs() < 1e-9);
        assert!((fit.params.alpha[1] + 0.524_400_512_708_040_7).abs() < 1e-9);
    }

    #[test]
    fn separation_and_empty_cells_flagged() {
        let d = design_from_fractions(&[(0, 0, 0, 10.0, 0.0)], 2, 1, 1);
        let fit = fit_miss_params(&d, Mechanism::State, None);
        assert!(fit.params.alpha[0] < -7.0);
        assert_eq!(fit.params.alpha[1], 0.0);
        assert_eq!(fit.flags.len(), 2);
    }

    #[test]
    fn shared_slope_fit_is_stationary() {
        // true model alpha = (-0.5, 0.3), beta = 0.2 at times 1..4, exact expected counts
        let truth = miss(Mechanism::StateTimeShared, vec![-0.5, 0.3], Some(0.2), 2, 4, 2);
        let mut entries = Vec::new();
        for c in 0..2 {
            for j in 0..2 {
                for t in 0..4 {
                    let w = 50.0 + 10.0 * (c + j + t) as f64;
                    entries.push((c, j, t, w, w * norm_cdf(truth.eta(c, j, t))));
                }
            }
        }
        let d = design_from_fractions(&entries, 2, 2, 4);
        let fit = fit_miss_params(&d, Mechanism::StateTimeShared, None);
        assert!((fit.params.alpha[0] + 0.5).abs() < 1e-6, "{:?}", fit.params);
        assert!((fit.params.alpha[1] - 0.3).abs() < 1e-6);
        assert!((fit.params.beta_t.unwrap() - 0.2).abs() < 1e-6);
        assert!(fit.flags.is_empty(), "{:?}", fit.flags);
    }

    fn one_state_params(sigma: DMatrix<f64>, mu: Vec<f64>) -> HmmParams {
        let p = mu.len();
        HmmParams {
            m: 1,
            dropout: false,
            delta: vec![1.0],
            gamma: DMatrix::identity(1, 1),
            mu: vec![DVector::from_vec(mu)],
            chol: vec![cholesky::decompose(&sigma).unwrap()],
            miss: MissParams::mar(1, p, 2),
        }
    }

    #[test]
    fn complete_data_moments_pass_through() {
        let ds = PanelDataset::new(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0], vec![false; 4], vec![None]).unwrap();
        let params = one_state_params(DMatrix::identity(2, 2), vec![0.0, 0.0]);
        let cache = PatternCache::build(&ds, &params).unwrap();
        let mom = conditional_moments(&ds, &params, &cache);
        assert_eq!(mom.mean(0, 1, 0), &[3.0, 4.0]);
        assert!(mom.cond_var.is_none());
        assert_eq!(mom.var(0, 0, 0, 1, 1), 0.0);
    }

    #[test]
    fn identity_covariance_imputes_mean() {
        let ds = PanelDataset::new(1, 2, 2, vec![1.0, 0.0, 3.0, 4.0], vec![false, true, false, false], vec![None])
            .unwrap();
        let params = one_state_params(DMatrix::identity(2, 2), vec![0.5, -2.0]);
        let cache = PatternCache::build(&ds, &params).unwrap();
        let mom = conditional_moments(&ds, &params, &cache);
        assert_eq!(mom.mean(0, 0, 0), &[1.0, -2.0]);
        assert!((mom.var(0, 0, 0, 1, 1) - 1.0).abs() < 1e-14);
        assert_eq!(mom.var(0, 0, 0, 0, 0), 0.0);
        assert_eq!(mom.var(0, 1, 0, 1, 1), 0.0);
    }

    #[test]
    fn correlated_conditional_normal() {
        // E[X2 | x1] = μ2 + 0.5 (x1 − μ1), Var = 1 − 0.25
        let ds = PanelDataset::new(1, 2, 2, vec![2.0, 0.0, 0.0, 0.0], vec![false, true, true, true], vec![None])
            .unwrap();
        let sigma = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 1.0]);
        let params = one_state_params(sigma.clone(), vec![1.0, 3.0]);
        let cache = PatternCache::build(&ds, &params).unwrap();
        let mom = conditional_moments(&ds, &params, &cache);
        assert!((mom.mean(0, 0, 0)[1] - 3.5).abs() < 1e-14);
        assert!((mom.var(0, 0, 0, 1, 1) - 0.75).abs() < 1e-14);
        // fully missing row: μ and Σ
        assert_eq!(mom.mean(0, 1, 0), &[1.0, 3.0]);
        let v = mom.var_matrix(0, 1, 0);
        assert!((v - sigma).amax() < 1e-12);
        // observed marginal of a partially observed row is N(μ1, 1)
        let ld = cache.observed_log_density(&params, 0, ds.row(0, 0), ds.mask_row(0, 0));
        assert!((ld - (-0.5 * LN_2PI - 0.5)).abs() < 1e-14);
        assert_eq!(cache.observed_log_density(&params, 0, ds.row(0, 1), ds.mask_row(0, 1)), 0.0);
    }

    #[test]
    fn singular_observed_block_reported() {
        let ds = PanelDataset::new(1, 2, 3, vec![1.0; 6], vec![false, false, true, false, false, false], vec![None])
            .unwrap();
        let mut params = one_state_params(DMatrix::identity(3, 3), vec![0.0; 3]);
        // Drive d_2 to a value that makes Σ_oo numerically singular.
        params.chol[0] = ModChol {
            t: DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 0.0, -1.0, 1.0, 0.0, 0.0, 0.0, 1.0]),
            d: DVector::from_vec(vec![1.0, 1e-300, 1.0]),
        };
        let err = PatternCache::build(&ds, &params).unwrap_err();
        assert!(matches!(err, Error::SingularObservedBlock { state: 1, .. }), "{err:?}");
    }
}
