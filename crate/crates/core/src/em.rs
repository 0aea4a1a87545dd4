//! Baum-Welch EM for the CDGHMM family with missing data and dropout.
//!
//! Each iteration computes, at the current parameters, the conditional
//! moments of the missing coordinates and the state/transition posteriors,
//! then updates `(δ, Γ)`, the means and scatters, `(T_j, D_j)` and finally
//! the missingness coefficients. Several seeded starts run in parallel and
//! the one with the highest final log-likelihood is kept.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::covariance::{solve_member, update_mean_and_scatter};
use crate::dropout::{mstep_transition, DropoutAugmentation};
use crate::error::{Error, Result};
use crate::forward_backward::{posteriors_with_cache, Posteriors};
use crate::missingness::{conditional_moments, fit_miss_params, ImputedMoments, MissDesign, PatternCache};
use crate::types::{count_free_params, HmmParams, Mechanism, MissParams, ModelStructure, PanelDataset};

/// Tolerance on a per-iteration log-likelihood decrease before it is
/// reported as an ascent violation.
pub const ASCENT_TOL: f64 = 1e-8;

const KMEANS_ITERS: usize = 100;

/// How the first posteriors are seeded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InitMethod {
    /// k-means++ on mean-imputed pooled rows for the first start. Lloyd
    /// iterations send nearly every k-means++ seeding to the same partition,
    /// so the remaining starts use random soft assignments instead.
    KMeans,
    /// Uniform-Dirichlet soft assignments.
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub structure: ModelStructure,
    pub m: usize,
    pub mechanism: Mechanism,
    pub dropout: bool,
    pub max_iter: usize,
    pub rel_tol: f64,
    pub n_starts: usize,
    pub seed: u64,
    pub init: InitMethod,
}

impl FitConfig {
    pub fn new(structure: ModelStructure, m: usize) -> Self {
        FitConfig {
            structure,
            m,
            mechanism: Mechanism::Mar,
            dropout: false,
            max_iter: 1000,
            rel_tol: 1e-6,
            n_starts: 10,
            seed: 0,
            init: InitMethod::KMeans,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.m < 1 {
            return Err(Error::InvalidInput("need at least one state".into()));
        }
        if self.max_iter < 1 {
            return Err(Error::InvalidInput("max_iter must be at least 1".into()));
        }
        if !(self.rel_tol > 0.0) {
            return Err(Error::InvalidInput("rel_tol must be positive".into()));
        }
        if self.n_starts < 1 {
            return Err(Error::InvalidInput("n_starts must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitResult {
    pub structure: ModelStructure,
    pub mechanism: Mechanism,
    pub params: HmmParams,
    pub loglik: f64,
    /// Observed-data log-likelihood at every E-step, first to last.
    pub loglik_trace: Vec<f64>,
    pub bic: f64,
    pub icl: f64,
    pub rho: usize,
    /// Local decoding, `[i][t]`, 0-based; `m` marks dropped cells.
    pub decoded: Vec<usize>,
    pub diagnostics: Vec<String>,
    pub iterations: usize,
    pub converged: bool,
    pub seed: u64,
    pub start: usize,
}

impl FitResult {
    /// Number of times the trace decreased by more than [`ASCENT_TOL`].
    pub fn ascent_violations(&self) -> usize {
        self.loglik_trace.windows(2).filter(|w| w[1] < w[0] - ASCENT_TOL).count()
    }
}

/// Free parameters: covariance, `δ`, `Γ`, means and missingness coefficients.
pub fn count_model_params(structure: ModelStructure, m: usize, p: usize, dropout: bool, miss: &MissParams) -> usize {
    let gamma = if dropout { m * m } else { m * (m - 1) };
    count_free_params(structure, m, p) + (m - 1) + gamma + m * p + miss.coefficient_count()
}

/// `BIC = 2l − ρ log N`.
pub fn bic(loglik: f64, rho: usize, n_obs: usize) -> f64 {
    2.0 * loglik - rho as f64 * (n_obs as f64).ln()
}

/// `ICL = BIC + 2 Σ log û` over the MAP state of every cell.
pub fn icl(bic: f64, post: &Posteriors) -> f64 {
    let mut penalty = 0.0;
    for i in 0..post.n {
        for t in 0..post.n_times {
            let u = post.u(i, t);
            let best = u[argmax(u)];
            if best > 0.0 {
                penalty += best.ln();
            }
        }
    }
    bic + 2.0 * penalty
}

fn argmax(u: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in u.iter().enumerate().skip(1) {
        if v > u[best] {
            best = j;
        }
    }
    best
}

/// Most probable state per cell; ties go to the lowest index.
pub fn local_decode(post: &Posteriors) -> Vec<usize> {
    (0..post.n)
        .flat_map(|i| (0..post.n_times).map(move |t| (i, t)))
        .map(|(i, t)| argmax(post.u(i, t)))
        .collect()
}

/// Decoded labels and the posterior table for fitted parameters.
pub fn decode(data: &PanelDataset, params: &HmmParams) -> Result<(Vec<usize>, Posteriors)> {
    let cache = PatternCache::build(data, params)?;
    let post = posteriors_with_cache(data, params, &cache)?;
    Ok((local_decode(&post), post))
}

fn column_means(data: &PanelDataset) -> Vec<f64> {
    let p = data.p;
    let mut sum = vec![0.0; p];
    let mut cnt = vec![0usize; p];
    for i in 0..data.n {
        for t in 0..data.n_times {
            for (j, (&x, &miss)) in data.row(i, t).iter().zip(data.mask_row(i, t)).enumerate() {
                if !miss {
                    sum[j] += x;
                    cnt[j] += 1;
                }
            }
        }
    }
    sum.iter().zip(&cnt).map(|(s, &c)| if c > 0 { s / c as f64 } else { 0.0 }).collect()
}

fn mean_imputed_row(data: &PanelDataset, means: &[f64], i: usize, t: usize) -> Vec<f64> {
    data.row(i, t)
        .iter()
        .zip(data.mask_row(i, t))
        .zip(means)
        .map(|((&x, &miss), &mu)| if miss { mu } else { x })
        .collect()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Fails unless `rows` holds at least `m` distinct rows.
fn require_distinct(rows: &[Vec<f64>], m: usize) -> Result<()> {
    let mut distinct: Vec<&Vec<f64>> = Vec::new();
    for r in rows {
        if !distinct.iter().any(|d| *d == r) {
            distinct.push(r);
            if distinct.len() >= m {
                return Ok(());
            }
        }
    }
    Err(Error::Initialization(format!(
        "{m} states requested but only {} distinct rows",
        distinct.len()
    )))
}

/// k-means++ seeding followed by Lloyd iterations.
pub fn kmeans(rows: &[Vec<f64>], m: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    require_distinct(rows, m)?;
    let n = rows.len();
    let mut centers: Vec<Vec<f64>> = vec![rows[rng.gen_range(0..n)].clone()];
    let mut d2: Vec<f64> = rows.iter().map(|r| sq_dist(r, &centers[0])).collect();
    while centers.len() < m {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.gen::<f64>() * total;
            let mut idx = n - 1;
            for (k, &w) in d2.iter().enumerate() {
                if target < w {
                    idx = k;
                    break;
                }
                target -= w;
            }
            // guard against rounding landing on a zero-distance row
            if d2[idx] == 0.0 {
                d2.iter().position(|&w| w > 0.0).unwrap_or(idx)
            } else {
                idx
            }
        } else {
            rng.gen_range(0..n)
        };
        centers.push(rows[pick].clone());
        for (k, r) in rows.iter().enumerate() {
            d2[k] = d2[k].min(sq_dist(r, centers.last().unwrap()));
        }
    }
    let mut labels = vec![usize::MAX; n];
    for _ in 0..KMEANS_ITERS {
        let mut changed = false;
        for (k, r) in rows.iter().enumerate() {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (c, ctr) in centers.iter().enumerate() {
                let d = sq_dist(r, ctr);
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            if labels[k] != best {
                labels[k] = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let p = rows[0].len();
        let mut sums = vec![vec![0.0; p]; m];
        let mut counts = vec![0usize; m];
        for (r, &l) in rows.iter().zip(&labels) {
            counts[l] += 1;
            for (s, x) in sums[l].iter_mut().zip(r) {
                *s += x;
            }
        }
        for c in 0..m {
            if counts[c] == 0 {
                // reseed an empty cluster at the point farthest from its centre
                let far = (0..n)
                    .max_by(|&a, &b| {
                        sq_dist(&rows[a], &centers[labels[a]])
                            .partial_cmp(&sq_dist(&rows[b], &centers[labels[b]]))
                            .unwrap()
                    })
                    .unwrap();
                centers[c] = rows[far].clone();
                labels[far] = c;
            } else {
                centers[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
    }
    Ok(labels)
}

/// Seeded posteriors: `û` from the initialization method, `v̂_t(j,k) =
/// û_{t-1}(j) û_t(k)`. Dropped cells sit in the absorbing state.
fn seed_posteriors(data: &PanelDataset, config: &FitConfig, rng: &mut ChaCha8Rng) -> Result<Posteriors> {
    let (n, nt, m) = (data.n, data.n_times, config.m);
    let aug = DropoutAugmentation::new(m, config.dropout);
    let k = aug.k();
    let means = column_means(data);
    let mut u_hat = vec![0.0; n * nt * k];
    let usable = |i: usize, t: usize| !(config.dropout && data.is_dropped(i, t)) && !data.row_fully_missing(i, t);
    let mut cells = Vec::new();
    let mut rows = Vec::new();
    for i in 0..n {
        for t in 0..nt {
            if usable(i, t) {
                cells.push((i, t));
                rows.push(mean_imputed_row(data, &means, i, t));
            }
        }
    }
    if rows.is_empty() {
        return Err(Error::Initialization("no observed rows".into()));
    }
    require_distinct(&rows, m)?;
    match config.init {
        InitMethod::KMeans => {
            let labels = kmeans(&rows, m, rng)?;
            for (&(i, t), &l) in cells.iter().zip(&labels) {
                u_hat[(i * nt + t) * k + l] = 1.0;
            }
        }
        InitMethod::Random => {
            for &(i, t) in &cells {
                let u = &mut u_hat[(i * nt + t) * k..(i * nt + t) * k + m];
                let mut total = 0.0;
                for v in u.iter_mut() {
                    *v = -rng.gen::<f64>().max(f64::MIN_POSITIVE).ln();
                    total += *v;
                }
                u.iter_mut().for_each(|v| *v /= total);
            }
        }
    }
    for i in 0..n {
        for t in 0..nt {
            let o = (i * nt + t) * k;
            if config.dropout && data.is_dropped(i, t) {
                u_hat[o + m] = 1.0;
            } else if !usable(i, t) {
                u_hat[o..o + m].fill(1.0 / m as f64);
            }
        }
    }
    let mut v_hat = vec![0.0; n * nt * k * k];
    for i in 0..n {
        for t in 1..nt {
            let prev = (i * nt + t - 1) * k;
            let cur = (i * nt + t) * k;
            for a in 0..k {
                for b in 0..k {
                    v_hat[(cur + a) * k + b] = u_hat[prev + a] * u_hat[cur + b];
                }
            }
        }
    }
    Ok(Posteriors {
        n,
        n_times: nt,
        k,
        alpha: Vec::new(),
        beta: Vec::new(),
        u_hat,
        v_hat,
        scale_log: vec![0.0; n * nt],
        loglik: f64::NEG_INFINITY,
    })
}

/// Mean-imputed moments (no conditional variance) for the first M-step.
fn seed_moments(data: &PanelDataset, m: usize) -> ImputedMoments {
    let (n, nt, p) = (data.n, data.n_times, data.p);
    let means = column_means(data);
    let mut cond_mean = Vec::with_capacity(n * nt * m * p);
    for i in 0..n {
        for t in 0..nt {
            let row = mean_imputed_row(data, &means, i, t);
            for _ in 0..m {
                cond_mean.extend_from_slice(&row);
            }
        }
    }
    ImputedMoments {
        n,
        n_times: nt,
        m,
        p,
        cond_mean,
        cond_var: None,
    }
}

/// Seeded assignments pushed through one M-step; hard seeds leave exact
/// zeros in `δ`/`Γ`, which EM can never leave, so those are smoothed.
pub fn initialize(data: &PanelDataset, config: &FitConfig, rng: &mut ChaCha8Rng) -> Result<HmmParams> {
    config.validate()?;
    let m = config.m;
    let post = seed_posteriors(data, config, rng)?;
    let moments = seed_moments(data, m);
    let placeholder = HmmParams {
        m,
        dropout: config.dropout,
        delta: vec![0.0; post.k],
        gamma: DMatrix::zeros(post.k, post.k),
        mu: vec![nalgebra::DVector::from_vec(column_means(data)); m],
        chol: vec![crate::cholesky::ModChol::identity(data.p); m],
        miss: MissParams::zeros(config.mechanism, m, data.p, data.times.clone()),
    };
    let (mut params, _) = m_step(data, &post, &moments, &placeholder, config)?;
    let aug = DropoutAugmentation::new(m, config.dropout);
    let absorb_seen = config.dropout && data.has_dropout();
    let smooth = 0.05;
    let cols = m + usize::from(absorb_seen);
    for j in 0..m {
        for l in 0..cols {
            params.gamma[(j, l)] = (1.0 - smooth) * params.gamma[(j, l)] + smooth / cols as f64;
        }
    }
    for j in 0..m {
        params.delta[j] = (1.0 - smooth) * params.delta[j] + smooth / m as f64;
    }
    aug.enforce(&mut params.delta, &mut params.gamma);
    Ok(params)
}

/// Algorithm 1's M-step given posteriors and conditional moments computed
/// at `prev`.
pub fn m_step(
    data: &PanelDataset,
    post: &Posteriors,
    moments: &ImputedMoments,
    prev: &HmmParams,
    config: &FitConfig,
) -> Result<(HmmParams, Vec<String>)> {
    let m = config.m;
    let aug = DropoutAugmentation::new(m, config.dropout);
    let trans = mstep_transition(post, aug);
    let mut flags = trans.flags;
    let (mu, scatter) = update_mean_and_scatter(data, post, moments, &prev.mu);
    flags.extend(scatter.warnings.iter().cloned());
    let cov = solve_member(config.structure, &scatter, Some(&prev.chol))?;
    flags.extend(cov.flags);
    let miss = if config.mechanism == Mechanism::Mar {
        MissParams::mar(m, data.p, data.n_times)
    } else {
        let design = MissDesign::from_posteriors(data, &post.u_hat, post.k, m, config.dropout, data.times.clone());
        let start = (prev.miss.mechanism == config.mechanism).then_some(&prev.miss);
        let fit = fit_miss_params(&design, config.mechanism, start);
        flags.extend(fit.flags);
        fit.params
    };
    Ok((
        HmmParams {
            m,
            dropout: config.dropout,
            delta: trans.delta,
            gamma: trans.gamma,
            mu,
            chol: cov.chol,
            miss,
        },
        flags,
    ))
}

/// EM from fixed starting parameters.
pub fn run_em(data: &PanelDataset, config: &FitConfig, start: HmmParams) -> Result<FitResult> {
    config.validate()?;
    let mut params = start;
    let mut trace: Vec<f64> = Vec::new();
    let mut diagnostics: Vec<String> = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    let (post, params) = loop {
        let cache = PatternCache::build(data, &params)?;
        let moments = conditional_moments(data, &params, &cache);
        let post = posteriors_with_cache(data, &params, &cache)?;
        let l = post.loglik;
        if !l.is_finite() {
            return Err(Error::Numeric(format!("log-likelihood is {l} at iteration {}", iterations + 1)));
        }
        if let Some(&last) = trace.last() {
            if l < last - ASCENT_TOL {
                diagnostics.push(format!(
                    "iteration {}: log-likelihood decreased by {:e}",
                    iterations + 1,
                    last - l
                ));
            }
            if (l - last).abs() / (1.0 + l.abs()) < config.rel_tol {
                converged = true;
            }
        }
        trace.push(l);
        iterations += 1;
        if converged || iterations >= config.max_iter {
            break (post, params);
        }
        let (next, flags) = m_step(data, &post, &moments, &params, config)?;
        for f in flags {
            if !diagnostics.contains(&f) {
                diagnostics.push(f);
            }
        }
        params = next;
    };
    let n_obs = data.n * data.n_times;
    let rho = count_model_params(config.structure, config.m, data.p, config.dropout, &params.miss);
    let b = bic(post.loglik, rho, n_obs);
    Ok(FitResult {
        structure: config.structure,
        mechanism: config.mechanism,
        loglik: post.loglik,
        loglik_trace: trace,
        bic: b,
        icl: icl(b, &post),
        rho,
        decoded: local_decode(&post),
        diagnostics,
        iterations,
        converged,
        seed: config.seed,
        start: 0,
        params,
    })
}

/// Generator for start `index` under `seed`.
pub fn start_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Seeding used by start `index`.
pub fn start_init(config: &FitConfig, index: usize) -> InitMethod {
    if index == 0 {
        config.init
    } else {
        InitMethod::Random
    }
}

/// Fits `config.n_starts` seeded starts and keeps the best final
/// log-likelihood (lowest start index on ties).
pub fn fit(data: &PanelDataset, config: &FitConfig) -> Result<FitResult> {
    config.validate()?;
    let runs: Vec<Result<FitResult>> = (0..config.n_starts)
        .into_par_iter()
        .map(|s| {
            let mut rng = start_rng(config.seed, s);
            let start_config = FitConfig {
                init: start_init(config, s),
                ..config.clone()
            };
            let start = initialize(data, &start_config, &mut rng)?;
            let mut res = run_em(data, config, start)?;
            res.start = s;
            Ok(res)
        })
        .collect();
    let mut best: Option<FitResult> = None;
    let mut failures = Vec::new();
    for (s, r) in runs.into_iter().enumerate() {
        match r {
            Ok(res) => {
                if best.as_ref().map_or(true, |b| res.loglik > b.loglik) {
                    best = Some(res);
                }
            }
            Err(e) => failures.push(format!("start {}: {e}", s + 1)),
        }
    }
    match best {
        Some(mut res) => {
            res.diagnostics.extend(failures);
            Ok(res)
        }
        None => Err(Error::AllStartsFailed {
            starts: config.n_starts,
            first: failures.into_iter().next().unwrap_or_default(),
        }),
    }
}
