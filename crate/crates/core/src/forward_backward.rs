//! Scaled forward/backward recursions with missingness and dropout factors.
//!
//! Each time step's forward vector is normalized to sum to one and the log
//! of the normalizer is accumulated, so a subject's log-likelihood is the sum
//! of its `scale_log` entries. The backward pass divides by the same
//! normalizers; the scaling cancels in the posterior ratios.

use crate::error::{Error, Result};
use crate::missingness::{MissTable, PatternCache};
use crate::types::{HmmParams, PanelDataset};

/// Scaled recursions and posterior state/transition probabilities.
#[derive(Debug, Clone)]
pub struct Posteriors {
    pub n: usize,
    pub n_times: usize,
    /// Number of chain states (`m`, or `m + 1` with dropout).
    pub k: usize,
    /// `[i][t][k]`
    pub alpha: Vec<f64>,
    /// `[i][t][k]`
    pub beta: Vec<f64>,
    /// `[i][t][k]`
    pub u_hat: Vec<f64>,
    /// `[i][t][j][k]`, zero at `t = 0`.
    pub v_hat: Vec<f64>,
    /// `[i][t]`
    pub scale_log: Vec<f64>,
    pub loglik: f64,
}

impl Posteriors {
    pub fn u(&self, i: usize, t: usize) -> &[f64] {
        let o = (i * self.n_times + t) * self.k;
        &self.u_hat[o..o + self.k]
    }

    pub fn v(&self, i: usize, t: usize, j: usize, k: usize) -> f64 {
        self.v_hat[((i * self.n_times + t) * self.k + j) * self.k + k]
    }

    pub fn subject_loglik(&self, i: usize) -> f64 {
        self.scale_log[i * self.n_times..(i + 1) * self.n_times].iter().sum()
    }
}

/// Everything the recursions need that is fixed for one parameter value.
pub struct EmissionModel<'a> {
    params: &'a HmmParams,
    cache: &'a PatternCache,
    miss: MissTable,
}

impl<'a> EmissionModel<'a> {
    pub fn new(params: &'a HmmParams, cache: &'a PatternCache) -> Self {
        EmissionModel {
            params,
            cache,
            miss: MissTable::new(&params.miss),
        }
    }

    /// `log f(x_it^o, m_it, d_it | state)` for every chain state.
    pub fn log_factors(&self, data: &PanelDataset, i: usize, t: usize, out: &mut [f64]) {
        let params = self.params;
        let m = params.m;
        if params.dropout {
            let dropped = data.is_dropped(i, t);
            out[m] = if dropped { 0.0 } else { f64::NEG_INFINITY };
            if dropped {
                out[..m].fill(f64::NEG_INFINITY);
                return;
            }
        }
        let x = data.row(i, t);
        let mask = data.mask_row(i, t);
        for (j, slot) in out.iter_mut().take(m).enumerate() {
            *slot = self.cache.observed_log_density(params, j, x, mask) + self.miss.log_prob(mask, j, t);
        }
    }
}

/// Length-`K` log emission factors at one cell.
pub fn emission_log_factors(data: &PanelDataset, params: &HmmParams, i: usize, t: usize) -> Result<Vec<f64>> {
    let cache = PatternCache::build(data, params)?;
    let model = EmissionModel::new(params, &cache);
    let mut out = vec![0.0; params.k()];
    model.log_factors(data, i, t, &mut out);
    Ok(out)
}

struct SubjectPass {
    /// scaled emissions `[t][k]`
    emis: Vec<f64>,
    alpha: Vec<f64>,
    /// normalizer in scaled-emission units `[t]`
    norm: Vec<f64>,
    scale_log: Vec<f64>,
}

fn forward_subject(data: &PanelDataset, params: &HmmParams, model: &EmissionModel, i: usize) -> Result<SubjectPass> {
    let (nt, k) = (data.n_times, params.k());
    let mut emis = vec![0.0; nt * k];
    let mut offsets = vec![0.0; nt];
    for t in 0..nt {
        let row = &mut emis[t * k..(t + 1) * k];
        model.log_factors(data, i, t, row);
        let c = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !c.is_finite() {
            return Err(Error::ImpossibleObservation { subject: i + 1, time: t + 1 });
        }
        for v in row.iter_mut() {
            *v = (*v - c).exp();
        }
        offsets[t] = c;
    }
    let mut alpha = vec![0.0; nt * k];
    let mut norm = vec![0.0; nt];
    let mut scale_log = vec![0.0; nt];
    for t in 0..nt {
        let (prev, cur) = alpha.split_at_mut(t * k);
        let cur = &mut cur[..k];
        if t == 0 {
            for s in 0..k {
                cur[s] = params.delta[s] * emis[s];
            }
        } else {
            let prev = &prev[(t - 1) * k..];
            for s in 0..k {
                let mut acc = 0.0;
                for r in 0..k {
                    acc += prev[r] * params.gamma[(r, s)];
                }
                cur[s] = acc * emis[t * k + s];
            }
        }
        let total: f64 = cur.iter().sum();
        if !(total > 0.0) || !total.is_finite() {
            return Err(Error::ImpossibleObservation { subject: i + 1, time: t + 1 });
        }
        for v in cur.iter_mut() {
            *v /= total;
        }
        norm[t] = total;
        scale_log[t] = total.ln() + offsets[t];
    }
    Ok(SubjectPass {
        emis,
        alpha,
        norm,
        scale_log,
    })
}

fn backward_subject(params: &HmmParams, pass: &SubjectPass, nt: usize) -> Vec<f64> {
    let k = params.k();
    let mut beta = vec![0.0; nt * k];
    beta[(nt - 1) * k..].fill(1.0);
    for t in (0..nt - 1).rev() {
        for r in 0..k {
            let mut acc = 0.0;
            for s in 0..k {
                acc += params.gamma[(r, s)] * pass.emis[(t + 1) * k + s] * beta[(t + 1) * k + s];
            }
            beta[t * k + r] = acc / pass.norm[t + 1];
        }
    }
    beta
}

/// Scaled forward probabilities `[i][t][k]` and log normalizers `[i][t]`.
pub fn forward(data: &PanelDataset, params: &HmmParams) -> Result<(Vec<f64>, Vec<f64>)> {
    let cache = PatternCache::build(data, params)?;
    let model = EmissionModel::new(params, &cache);
    let mut alpha = Vec::with_capacity(data.n * data.n_times * params.k());
    let mut scale = Vec::with_capacity(data.n * data.n_times);
    for i in 0..data.n {
        let pass = forward_subject(data, params, &model, i)?;
        alpha.extend_from_slice(&pass.alpha);
        scale.extend_from_slice(&pass.scale_log);
    }
    Ok((alpha, scale))
}

/// Scaled backward probabilities `[i][t][k]`.
pub fn backward(data: &PanelDataset, params: &HmmParams) -> Result<Vec<f64>> {
    let cache = PatternCache::build(data, params)?;
    let model = EmissionModel::new(params, &cache);
    let mut beta = Vec::with_capacity(data.n * data.n_times * params.k());
    for i in 0..data.n {
        let pass = forward_subject(data, params, &model, i)?;
        beta.extend(backward_subject(params, &pass, data.n_times));
    }
    Ok(beta)
}

/// Observed-data log-likelihood.
pub fn log_likelihood(data: &PanelDataset, params: &HmmParams) -> Result<f64> {
    let (_, scale) = forward(data, params)?;
    Ok(scale.iter().sum())
}

pub fn posteriors(data: &PanelDataset, params: &HmmParams) -> Result<Posteriors> {
    let cache = PatternCache::build(data, params)?;
    posteriors_with_cache(data, params, &cache)
}

/// E-step with a prebuilt pattern cache.
pub fn posteriors_with_cache(data: &PanelDataset, params: &HmmParams, cache: &PatternCache) -> Result<Posteriors> {
    let (n, nt, k) = (data.n, data.n_times, params.k());
    let model = EmissionModel::new(params, cache);
    let mut post = Posteriors {
        n,
        n_times: nt,
        k,
        alpha: vec![0.0; n * nt * k],
        beta: vec![0.0; n * nt * k],
        u_hat: vec![0.0; n * nt * k],
        v_hat: vec![0.0; n * nt * k * k],
        scale_log: vec![0.0; n * nt],
        loglik: 0.0,
    };
    for i in 0..n {
        let pass = forward_subject(data, params, &model, i)?;
        let beta = backward_subject(params, &pass, nt);
        let base = i * nt * k;
        post.alpha[base..base + nt * k].copy_from_slice(&pass.alpha);
        post.beta[base..base + nt * k].copy_from_slice(&beta);
        post.scale_log[i * nt..(i + 1) * nt].copy_from_slice(&pass.scale_log);
        for t in 0..nt {
            let u = &mut post.u_hat[base + t * k..base + (t + 1) * k];
            let mut total = 0.0;
            for s in 0..k {
                u[s] = pass.alpha[t * k + s] * beta[t * k + s];
                total += u[s];
            }
            for v in u.iter_mut() {
                *v /= total;
            }
            if t == 0 {
                continue;
            }
            let vbase = (base + t * k) * k;
            let v = &mut post.v_hat[vbase..vbase + k * k];
            let mut total = 0.0;
            for r in 0..k {
                let a = pass.alpha[(t - 1) * k + r];
                if a == 0.0 {
                    continue;
                }
                for s in 0..k {
                    let val = a * params.gamma[(r, s)] * pass.emis[t * k + s] * beta[t * k + s];
                    v[r * k + s] = val;
                    total += val;
                }
            }
            for x in v.iter_mut() {
                *x /= total;
            }
        }
    }
    post.loglik = post.scale_log.iter().sum();
    Ok(post)
}
