#![allow(dead_code)]

use cdghmm::cholesky::decompose;
use cdghmm::types::{HmmParams, Mechanism, MissParams, PanelDataset};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Random SPD matrix `A A' / p + 0.3 I`.
pub fn random_spd(rng: &mut ChaCha8Rng, p: usize) -> DMatrix<f64> {
    let a = DMatrix::from_fn(p, p, |_, _| normal(rng));
    let mut s = &a * a.transpose() / p as f64 + DMatrix::identity(p, p) * 0.3;
    for r in 0..p {
        for c in 0..r {
            let v = 0.5 * (s[(r, c)] + s[(c, r)]);
            s[(r, c)] = v;
            s[(c, r)] = v;
        }
    }
    s
}

fn simplex(rng: &mut ChaCha8Rng, k: usize) -> Vec<f64> {
    let w: Vec<f64> = (0..k).map(|_| -rng.gen::<f64>().max(1e-3).ln()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

pub struct Instance {
    pub data: PanelDataset,
    pub params: HmmParams,
    pub sigma: Vec<DMatrix<f64>>,
}

pub fn random_params(rng: &mut ChaCha8Rng, m: usize, p: usize, nt: usize, dropout: bool, mech: Mechanism) -> (HmmParams, Vec<DMatrix<f64>>) {
    let k = m + usize::from(dropout);
    let mut delta = simplex(rng, m);
    let mut gamma = DMatrix::zeros(k, k);
    for a in 0..m {
        let row = simplex(rng, k);
        for b in 0..k {
            gamma[(a, b)] = row[b];
        }
    }
    if dropout {
        delta.push(0.0);
        gamma[(m, m)] = 1.0;
    }
    let sigma: Vec<DMatrix<f64>> = (0..m).map(|_| random_spd(rng, p)).collect();
    let mut miss = MissParams::zeros(mech, m, p, (1..=nt).map(|t| t as f64).collect());
    for a in miss.alpha.iter_mut() {
        *a = 0.7 * normal(rng);
    }
    if let Some(b) = miss.beta_t.as_mut() {
        *b = 0.2 * normal(rng);
    }
    let params = HmmParams {
        m,
        dropout,
        delta,
        gamma,
        mu: (0..m).map(|_| DVector::from_fn(p, |_, _| 1.5 * normal(rng))).collect(),
        chol: sigma.iter().map(|s| decompose(s).unwrap()).collect(),
        miss,
    };
    (params, sigma)
}

/// Random data with roughly `miss_rate` masked cells and, when `dropout`,
/// about half the subjects dropping at a random time after the first.
pub fn random_data(rng: &mut ChaCha8Rng, n: usize, nt: usize, p: usize, miss_rate: f64, dropout: bool) -> PanelDataset {
    let mut values: Vec<f64> = (0..n * nt * p).map(|_| 1.5 * normal(rng)).collect();
    let mut mask: Vec<bool> = (0..n * nt * p).map(|_| rng.gen::<f64>() < miss_rate).collect();
    let mut drop = vec![None; n];
    if dropout {
        for (i, d) in drop.iter_mut().enumerate() {
            if rng.gen::<f64>() < 0.5 {
                let td = rng.gen_range(1..nt);
                *d = Some(td);
                for t in td..nt {
                    let o = (i * nt + t) * p;
                    mask[o..o + p].fill(true);
                }
            }
        }
    }
    for (v, &m) in values.iter_mut().zip(&mask) {
        if m {
            *v = f64::NAN;
        }
    }
    PanelDataset::new(n, nt, p, values, mask, drop).unwrap()
}

pub fn random_instance(rng: &mut ChaCha8Rng, max_n: usize, max_t: usize, max_m: usize, max_p: usize) -> Instance {
    let n = rng.gen_range(1..=max_n);
    let nt = rng.gen_range(2..=max_t);
    let m = rng.gen_range(1..=max_m);
    let p = rng.gen_range(1..=max_p);
    let dropout = rng.gen::<bool>();
    let miss_rate = if rng.gen::<bool>() { 0.0 } else { 0.3 };
    let mech = Mechanism::ALL[rng.gen_range(0..Mechanism::ALL.len())];
    let data = random_data(rng, n, nt, p, miss_rate, dropout);
    let (params, sigma) = random_params(rng, m, p, nt, dropout, mech);
    Instance { data, params, sigma }
}

fn phi(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// Emission log factor from dense algebra on the observed block of `Σ`.
pub fn oracle_emission(inst: &Instance, i: usize, t: usize, s: usize) -> f64 {
    let (data, params) = (&inst.data, &inst.params);
    let m = params.m;
    if params.dropout {
        let dropped = data.is_dropped(i, t);
        if s == m {
            return if dropped { 0.0 } else { f64::NEG_INFINITY };
        }
        if dropped {
            return f64::NEG_INFINITY;
        }
    }
    let x = data.row(i, t);
    let mask = data.mask_row(i, t);
    let obs: Vec<usize> = (0..data.p).filter(|&j| !mask[j]).collect();
    let mut lp = 0.0;
    if !obs.is_empty() {
        let q = obs.len();
        let sub = DMatrix::from_fn(q, q, |a, b| inst.sigma[s][(obs[a], obs[b])]);
        let r = DVector::from_fn(q, |a, _| x[obs[a]] - params.mu[s][obs[a]]);
        let inv = sub.clone().try_inverse().unwrap();
        let quad = (r.transpose() * inv * &r)[(0, 0)];
        lp += -0.5 * (q as f64 * (2.0 * std::f64::consts::PI).ln() + sub.determinant().ln() + quad);
    }
    if params.miss.mechanism != Mechanism::Mar {
        for (j, &mj) in mask.iter().enumerate() {
            let pr = phi(params.miss.eta(s, j, t)).clamp(1e-12, 1.0 - 1e-12);
            lp += if mj { pr.ln() } else { (1.0 - pr).ln() };
        }
    }
    lp
}

/// Log joint of every state sequence of subject `i`, in lexicographic order.
pub fn sequence_log_probs(inst: &Instance, i: usize) -> Vec<(Vec<usize>, f64)> {
    let params = &inst.params;
    let (k, nt) = (params.k(), inst.data.n_times);
    let emis: Vec<Vec<f64>> = (0..nt).map(|t| (0..k).map(|s| oracle_emission(inst, i, t, s)).collect()).collect();
    let total = k.pow(nt as u32);
    let mut out = Vec::with_capacity(total);
    for code in 0..total {
        let mut seq = vec![0; nt];
        let mut c = code;
        for t in (0..nt).rev() {
            seq[t] = c % k;
            c /= k;
        }
        let mut lp = params.delta[seq[0]].ln() + emis[0][seq[0]];
        for t in 1..nt {
            lp += params.gamma[(seq[t - 1], seq[t])].ln() + emis[t][seq[t]];
        }
        out.push((seq, lp));
    }
    out
}

pub fn log_sum_exp(v: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.collect();
    let mx = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !mx.is_finite() {
        return mx;
    }
    mx + v.iter().map(|x| (x - mx).exp()).sum::<f64>().ln()
}

pub fn enumerated_loglik(inst: &Instance) -> f64 {
    (0..inst.data.n)
        .map(|i| log_sum_exp(sequence_log_probs(inst, i).into_iter().map(|(_, lp)| lp)))
        .sum()
}

/// Brute-force state marginals `[t][s]` of subject `i`.
pub fn enumerated_marginals(inst: &Instance, i: usize) -> Vec<Vec<f64>> {
    let seqs = sequence_log_probs(inst, i);
    let l = log_sum_exp(seqs.iter().map(|(_, lp)| *lp));
    let (k, nt) = (inst.params.k(), inst.data.n_times);
    let mut u = vec![vec![0.0; k]; nt];
    for (seq, lp) in &seqs {
        let w = (lp - l).exp();
        for t in 0..nt {
            u[t][seq[t]] += w;
        }
    }
    u
}
