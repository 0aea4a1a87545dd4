//! Data generators for CDGHMM panels and the four simulation studies.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cholesky::{decompose, lower_cholesky};
use crate::em::{fit, FitConfig};
use crate::error::{Error, Result};
use crate::metrics::score;
use crate::types::{HmmParams, Mechanism, MissParams, ModelStructure, PanelDataset};

const STOCHASTIC_TOL: f64 = 1e-8;

/// Generator settings. A `gamma` with `m + 1` rows adds an absorbing
/// dropout state; `sigma` holds one matrix per state or a single shared one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimSpec {
    pub m: usize,
    pub n: usize,
    pub n_times: usize,
    pub p: usize,
    pub delta: Vec<f64>,
    pub gamma: Vec<Vec<f64>>,
    pub mu: Vec<Vec<f64>>,
    pub sigma: Vec<Vec<Vec<f64>>>,
    /// Per-state mean increment per step spent in the current state run.
    #[serde(default)]
    pub drift: Option<Vec<Vec<f64>>>,
    /// Fixed 0-based state paths (`n` rows of length `T`) used instead of
    /// sampling the chain.
    #[serde(default)]
    pub paths: Option<Vec<Vec<usize>>>,
    #[serde(default)]
    pub p_miss: f64,
    #[serde(default)]
    pub m_miss: Vec<f64>,
    /// One shared row of variable weights, or one row per state.
    #[serde(default)]
    pub v_miss: Vec<Vec<f64>>,
    #[serde(default)]
    pub seed: u64,
}

fn is_distribution(v: &[f64]) -> bool {
    v.iter().all(|&x| x >= 0.0 && x.is_finite()) && (v.iter().sum::<f64>() - 1.0).abs() < STOCHASTIC_TOL
}

impl SimSpec {
    pub fn k(&self) -> usize {
        self.gamma.len()
    }

    pub fn has_dropout(&self) -> bool {
        self.gamma.len() == self.m + 1
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidInput(msg));
        let (m, p) = (self.m, self.p);
        if m < 1 || self.n < 1 || self.n_times < 2 || p < 1 {
            return bad(format!("need m, n, p >= 1 and T >= 2 (m={m}, n={}, T={}, p={p})", self.n, self.n_times));
        }
        let k = self.k();
        if k != m && k != m + 1 {
            return bad(format!("gamma has {k} rows; expected {m} or {}", m + 1));
        }
        if self.gamma.iter().any(|r| r.len() != k || !is_distribution(r)) {
            return bad("gamma rows must be probability vectors of length K".into());
        }
        if self.delta.len() != k || !is_distribution(&self.delta) {
            return bad("delta must be a probability vector of length K".into());
        }
        if self.has_dropout() {
            if self.delta[m] != 0.0 {
                return bad("dropout state cannot be occupied at the first time point".into());
            }
            if self.gamma[m][m] != 1.0 {
                return bad("dropout state must be absorbing".into());
            }
        }
        if self.mu.len() != m || self.mu.iter().any(|r| r.len() != p) {
            return bad(format!("mu must be {m} x {p}"));
        }
        if !(self.sigma.len() == 1 || self.sigma.len() == m)
            || self.sigma.iter().any(|s| s.len() != p || s.iter().any(|r| r.len() != p))
        {
            return bad(format!("sigma must hold 1 or {m} matrices of size {p} x {p}"));
        }
        if let Some(d) = &self.drift {
            if d.len() != m || d.iter().any(|r| r.len() != p) {
                return bad(format!("drift must be {m} x {p}"));
            }
        }
        if let Some(paths) = &self.paths {
            if paths.len() != self.n || paths.iter().any(|r| r.len() != self.n_times || r.iter().any(|&s| s >= k)) {
                return bad("paths must be n rows of T state indices".into());
            }
        }
        if !(0.0..=1.0).contains(&self.p_miss) {
            return bad("p_miss must lie in [0, 1]".into());
        }
        if self.p_miss > 0.0 {
            if self.m_miss.len() != m || !is_distribution(&self.m_miss) {
                return bad("m_miss must be a probability vector over the regular states".into());
            }
            if !(self.v_miss.len() == 1 || self.v_miss.len() == m) {
                return bad("v_miss must hold one shared row or one row per state".into());
            }
            for row in &self.v_miss {
                // rows of all zeros switch a state's missingness off entirely
                let zero = row.iter().all(|&v| v == 0.0);
                if row.len() != p || !(zero || is_distribution(row)) {
                    return bad("v_miss rows must be probability vectors over the variables".into());
                }
            }
        }
        Ok(())
    }

    fn sigma_matrix(&self, j: usize) -> DMatrix<f64> {
        let s = if self.sigma.len() == 1 { &self.sigma[0] } else { &self.sigma[j] };
        DMatrix::from_fn(self.p, self.p, |a, b| s[a][b])
    }

    /// Generating parameters as an [`HmmParams`] (missingness left as MAR).
    pub fn truth(&self) -> Result<HmmParams> {
        let k = self.k();
        Ok(HmmParams {
            m: self.m,
            dropout: self.has_dropout(),
            delta: self.delta.clone(),
            gamma: DMatrix::from_fn(k, k, |a, b| self.gamma[a][b]),
            mu: self.mu.iter().map(|r| DVector::from_row_slice(r)).collect(),
            chol: (0..self.m).map(|j| decompose(&self.sigma_matrix(j))).collect::<Result<_>>()?,
            miss: MissParams::mar(self.m, self.p, self.n_times),
        })
    }
}

#[derive(Debug, Clone)]
pub struct SimOutput {
    pub data: PanelDataset,
    /// `[i][t]`, 0-based; `m` marks the dropout state.
    pub states: Vec<usize>,
    pub truth: HmmParams,
    pub diagnostics: Vec<String>,
}

fn draw(probs: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (s, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return s;
        }
    }
    // rounding left a sliver; take the last state with positive mass
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// Samples a panel from `spec`.
pub fn generate(spec: &SimSpec) -> Result<SimOutput> {
    spec.validate()?;
    let (m, n, nt, p) = (spec.m, spec.n, spec.n_times, spec.p);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let factors: Vec<DMatrix<f64>> = (0..m).map(|j| lower_cholesky(&spec.sigma_matrix(j))).collect::<Result<_>>()?;
    let mut states = Vec::with_capacity(n * nt);
    for i in 0..n {
        match &spec.paths {
            Some(paths) => states.extend_from_slice(&paths[i]),
            None => {
                let mut s = draw(&spec.delta, &mut rng);
                states.push(s);
                for _ in 1..nt {
                    s = draw(&spec.gamma[s], &mut rng);
                    states.push(s);
                }
            }
        }
    }
    let mut values = vec![0.0; n * nt * p];
    let mut mask = vec![false; n * nt * p];
    let mut dropout = vec![None; n];
    let mut z = DVector::<f64>::zeros(p);
    for i in 0..n {
        let mut run = 0usize;
        for t in 0..nt {
            let s = states[i * nt + t];
            let o = (i * nt + t) * p;
            if s >= m {
                if dropout[i].is_none() {
                    dropout[i] = Some(t);
                }
                mask[o..o + p].fill(true);
                continue;
            }
            run = if t > 0 && states[i * nt + t - 1] == s { run + 1 } else { 1 };
            for v in z.iter_mut() {
                *v = StandardNormal.sample(&mut rng);
            }
            let e = &factors[s] * &z;
            for j in 0..p {
                let drift = spec.drift.as_ref().map_or(0.0, |d| d[s][j] * run as f64);
                values[o + j] = spec.mu[s][j] + drift + e[j];
            }
        }
    }
    let data = PanelDataset::new(n, nt, p, values, mask, dropout)?;
    let mut diagnostics = Vec::new();
    let data = if spec.p_miss > 0.0 {
        let mask_seed = rng.gen();
        let (masked, notes) = apply_mnar_mask(&data, &states, spec.p_miss, &spec.m_miss, &spec.v_miss, mask_seed)?;
        diagnostics = notes;
        masked
    } else {
        data
    };
    Ok(SimOutput {
        data,
        states,
        truth: spec.truth()?,
        diagnostics,
    })
}

/// Masks cell `(i, t, j)` with probability
/// `p_miss · (m · m_miss[c]) · (p · v_miss[j])`, clipped to `[0, 1]`, where
/// `c` is the true state. Dropped cells are already masked and are left
/// alone. A row left with no observed value gets one cell back, so masking
/// never imitates dropout.
pub fn apply_mnar_mask(
    data: &PanelDataset,
    states: &[usize],
    p_miss: f64,
    m_miss: &[f64],
    v_miss: &[Vec<f64>],
    seed: u64,
) -> Result<(PanelDataset, Vec<String>)> {
    let (n, nt, p) = (data.n, data.n_times, data.p);
    let m = m_miss.len();
    if states.len() != n * nt {
        return Err(Error::InvalidInput("state sequence does not match the panel".into()));
    }
    if m == 0 || !(v_miss.len() == 1 || v_miss.len() == m) || v_miss.iter().any(|r| r.len() != p) {
        return Err(Error::InvalidInput("missingness weights do not match the panel".into()));
    }
    if m_miss.iter().chain(v_miss.iter().flatten()).any(|&w| !(w >= 0.0)) {
        return Err(Error::InvalidInput("missingness weights must be nonnegative".into()));
    }
    let mut diagnostics = Vec::new();
    let mut rate = vec![0.0; m * p];
    for c in 0..m {
        let v = if v_miss.len() == 1 { &v_miss[0] } else { &v_miss[c] };
        for j in 0..p {
            let raw = p_miss * (m as f64 * m_miss[c]) * (p as f64 * v[j]);
            if raw > 1.0 {
                diagnostics.push(format!("state {}, variable {}: rate {raw:.4} clipped to 1", c + 1, j + 1));
            }
            rate[c * p + j] = raw.clamp(0.0, 1.0);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mask = data.mask.clone();
    let mut restored = 0usize;
    for i in 0..n {
        for t in 0..nt {
            let c = states[i * nt + t];
            if c >= m || data.is_dropped(i, t) {
                continue;
            }
            let o = (i * nt + t) * p;
            for j in 0..p {
                if rng.gen::<f64>() < rate[c * p + j] {
                    mask[o + j] = true;
                }
            }
            if mask[o..o + p].iter().all(|&x| x) {
                let keep = rng.gen_range(0..p);
                mask[o + keep] = false;
                restored += 1;
            }
        }
    }
    if restored > 0 {
        diagnostics.push(format!("{restored} fully masked rows had one cell restored"));
    }
    let mut values = data.values.clone();
    for (v, (&now, &before)) in values.iter_mut().zip(mask.iter().zip(&data.mask)) {
        if now && !before {
            *v = f64::NAN;
        }
    }
    let mut out = PanelDataset::new(n, nt, p, values, mask, data.dropout.clone())?;
    out.ids = data.ids.clone();
    out.times = data.times.clone();
    out.var_names = data.var_names.clone();
    Ok((out, diagnostics))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Study {
    Sim1,
    Sim2,
    Sim3,
    Sim4,
}

impl Study {
    pub fn name(&self) -> &'static str {
        match self {
            Study::Sim1 => "sim1",
            Study::Sim2 => "sim2",
            Study::Sim3 => "sim3",
            Study::Sim4 => "sim4",
        }
    }
}

impl std::str::FromStr for Study {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "sim1" => Ok(Study::Sim1),
            "sim2" => Ok(Study::Sim2),
            "sim3" => Ok(Study::Sim3),
            "sim4" => Ok(Study::Sim4),
            _ => Err(Error::InvalidInput(format!("unknown study '{s}'"))),
        }
    }
}

/// One data-generating configuration and the models fitted to each of its
/// replicates.
#[derive(Debug, Clone)]
pub struct StudySetting {
    pub study: Study,
    pub gamma_id: String,
    pub spec: SimSpec,
    pub fits: Vec<(ModelStructure, Mechanism)>,
}

fn identity(p: usize) -> Vec<Vec<f64>> {
    (0..p).map(|a| (0..p).map(|b| f64::from(u8::from(a == b))).collect()).collect()
}

fn base_spec(m: usize, n: usize, nt: usize, delta: Vec<f64>, gamma: Vec<Vec<f64>>, mu: Vec<Vec<f64>>, sigma: Vec<Vec<f64>>) -> SimSpec {
    SimSpec {
        m,
        n,
        n_times: nt,
        p: mu[0].len(),
        delta,
        gamma,
        mu,
        sigma: vec![sigma],
        drift: None,
        paths: None,
        p_miss: 0.0,
        m_miss: Vec::new(),
        v_miss: Vec::new(),
        seed: 0,
    }
}

fn all_models(mechanisms: &[Mechanism]) -> Vec<(ModelStructure, Mechanism)> {
    ModelStructure::ALL
        .iter()
        .flat_map(|&s| mechanisms.iter().map(move |&mech| (s, mech)))
        .collect()
}

/// Transition matrices of the first study, by id.
pub fn sim1_gamma(id: &str) -> Option<Vec<Vec<f64>>> {
    match id {
        "G1" => Some(vec![vec![0.95, 0.05], vec![0.05, 0.95]]),
        "G2" => Some(vec![vec![0.5, 0.5], vec![0.5, 0.5]]),
        "G3" => Some(vec![vec![0.2, 0.8], vec![0.7, 0.3]]),
        _ => None,
    }
}

pub fn sim1_spec(gamma_id: &str, n: usize) -> Result<SimSpec> {
    let gamma = sim1_gamma(gamma_id).ok_or_else(|| Error::InvalidInput(format!("unknown transition matrix '{gamma_id}'")))?;
    Ok(base_spec(
        2,
        n,
        5,
        vec![0.5, 0.5],
        gamma,
        vec![vec![3.0, 4.0, 5.0, 10.0], vec![5.0, 6.0, 3.0, 11.0]],
        identity(4),
    ))
}

/// Stable versus increasing trajectories over six time points: three units
/// stay stable, five switch to the increasing state at time 4 and the
/// remaining 52 increase throughout. The composition reproduces the stated
/// transition matrix (5 switches out of 30 transitions from the stable
/// state). Variable 1 rises by 2 per step in the increasing state, variable
/// 2 is noise.
pub fn sim2_spec() -> SimSpec {
    let (n, nt) = (60, 6);
    let paths: Vec<Vec<usize>> = (0..n)
        .map(|i| match i {
            0..=2 => vec![0; nt],
            3..=7 => (0..nt).map(|t| usize::from(t >= 3)).collect(),
            _ => vec![1; nt],
        })
        .collect();
    let mut spec = base_spec(
        2,
        n,
        nt,
        vec![8.0 / 60.0, 52.0 / 60.0],
        vec![vec![25.0 / 30.0, 5.0 / 30.0], vec![0.0, 1.0]],
        vec![vec![0.0, 0.0], vec![0.0, 0.0]],
        identity(2),
    );
    spec.drift = Some(vec![vec![0.0, 0.0], vec![2.0, 0.0]]);
    spec.paths = Some(paths);
    spec
}

fn sim3_sigma() -> Vec<Vec<f64>> {
    vec![
        vec![1.0, 0.5, 0.0, 0.25],
        vec![0.5, 1.0, 0.5, 0.0],
        vec![0.0, 0.5, 1.0, 0.0],
        vec![0.25, 0.0, 0.0, 1.0],
    ]
}

pub fn sim3_spec(m: usize, p_miss: f64, n: usize) -> Result<SimSpec> {
    let mut spec = match m {
        2 => {
            let mut s = base_spec(
                2,
                n,
                5,
                vec![0.2, 0.8, 0.0],
                vec![vec![0.65, 0.05, 0.3], vec![0.25, 0.7, 0.05], vec![0.0, 0.0, 1.0]],
                vec![vec![5.0, 4.0, 5.0, 10.0], vec![5.0, 6.5, 3.0, 10.0]],
                sim3_sigma(),
            );
            s.m_miss = vec![0.7, 0.3];
            s.v_miss = vec![vec![0.0, 0.6, 0.4, 0.0]];
            s
        }
        3 => {
            let mut s = base_spec(
                3,
                n,
                5,
                vec![0.3, 0.6, 0.1, 0.0],
                vec![
                    vec![0.45, 0.15, 0.30, 0.10],
                    vec![0.2, 0.7, 0.05, 0.05],
                    vec![0.15, 0.0, 0.7, 0.15],
                    vec![0.0, 0.0, 0.0, 1.0],
                ],
                vec![vec![5.0, 4.0, 5.0, 10.0], vec![5.0, 6.5, 3.0, 10.0], vec![5.0, 3.0, 2.0, 7.0]],
                sim3_sigma(),
            );
            s.m_miss = vec![0.7, 0.0, 0.3];
            s.v_miss = vec![vec![0.0, 0.5, 0.4, 0.1]];
            s
        }
        _ => return Err(Error::InvalidInput(format!("simulation 3 defines m = 2 or 3, not {m}"))),
    };
    spec.p_miss = p_miss;
    Ok(spec)
}

pub fn sim4_spec(m: usize) -> Result<SimSpec> {
    let n = 500;
    match m {
        2 => {
            let mut s = base_spec(
                2,
                n,
                5,
                vec![0.5, 0.5],
                vec![vec![0.5, 0.5], vec![0.5, 0.5]],
                vec![vec![3.0, 5.0, 3.0, 10.0], vec![5.0, 4.0, 3.0, 11.0]],
                identity(4),
            );
            s.p_miss = 0.3;
            s.m_miss = vec![0.8, 0.2];
            s.v_miss = vec![vec![0.8, 0.2, 0.0, 0.0], vec![0.0, 0.0, 0.5, 0.5]];
            Ok(s)
        }
        3 => {
            let mut s = base_spec(
                3,
                n,
                5,
                vec![1.0 / 3.0; 3],
                vec![vec![0.2, 0.4, 0.4], vec![0.4, 0.2, 0.4], vec![0.4, 0.4, 0.2]],
                vec![vec![5.0, 6.0, 5.0, 10.0], vec![5.0, 6.0, 3.0, 10.5], vec![5.0, 5.5, 2.0, 9.0]],
                identity(4),
            );
            s.p_miss = 0.3;
            s.m_miss = vec![0.8, 0.0, 0.2];
            s.v_miss = vec![vec![0.0, 0.8, 0.2, 0.0], vec![0.0; 4], vec![0.0, 0.0, 0.5, 0.5]];
            Ok(s)
        }
        _ => Err(Error::InvalidInput(format!("simulation 4 defines m = 2 or 3, not {m}"))),
    }
}

/// Full grid of a study. Sample sizes and missingness levels that have no
/// dedicated column in the results table are folded into `gamma_id`.
pub fn settings(study: Study) -> Vec<StudySetting> {
    let mk = |gamma_id: String, spec: SimSpec, fits| StudySetting {
        study,
        gamma_id,
        spec,
        fits,
    };
    match study {
        Study::Sim1 => ["G1", "G2", "G3"]
            .iter()
            .flat_map(|g| [100, 500].map(|n| (g, n)))
            .map(|(g, n)| mk(g.to_string(), sim1_spec(g, n).expect("known id"), all_models(&[Mechanism::Mar])))
            .collect(),
        Study::Sim2 => vec![mk("G".into(), sim2_spec(), all_models(&[Mechanism::Mar]))],
        Study::Sim3 => {
            let mechs = [Mechanism::Mar, Mechanism::State, Mechanism::StateVariable];
            let mut out = Vec::new();
            for m in [2, 3] {
                for p_miss in [0.1, 0.3, 0.5] {
                    for n in [100, 500] {
                        let fits = mechs.iter().map(|&mech| (ModelStructure::VVA, mech)).collect();
                        out.push(mk(format!("m{m}-p{p_miss}"), sim3_spec(m, p_miss, n).expect("m is 2 or 3"), fits));
                    }
                }
            }
            out
        }
        Study::Sim4 => [2, 3]
            .iter()
            .map(|&m| {
                mk(
                    format!("m{m}"),
                    sim4_spec(m).expect("m is 2 or 3"),
                    all_models(&[Mechanism::Mar, Mechanism::StateVariable]),
                )
            })
            .collect(),
    }
}

/// Estimation settings shared by every fit in a study run.
#[derive(Debug, Clone)]
pub struct StudyOptions {
    pub n_starts: usize,
    pub max_iter: usize,
    pub rel_tol: f64,
}

impl Default for StudyOptions {
    fn default() -> Self {
        StudyOptions {
            n_starts: 10,
            max_iter: 1000,
            rel_tol: 1e-6,
        }
    }
}

/// One fitted model on one replicate. Failed fits carry NaN metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyRow {
    pub study: String,
    pub replicate: usize,
    pub model: String,
    pub mechanism: String,
    pub gamma_id: String,
    pub n: usize,
    pub misclass: f64,
    pub rmse_gamma: f64,
    pub rmse_delta: f64,
    pub rmse_mu: f64,
    pub rmse_sigma: f64,
    pub bic: f64,
    pub icl: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Seed for replicate `r` of a setting, independent of execution order.
pub fn replicate_seed(master: u64, setting: &StudySetting, r: usize) -> u64 {
    let key = format!("{}/{}/{}", setting.study.name(), setting.gamma_id, setting.spec.n);
    // FNV-1a over the setting key
    let h = key.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ u64::from(b)).wrapping_mul(0x100_0000_01b3));
    splitmix(splitmix(master ^ h).wrapping_add(r as u64))
}

fn run_one(setting: &StudySetting, r: usize, master: u64, opts: &StudyOptions) -> Vec<StudyRow> {
    let seed = replicate_seed(master, setting, r);
    let mut spec = setting.spec.clone();
    spec.seed = seed;
    let sim = generate(&spec);
    setting
        .fits
        .iter()
        .map(|&(structure, mechanism)| {
            let mut row = StudyRow {
                study: setting.study.name().into(),
                replicate: r + 1,
                model: structure.code().into(),
                mechanism: mechanism.name().into(),
                gamma_id: setting.gamma_id.clone(),
                n: spec.n,
                misclass: f64::NAN,
                rmse_gamma: f64::NAN,
                rmse_delta: f64::NAN,
                rmse_mu: f64::NAN,
                rmse_sigma: f64::NAN,
                bic: f64::NAN,
                icl: f64::NAN,
                iterations: 0,
                converged: false,
            };
            let Ok(sim) = &sim else { return row };
            let mut cfg = FitConfig::new(structure, spec.m);
            cfg.mechanism = mechanism;
            cfg.dropout = spec.has_dropout();
            cfg.n_starts = opts.n_starts;
            cfg.max_iter = opts.max_iter;
            cfg.rel_tol = opts.rel_tol;
            cfg.seed = seed;
            if let Ok(res) = fit(&sim.data, &cfg) {
                row.bic = res.bic;
                row.icl = res.icl;
                row.iterations = res.iterations;
                row.converged = res.converged;
                if let Ok(rep) = score(&res.decoded, &sim.states, &res.params, &sim.truth) {
                    row.misclass = rep.misclass;
                    row.rmse_gamma = rep.rmse_gamma;
                    row.rmse_delta = rep.rmse_delta;
                    row.rmse_mu = rep.rmse_mu;
                    row.rmse_sigma = rep.rmse_sigma;
                }
            }
            row
        })
        .collect()
}

/// Runs every setting for `replicates` replicates. Replicates run in
/// parallel; rows come back in (setting, replicate, fit) order.
pub fn run_settings(settings: &[StudySetting], replicates: usize, seed: u64, opts: &StudyOptions) -> Result<Vec<StudyRow>> {
    if replicates < 1 {
        return Err(Error::InvalidInput("need at least one replicate".into()));
    }
    for s in settings {
        s.spec.validate()?;
    }
    let jobs: Vec<(usize, usize)> = (0..settings.len()).flat_map(|s| (0..replicates).map(move |r| (s, r))).collect();
    let rows: Vec<Vec<StudyRow>> = jobs
        .par_iter()
        .map(|&(s, r)| run_one(&settings[s], r, seed, opts))
        .collect();
    Ok(rows.into_iter().flatten().collect())
}

pub fn run_study(study: Study, replicates: usize, seed: u64, opts: &StudyOptions) -> Result<Vec<StudyRow>> {
    run_settings(&settings(study), replicates, seed, opts)
}

/// Mean and sample standard deviation over replicates of one cell.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StudySummary {
    pub study: String,
    pub model: String,
    pub mechanism: String,
    pub gamma_id: String,
    pub n: usize,
    pub replicates: usize,
    pub failures: usize,
    pub misclass_mean: f64,
    pub misclass_sd: f64,
    pub rmse_gamma: f64,
    pub rmse_delta: f64,
    pub rmse_mu: f64,
    pub rmse_sigma: f64,
    pub bic: f64,
    pub icl: f64,
}

/// Aggregates rows by (study, model, mechanism, gamma_id, n); failed fits
/// are counted and left out of the means.
pub fn summarize(rows: &[StudyRow]) -> Vec<StudySummary> {
    let mut keys: Vec<(String, String, String, String, usize)> = Vec::new();
    for r in rows {
        let k = (r.study.clone(), r.model.clone(), r.mechanism.clone(), r.gamma_id.clone(), r.n);
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    keys.into_iter()
        .map(|(study, model, mechanism, gamma_id, n)| {
            let group: Vec<&StudyRow> = rows
                .iter()
                .filter(|r| r.study == study && r.model == model && r.mechanism == mechanism && r.gamma_id == gamma_id && r.n == n)
                .collect();
            let ok: Vec<&&StudyRow> = group.iter().filter(|r| r.misclass.is_finite()).collect();
            let mean = |f: &dyn Fn(&StudyRow) -> f64| {
                if ok.is_empty() {
                    f64::NAN
                } else {
                    ok.iter().map(|r| f(r)).sum::<f64>() / ok.len() as f64
                }
            };
            let mc = mean(&|r| r.misclass);
            let sd = if ok.len() > 1 {
                (ok.iter().map(|r| (r.misclass - mc).powi(2)).sum::<f64>() / (ok.len() - 1) as f64).sqrt()
            } else {
                0.0
            };
            StudySummary {
                replicates: group.len(),
                failures: group.len() - ok.len(),
                misclass_mean: mc,
                misclass_sd: sd,
                rmse_gamma: mean(&|r| r.rmse_gamma),
                rmse_delta: mean(&|r| r.rmse_delta),
                rmse_mu: mean(&|r| r.rmse_mu),
                rmse_sigma: mean(&|r| r.rmse_sigma),
                bic: mean(&|r| r.bic),
                icl: mean(&|r| r.icl),
                study,
                model,
                mechanism,
                gamma_id,
                n,
            }
        })
        .collect()
}
