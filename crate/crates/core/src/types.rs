//! Panel data, model structure and parameter types shared by every stage.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::cholesky::ModChol;
use crate::error::{Error, Result};

/// Whether a covariance factor is shared across states.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Constraint {
    Equal,
    Variable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DShape {
    Anisotropic,
    Isotropic,
}

/// One of the eight members of the family, named by the three-letter code
/// (T constraint, D constraint, D shape), e.g. `VEI`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelStructure {
    pub t_constraint: Constraint,
    pub d_constraint: Constraint,
    pub d_shape: DShape,
}

impl ModelStructure {
    pub const fn new(t: Constraint, d: Constraint, shape: DShape) -> Self {
        ModelStructure {
            t_constraint: t,
            d_constraint: d,
            d_shape: shape,
        }
    }

    pub const EEA: Self = Self::new(Constraint::Equal, Constraint::Equal, DShape::Anisotropic);
    pub const VVA: Self = Self::new(Constraint::Variable, Constraint::Variable, DShape::Anisotropic);
    pub const VEA: Self = Self::new(Constraint::Variable, Constraint::Equal, DShape::Anisotropic);
    pub const EVA: Self = Self::new(Constraint::Equal, Constraint::Variable, DShape::Anisotropic);
    pub const VVI: Self = Self::new(Constraint::Variable, Constraint::Variable, DShape::Isotropic);
    pub const VEI: Self = Self::new(Constraint::Variable, Constraint::Equal, DShape::Isotropic);
    pub const EVI: Self = Self::new(Constraint::Equal, Constraint::Variable, DShape::Isotropic);
    pub const EEI: Self = Self::new(Constraint::Equal, Constraint::Equal, DShape::Isotropic);

    /// All members in table order.
    pub const ALL: [ModelStructure; 8] = [
        Self::EEA,
        Self::VVA,
        Self::VEA,
        Self::EVA,
        Self::VVI,
        Self::VEI,
        Self::EVI,
        Self::EEI,
    ];

    pub fn code(&self) -> &'static str {
        use Constraint::*;
        use DShape::*;
        match (self.t_constraint, self.d_constraint, self.d_shape) {
            (Equal, Equal, Anisotropic) => "EEA",
            (Variable, Variable, Anisotropic) => "VVA",
            (Variable, Equal, Anisotropic) => "VEA",
            (Equal, Variable, Anisotropic) => "EVA",
            (Variable, Variable, Isotropic) => "VVI",
            (Variable, Equal, Isotropic) => "VEI",
            (Equal, Variable, Isotropic) => "EVI",
            (Equal, Equal, Isotropic) => "EEI",
        }
    }

    pub fn shared_t(&self) -> bool {
        self.t_constraint == Constraint::Equal
    }

    pub fn shared_d(&self) -> bool {
        self.d_constraint == Constraint::Equal
    }

    pub fn isotropic(&self) -> bool {
        self.d_shape == DShape::Isotropic
    }
}

impl fmt::Display for ModelStructure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for ModelStructure {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let upper = s.trim().to_ascii_uppercase();
        ModelStructure::ALL
            .iter()
            .copied()
            .find(|m| m.code() == upper)
            .ok_or_else(|| Error::InvalidInput(format!("unknown model '{s}'")))
    }
}

/// Free covariance parameters for a family member.
pub fn count_free_params(structure: ModelStructure, m: usize, p: usize) -> usize {
    let lower = p * (p - 1) / 2;
    let t_part = if structure.shared_t() { lower } else { m * lower };
    let per_d = if structure.isotropic() { 1 } else { p };
    let d_part = if structure.shared_d() { per_d } else { m * per_d };
    t_part + d_part
}

/// Probit missingness mechanism.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mechanism {
    /// Ignorable; no missingness factor.
    Mar,
    /// `α_c`
    State,
    /// `α_cj`
    StateVariable,
    /// `α_c + β t`
    StateTimeShared,
    /// `α_ct`
    StateTimeFull,
    /// `α_cj + β t`
    StateVarTimeShared,
    /// `α_cjt`
    StateVarTimeFull,
}

impl Mechanism {
    pub const ALL: [Mechanism; 7] = [
        Mechanism::Mar,
        Mechanism::State,
        Mechanism::StateVariable,
        Mechanism::StateTimeShared,
        Mechanism::StateTimeFull,
        Mechanism::StateVarTimeShared,
        Mechanism::StateVarTimeFull,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Mechanism::Mar => "mar",
            Mechanism::State => "state",
            Mechanism::StateVariable => "state-var",
            Mechanism::StateTimeShared => "state-time-shared",
            Mechanism::StateTimeFull => "state-time-full",
            Mechanism::StateVarTimeShared => "state-var-time-shared",
            Mechanism::StateVarTimeFull => "state-var-time-full",
        }
    }

    pub fn has_shared_slope(&self) -> bool {
        matches!(self, Mechanism::StateTimeShared | Mechanism::StateVarTimeShared)
    }

    /// Number of `α` coefficients (the shared slope is counted separately).
    pub fn alpha_len(&self, m: usize, p: usize, n_times: usize) -> usize {
        match self {
            Mechanism::Mar => 0,
            Mechanism::State | Mechanism::StateTimeShared => m,
            Mechanism::StateVariable | Mechanism::StateVarTimeShared => m * p,
            Mechanism::StateTimeFull => m * n_times,
            Mechanism::StateVarTimeFull => m * p * n_times,
        }
    }

    pub fn coefficient_count(&self, m: usize, p: usize, n_times: usize) -> usize {
        self.alpha_len(m, p, n_times) + usize::from(self.has_shared_slope())
    }
}

impl fmt::Display for Mechanism {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mechanism {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase().replace('_', "-");
        Mechanism::ALL
            .iter()
            .copied()
            .find(|m| m.name() == key)
            .ok_or_else(|| Error::InvalidInput(format!("unknown mechanism '{s}'")))
    }
}

/// Missingness coefficients. `alpha` is laid out state-major:
/// `[c]`, `[c][j]`, `[c][t]` or `[c][j][t]` depending on the mechanism.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MissParams {
    pub mechanism: Mechanism,
    pub m: usize,
    pub p: usize,
    pub n_times: usize,
    pub alpha: Vec<f64>,
    pub beta_t: Option<f64>,
    /// Value of the time covariate at each grid point.
    pub times: Vec<f64>,
}

impl MissParams {
    pub fn mar(m: usize, p: usize, n_times: usize) -> Self {
        MissParams {
            mechanism: Mechanism::Mar,
            m,
            p,
            n_times,
            alpha: Vec::new(),
            beta_t: None,
            times: (1..=n_times).map(|t| t as f64).collect(),
        }
    }

    /// Coefficients all zero (missingness probability one half everywhere).
    pub fn zeros(mechanism: Mechanism, m: usize, p: usize, times: Vec<f64>) -> Self {
        let n_times = times.len();
        MissParams {
            mechanism,
            m,
            p,
            n_times,
            alpha: vec![0.0; mechanism.alpha_len(m, p, n_times)],
            beta_t: mechanism.has_shared_slope().then_some(0.0),
            times,
        }
    }

    /// Probit linear predictor for state `c`, variable `j`, time index `t`.
    pub fn eta(&self, c: usize, j: usize, t: usize) -> f64 {
        let (p, nt) = (self.p, self.n_times);
        match self.mechanism {
            Mechanism::Mar => 0.0,
            Mechanism::State => self.alpha[c],
            Mechanism::StateVariable => self.alpha[c * p + j],
            Mechanism::StateTimeShared => self.alpha[c] + self.beta_t.unwrap_or(0.0) * self.times[t],
            Mechanism::StateTimeFull => self.alpha[c * nt + t],
            Mechanism::StateVarTimeShared => {
                self.alpha[c * p + j] + self.beta_t.unwrap_or(0.0) * self.times[t]
            }
            Mechanism::StateVarTimeFull => self.alpha[(c * p + j) * nt + t],
        }
    }

    pub fn coefficient_count(&self) -> usize {
        self.mechanism.coefficient_count(self.m, self.p, self.n_times)
    }

    fn shape_ok(&self) -> bool {
        self.alpha.len() == self.mechanism.alpha_len(self.m, self.p, self.n_times)
            && self.beta_t.is_some() == self.mechanism.has_shared_slope()
            && self.times.len() == self.n_times
    }
}

/// `n × T × p` observations with an authoritative missingness mask.
#[derive(Debug, Clone, PartialEq)]
pub struct PanelDataset {
    pub n: usize,
    pub n_times: usize,
    pub p: usize,
    /// Row-major `[i][t][j]`; masked cells hold NaN and are never read.
    pub values: Vec<f64>,
    /// `true` = unobserved.
    pub mask: Vec<bool>,
    /// 0-based first dropped time index per subject.
    pub dropout: Vec<Option<usize>>,
    pub ids: Vec<String>,
    /// Raw time values of the common grid.
    pub times: Vec<f64>,
    pub var_names: Vec<String>,
}

impl PanelDataset {
    /// Builds a dataset, forcing masked cells to NaN and checking the
    /// dropout/mask consistency.
    pub fn new(
        n: usize,
        n_times: usize,
        p: usize,
        mut values: Vec<f64>,
        mask: Vec<bool>,
        dropout: Vec<Option<usize>>,
    ) -> Result<Self> {
        if n < 1 || n_times < 2 || p < 1 {
            return Err(Error::InvalidInput(format!(
                "need n >= 1, T >= 2, p >= 1 (got n={n}, T={n_times}, p={p})"
            )));
        }
        let len = n * n_times * p;
        if values.len() != len || mask.len() != len || dropout.len() != n {
            return Err(Error::InvalidInput(format!(
                "shape mismatch: values {}, mask {}, dropout {} for n={n}, T={n_times}, p={p}",
                values.len(),
                mask.len(),
                dropout.len()
            )));
        }
        for (v, &m) in values.iter_mut().zip(&mask) {
            if m {
                *v = f64::NAN;
            } else if !v.is_finite() {
                return Err(Error::Data("observed value is not finite".into()));
            }
        }
        let ds = PanelDataset {
            n,
            n_times,
            p,
            values,
            mask,
            dropout,
            ids: (1..=n).map(|i| i.to_string()).collect(),
            times: (1..=n_times).map(|t| t as f64).collect(),
            var_names: (1..=p).map(|j| format!("x{j}")).collect(),
        };
        for i in 0..n {
            if let Some(td) = ds.dropout[i] {
                if td == 0 || td >= n_times {
                    return Err(Error::Data(format!(
                        "subject {}: dropout time {} outside 2..={}",
                        i + 1,
                        td + 1,
                        n_times
                    )));
                }
                for t in td..n_times {
                    if !ds.row_fully_missing(i, t) {
                        return Err(Error::Data(format!(
                            "subject {}: observed values after dropout at time {}",
                            i + 1,
                            t + 1
                        )));
                    }
                }
            }
        }
        Ok(ds)
    }

    #[inline]
    pub fn offset(&self, i: usize, t: usize) -> usize {
        (i * self.n_times + t) * self.p
    }

    pub fn row(&self, i: usize, t: usize) -> &[f64] {
        let o = self.offset(i, t);
        &self.values[o..o + self.p]
    }

    pub fn mask_row(&self, i: usize, t: usize) -> &[bool] {
        let o = self.offset(i, t);
        &self.mask[o..o + self.p]
    }

    pub fn row_fully_missing(&self, i: usize, t: usize) -> bool {
        self.mask_row(i, t).iter().all(|&m| m)
    }

    pub fn has_missing(&self) -> bool {
        self.mask.iter().any(|&m| m)
    }

    /// Whether `(i, t)` lies at or after the subject's dropout time.
    #[inline]
    pub fn is_dropped(&self, i: usize, t: usize) -> bool {
        matches!(self.dropout[i], Some(td) if t >= td)
    }

    pub fn has_dropout(&self) -> bool {
        self.dropout.iter().any(Option::is_some)
    }
}

/// Parameters of an `m`-state model, optionally augmented with an absorbing
/// dropout state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HmmParams {
    pub m: usize,
    pub dropout: bool,
    /// Initial distribution over `K = m (+1)` states.
    pub delta: Vec<f64>,
    /// `K × K` row-stochastic transition matrix.
    pub gamma: DMatrix<f64>,
    pub mu: Vec<DVector<f64>>,
    pub chol: Vec<ModChol>,
    pub miss: MissParams,
}

impl HmmParams {
    /// Total chain states including the absorbing one.
    pub fn k(&self) -> usize {
        self.m + usize::from(self.dropout)
    }

    pub fn p(&self) -> usize {
        self.mu.first().map_or(0, |v| v.len())
    }

    pub fn sigma(&self, j: usize) -> DMatrix<f64> {
        self.chol[j].sigma()
    }

    /// Reorders the regular states: new state `s` takes old state `perm[s]`.
    pub fn permuted(&self, perm: &[usize]) -> HmmParams {
        let k = self.k();
        let full: Vec<usize> = perm.iter().copied().chain(self.m..k).collect();
        let mut gamma = DMatrix::zeros(k, k);
        for a in 0..k {
            for b in 0..k {
                gamma[(a, b)] = self.gamma[(full[a], full[b])];
            }
        }
        let mut miss = self.miss.clone();
        let (p, nt) = (self.miss.p, self.miss.n_times);
        let block = match self.miss.mechanism {
            Mechanism::Mar => 0,
            Mechanism::State | Mechanism::StateTimeShared => 1,
            Mechanism::StateVariable | Mechanism::StateVarTimeShared => p,
            Mechanism::StateTimeFull => nt,
            Mechanism::StateVarTimeFull => p * nt,
        };
        if block > 0 {
            miss.alpha = perm
                .iter()
                .flat_map(|&old| self.miss.alpha[old * block..(old + 1) * block].iter().copied())
                .collect();
        }
        HmmParams {
            m: self.m,
            dropout: self.dropout,
            delta: full.iter().map(|&s| self.delta[s]).collect(),
            gamma,
            mu: perm.iter().map(|&s| self.mu[s].clone()).collect(),
            chol: perm.iter().map(|&s| self.chol[s].clone()).collect(),
            miss,
        }
    }
}

/// One failed parameter check.
#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub kind: &'static str,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.kind, self.detail)
    }
}

const STOCHASTIC_TOL: f64 = 1e-12;

/// Checks every structural invariant of `params`; returns all violations.
pub fn validate(params: &HmmParams, structure: ModelStructure) -> std::result::Result<(), Vec<Violation>> {
    let mut out = Vec::new();
    let mut push = |kind: &'static str, detail: String| out.push(Violation { kind, detail });
    let m = params.m;
    let k = params.k();
    if m == 0 {
        push("shape", "m must be at least 1".into());
    }
    if params.delta.len() != k {
        push("shape", format!("delta has {} entries, expected {k}", params.delta.len()));
    } else {
        let sum: f64 = params.delta.iter().sum();
        if (sum - 1.0).abs() > STOCHASTIC_TOL || params.delta.iter().any(|&v| v < 0.0 || !v.is_finite()) {
            push("initial distribution", format!("delta sums to {sum}"));
        }
        if params.dropout && params.delta[m] != 0.0 {
            push("absorbing state", "initial probability of the dropout state must be 0".into());
        }
    }
    if params.gamma.nrows() != k || params.gamma.ncols() != k {
        push(
            "shape",
            format!("gamma is {}x{}, expected {k}x{k}", params.gamma.nrows(), params.gamma.ncols()),
        );
    } else {
        for r in 0..k {
            let row = params.gamma.row(r);
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > STOCHASTIC_TOL || row.iter().any(|&v| v < 0.0 || !v.is_finite()) {
                push("transition", format!("row {} not stochastic (sums to {sum})", r + 1));
            }
        }
        if params.dropout {
            for c in 0..k {
                let expected = if c == m { 1.0 } else { 0.0 };
                if params.gamma[(m, c)] != expected {
                    push("absorbing state", format!("row {} must be a unit vector", m + 1));
                    break;
                }
            }
        }
    }
    let p = params.p();
    if params.mu.len() != m || params.mu.iter().any(|v| v.len() != p) {
        push("shape", "mu must hold m vectors of length p".into());
    }
    if params.chol.len() != m {
        push("shape", format!("{} Cholesky pairs for {m} states", params.chol.len()));
    }
    for (j, pair) in params.chol.iter().enumerate() {
        if pair.dim() != p || !pair.is_well_formed(0.0) {
            push("cholesky", format!("state {}: T must be unit lower triangular and D positive", j + 1));
        }
    }
    if params.chol.len() == m && m > 0 {
        if structure.shared_t() && params.chol.iter().any(|c| c.t != params.chol[0].t) {
            push("equal T", "T differs between states".into());
        }
        if structure.shared_d() && params.chol.iter().any(|c| c.d != params.chol[0].d) {
            push("equal D", "D differs between states".into());
        }
        if structure.isotropic() {
            for (j, pair) in params.chol.iter().enumerate() {
                if pair.d.iter().any(|&v| v != pair.d[0]) {
                    push("isotropy", format!("state {}: D is not a multiple of I", j + 1));
                }
            }
        }
    }
    if !params.miss.shape_ok() || params.miss.m != m || params.miss.p != p {
        push("missingness", format!("coefficient shape does not match mechanism {}", params.miss.mechanism));
    }
    if out.is_empty() {
        Ok(())
    } else {
        Err(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn two_state() -> HmmParams {
        HmmParams {
            m: 2,
            dropout: false,
            delta: vec![0.5, 0.5],
            gamma: DMatrix::from_row_slice(2, 2, &[0.9, 0.1, 0.2, 0.8]),
            mu: vec![DVector::from_vec(vec![0.0, 0.0]), DVector::from_vec(vec![3.0, 3.0])],
            chol: vec![ModChol::identity(2), ModChol::identity(2)],
            miss: MissParams::mar(2, 2, 4),
        }
    }

    #[test]
    fn table_counts() {
        assert_eq!(count_free_params(ModelStructure::EEA, 2, 4), 10);
        assert_eq!(count_free_params(ModelStructure::VVA, 2, 4), 20);
        assert_eq!(count_free_params(ModelStructure::EEI, 3, 1), 1);
    }

    #[test]
    fn codes_round_trip() {
        for s in ModelStructure::ALL {
            assert_eq!(s.code().parse::<ModelStructure>().unwrap(), s);
            assert_eq!(s.code().to_lowercase().parse::<ModelStructure>().unwrap(), s);
        }
        let codes: std::collections::HashSet<_> = ModelStructure::ALL.iter().map(|s| s.code()).collect();
        assert_eq!(codes.len(), 8);
        for m in Mechanism::ALL {
            assert_eq!(m.name().parse::<Mechanism>().unwrap(), m);
        }
    }

    #[test]
    fn valid_params_pass() {
        assert!(validate(&two_state(), ModelStructure::VVA).is_ok());
        assert!(validate(&two_state(), ModelStructure::EEI).is_ok());
    }

    #[test]
    fn non_stochastic_row_reported() {
        let mut p = two_state();
        p.gamma[(0, 1)] = 0.0;
        let errs = validate(&p, ModelStructure::VVA).unwrap_err();
        assert!(errs.iter().any(|v| v.detail.contains("row 1 not stochastic")), "{errs:?}");
    }

    #[test]
    fn isotropy_reported() {
        let mut p = two_state();
        p.chol[0].d = DVector::from_vec(vec![1.0, 2.0]);
        p.chol[1].d = DVector::from_vec(vec![1.0, 2.0]);
        let errs = validate(&p, ModelStructure::EEI).unwrap_err();
        assert!(errs.iter().any(|v| v.kind == "isotropy"));
        assert!(validate(&p, ModelStructure::EEA).is_ok());
    }

    #[test]
    fn dropout_structure_checked() {
        let mut p = two_state();
        p.dropout = true;
        p.delta = vec![0.5, 0.5, 0.0];
        p.gamma = DMatrix::from_row_slice(3, 3, &[0.8, 0.1, 0.1, 0.1, 0.8, 0.1, 0.0, 0.0, 1.0]);
        assert!(validate(&p, ModelStructure::VVA).is_ok());
        p.gamma = DMatrix::from_row_slice(3, 3, &[0.8, 0.1, 0.1, 0.1, 0.8, 0.1, 0.5, 0.0, 0.5]);
        let errs = validate(&p, ModelStructure::VVA).unwrap_err();
        assert!(errs.iter().any(|v| v.kind == "absorbing state"));
    }

    #[test]
    fn dataset_rejects_observed_after_dropout() {
        let mask = vec![false, false, true, false];
        let err = PanelDataset::new(1, 2, 2, vec![1.0; 4], mask, vec![Some(1)]).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
    }

    #[test]
    fn dataset_sentinels_masked_cells() {
        let ds = PanelDataset::new(1, 2, 1, vec![1.0, 2.0], vec![false, true], vec![None]).unwrap();
        assert!(ds.values[1].is_nan());
        assert!(ds.row_fully_missing(0, 1));
    }

    #[test]
    fn permutation_moves_state_blocks() {
        let mut p = two_state();
        p.miss = MissParams {
            alpha: vec![1.0, 2.0, 3.0, 4.0],
            ..MissParams::zeros(Mechanism::StateVariable, 2, 2, vec![1.0, 2.0, 3.0, 4.0])
        };
        let q = p.permuted(&[1, 0]);
        assert_eq!(q.mu[0], p.mu[1]);
        assert_eq!(q.gamma[(0, 0)], p.gamma[(1, 1)]);
        assert_eq!(q.gamma[(0, 1)], p.gamma[(1, 0)]);
        assert_eq!(q.miss.alpha, vec![3.0, 4.0, 1.0, 2.0]);
    }
}
