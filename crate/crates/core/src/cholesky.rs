//! Modified Cholesky decomposition `T Σ T' = D`.
//!
//! `T` is unit lower triangular and `D` diagonal with positive entries. Row
//! `r` of `T` holds the negated coefficients of the least-squares regression
//! of variable `r` on variables `1..r-1`; `d_r` is the innovation variance of
//! that regression.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Relative pivot floor below which a matrix is rejected as not positive definite.
pub const PIVOT_TOLERANCE: f64 = 1e-12;

/// A `(T, D)` pair with `D` stored as its diagonal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModChol {
    pub t: DMatrix<f64>,
    pub d: DVector<f64>,
}

impl ModChol {
    pub fn identity(p: usize) -> Self {
        ModChol {
            t: DMatrix::identity(p, p),
            d: DVector::from_element(p, 1.0),
        }
    }

    pub fn dim(&self) -> usize {
        self.d.len()
    }

    /// `log |Σ| = Σ_r log d_r`, since `|T| = 1`.
    pub fn log_det(&self) -> f64 {
        self.d.iter().map(|v| v.ln()).sum()
    }

    /// `Σ⁻¹ = T' D⁻¹ T`.
    pub fn precision(&self) -> DMatrix<f64> {
        reconstruct_sigma_inverse(self)
    }

    /// `Σ = T⁻¹ D T'⁻¹`.
    pub fn sigma(&self) -> DMatrix<f64> {
        let tinv = unit_lower_inverse(&self.t);
        let mut scaled = tinv.clone();
        for c in 0..scaled.ncols() {
            let dc = self.d[c];
            scaled.column_mut(c).scale_mut(dc);
        }
        let mut s = &scaled * tinv.transpose();
        symmetrize(&mut s);
        s
    }

    /// Checks the unit-triangular and positive-diagonal structure.
    pub fn is_well_formed(&self, tol: f64) -> bool {
        let p = self.dim();
        if self.t.nrows() != p || self.t.ncols() != p {
            return false;
        }
        for r in 0..p {
            if (self.t[(r, r)] - 1.0).abs() > tol {
                return false;
            }
            for c in (r + 1)..p {
                if self.t[(r, c)] != 0.0 {
                    return false;
                }
            }
            if !(self.d[r] > 0.0) || !self.d[r].is_finite() {
                return false;
            }
        }
        self.t.iter().all(|v| v.is_finite())
    }
}

/// Plain lower Cholesky factor `L` with `Σ = L L'`.
///
/// Fails with the 1-based index of the first leading minor whose pivot falls
/// below `PIVOT_TOLERANCE` times the largest diagonal entry.
pub fn lower_cholesky(sigma: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let p = sigma.nrows();
    if sigma.ncols() != p {
        return Err(Error::InvalidInput(format!(
            "expected a square matrix, got {}x{}",
            p,
            sigma.ncols()
        )));
    }
    let max_diag = (0..p).map(|i| sigma[(i, i)].abs()).fold(0.0, f64::max);
    let floor = PIVOT_TOLERANCE * max_diag.max(f64::MIN_POSITIVE);
    let mut l = DMatrix::zeros(p, p);
    for j in 0..p {
        let mut pivot = sigma[(j, j)];
        for k in 0..j {
            pivot -= l[(j, k)] * l[(j, k)];
        }
        if !(pivot > floor) || !pivot.is_finite() {
            return Err(Error::NotPositiveDefinite {
                minor: j + 1,
                pivot,
            });
        }
        let ljj = pivot.sqrt();
        l[(j, j)] = ljj;
        for i in (j + 1)..p {
            let mut v = sigma[(i, j)];
            for k in 0..j {
                v -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = v / ljj;
        }
    }
    Ok(l)
}

/// Inverse of a lower triangular matrix by forward substitution.
pub fn lower_inverse(l: &DMatrix<f64>) -> DMatrix<f64> {
    let p = l.nrows();
    let mut inv = DMatrix::zeros(p, p);
    for c in 0..p {
        inv[(c, c)] = 1.0 / l[(c, c)];
        for r in (c + 1)..p {
            let mut acc = 0.0;
            for k in c..r {
                acc += l[(r, k)] * inv[(k, c)];
            }
            inv[(r, c)] = -acc / l[(r, r)];
        }
    }
    inv
}

fn unit_lower_inverse(t: &DMatrix<f64>) -> DMatrix<f64> {
    let p = t.nrows();
    let mut inv = DMatrix::identity(p, p);
    for c in 0..p {
        for r in (c + 1)..p {
            let mut acc = 0.0;
            for k in c..r {
                acc += t[(r, k)] * inv[(k, c)];
            }
            inv[(r, c)] = -acc;
        }
    }
    inv
}

pub(crate) fn symmetrize(m: &mut DMatrix<f64>) {
    let p = m.nrows();
    for i in 0..p {
        for j in (i + 1)..p {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Modified Cholesky decomposition of a symmetric positive-definite matrix.
///
/// Computed from the ordinary factor `Σ = L L'` as `T = diag(L) L⁻¹` and
/// `D = diag(L)²`.
pub fn decompose(sigma: &DMatrix<f64>) -> Result<ModChol> {
    let p = sigma.nrows();
    let scale = (0..p).map(|i| sigma[(i, i)].abs()).fold(1.0, f64::max);
    for i in 0..p {
        for j in 0..i {
            if (sigma[(i, j)] - sigma[(j, i)]).abs() > 1e-10 * scale {
                return Err(Error::InvalidInput(format!(
                    "matrix is not symmetric at ({}, {})",
                    i + 1,
                    j + 1
                )));
            }
        }
    }
    let l = lower_cholesky(sigma)?;
    let linv = lower_inverse(&l);
    let mut t = DMatrix::zeros(p, p);
    let mut d = DVector::zeros(p);
    for r in 0..p {
        let lrr = l[(r, r)];
        d[r] = lrr * lrr;
        for c in 0..r {
            t[(r, c)] = lrr * linv[(r, c)];
        }
        t[(r, r)] = 1.0;
    }
    Ok(ModChol { t, d })
}

/// `T' D⁻¹ T`.
pub fn reconstruct_sigma_inverse(pair: &ModChol) -> DMatrix<f64> {
    let p = pair.dim();
    let mut scaled = pair.t.clone();
    for r in 0..p {
        let w = 1.0 / pair.d[r];
        scaled.row_mut(r).scale_mut(w);
    }
    let mut out = pair.t.transpose() * scaled;
    symmetrize(&mut out);
    out
}

/// Gaussian log-density with precision `T' D⁻¹ T`.
pub fn log_density(x: &[f64], mu: &[f64], pair: &ModChol) -> f64 {
    let p = pair.dim();
    debug_assert_eq!(x.len(), p);
    debug_assert_eq!(mu.len(), p);
    // z = T (x - mu); quadratic form = Σ z_r² / d_r
    let mut quad = 0.0;
    for r in 0..p {
        let mut z = x[r] - mu[r];
        for c in 0..r {
            z += pair.t[(r, c)] * (x[c] - mu[c]);
        }
        quad += z * z / pair.d[r];
    }
    -0.5 * (p as f64) * LN_2PI - 0.5 * pair.log_det() - 0.5 * quad
}
