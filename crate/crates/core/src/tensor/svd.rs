//! Full SVD by cyclic one-sided Jacobi.
//!
//! For an input of shape d x n the factors are a full d x d orthogonal `u`,
//! min(d, n) nonincreasing nonnegative singular values, and a full n x n
//! orthogonal `v`, with `m = u * diag(s) * v^T`.
//!
//! Two properties matter downstream and are guaranteed here:
//!
//! * the computation is a pure function of the entries, so repeated calls
//!   give bit-identical factors;
//! * every `u` column has its largest-magnitude entry nonnegative (ties
//!   resolved at the lowest row index), with the paired `v` column flipped
//!   to compensate. Null-space columns of `u` come from a seed-free
//!   Gram-Schmidt completion that keeps each column near its own axis.

use super::Matrix;
use crate::error::{Error, Result};

/// Relative off-diagonal threshold below which a column pair counts as
/// orthogonal. Well above roundoff noise so the sweep loop terminates.
const OFF_DIAG_TOL: f64 = 1e-13;

const MAX_SWEEPS: usize = 64;

/// Factors of a full singular value decomposition.
#[derive(Debug, Clone)]
pub struct SvdResult {
    /// Left factor, square with orthonormal columns.
    pub u: Matrix,
    /// Singular values, nonincreasing, length min(rows, cols).
    pub s: Vec<f64>,
    /// Right factor, square with orthonormal columns.
    pub v: Matrix,
}

impl SvdResult {
    /// Rebuilds `u * diag(s) * v^T`.
    pub fn reconstruct(&self) -> Result<Matrix> {
        let d = self.u.rows();
        let n = self.v.rows();
        let mut out = Matrix::zeros(d, n)?;
        for (k, &sk) in self.s.iter().enumerate() {
            if sk == 0.0 {
                continue;
            }
            for i in 0..d {
                let uik = self.u.get(i, k) * sk;
                if uik == 0.0 {
                    continue;
                }
                for j in 0..n {
                    out.set(i, j, out.get(i, j) + uik * self.v.get(j, k));
                }
            }
        }
        Ok(out)
    }
}

/// Computes the full SVD of `m`.
///
/// Inputs with NaN or infinity are rejected with `NonFinite`; exceeding the
/// sweep budget reports `ConvergenceFailure`.
pub fn full_svd(m: &Matrix) -> Result<SvdResult> {
    if !m.is_finite() {
        return Err(Error::NonFinite("svd input".into()));
    }
    let (rows, cols) = m.shape();
    let mut out = if rows >= cols {
        let (u, s, v) = jacobi_tall(m)?;
        SvdResult { u, s, v }
    } else {
        // m = (m^T)^T: factor the transpose and swap the sides.
        let (ut, st, vt) = jacobi_tall(&m.transpose())?;
        SvdResult { u: vt, s: st, v: ut }
    };
    apply_sign_convention(&mut out);
    if !out.u.is_finite() || !out.v.is_finite() || !out.s.iter().all(|s| s.is_finite()) {
        return Err(Error::NonFinite("svd output".into()));
    }
    Ok(out)
}

/// One-sided Jacobi on a tall (or square) matrix, d >= n.
///
/// Returns (u: d x d, s: len n, v: n x n) before sign normalization.
fn jacobi_tall(m: &Matrix) -> Result<(Matrix, Vec<f64>, Matrix)> {
    let (d, n) = m.shape();
    debug_assert!(d >= n);

    // Column-major working copies: a accumulates rotations applied to m's
    // columns, v accumulates the same rotations applied to the identity.
    let mut a: Vec<Vec<f64>> = (0..n).map(|j| m.col(j)).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        })
        .collect();

    let mut converged = false;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n.saturating_sub(1) {
            for q in (p + 1)..n {
                let app = dot(&a[p], &a[p]);
                let aqq = dot(&a[q], &a[q]);
                // A column whose squared norm falls out of the normal range
                // is cancellation residue of a zero singular value: its
                // direction is unrepresentable, yet its cross products can
                // stay nonzero forever. Clear it so every pair holding it
                // reads as exactly orthogonal.
                if app < f64::MIN_POSITIVE {
                    a[p].iter_mut().for_each(|x| *x = 0.0);
                }
                if aqq < f64::MIN_POSITIVE {
                    a[q].iter_mut().for_each(|x| *x = 0.0);
                }
                let apq = dot(&a[p], &a[q]);
                // Factored roots: the threshold stays positive whenever both
                // norms are representable, even where `app * aqq` underflows.
                if apq.abs() <= OFF_DIAG_TOL * app.sqrt() * aqq.sqrt() {
                    continue;
                }
                // Jacobi rotation annihilating the (p, q) Gram entry. The
                // asymptotic branch agrees with the closed form within an
                // ulp from |tau| > 1e8 on; past 1e130, tau * tau overflows.
                let tau = (aqq - app) / (2.0 * apq);
                let t = if tau.abs() > 1e130 {
                    0.5 / tau
                } else {
                    tau.signum() / (tau.abs() + (1.0 + tau * tau).sqrt())
                };
                if t == 0.0 {
                    // An identity rotation cannot move this pair.
                    continue;
                }
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_pair(&mut a, p, q, c, s);
                rotate_pair(&mut v, p, q, c, s);
                rotated = true;
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::ConvergenceFailure { sweeps: MAX_SWEEPS, rows: d, cols: n });
    }

    let norms: Vec<f64> = a.iter().map(|col| dot(col, col).sqrt()).collect();
    if !norms.iter().all(|x| x.is_finite()) {
        return Err(Error::NonFinite("svd column norms".into()));
    }

    // Sort singular values descending; ties keep the lower column index.
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&i, &j| norms[j].partial_cmp(&norms[i]).unwrap().then(i.cmp(&j)));

    let smax = norms[idx[0]];
    // Below this norm a column's direction is dominated by roundoff; its
    // u column is rebuilt by basis completion instead of normalization.
    let reliable = smax * (d.max(n) as f64) * 1e-13;

    let mut s_out = Vec::with_capacity(n);
    let mut u_cols: Vec<Option<Vec<f64>>> = vec![None; d];
    let mut v_cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    for (slot, &j) in idx.iter().enumerate() {
        s_out.push(norms[j]);
        v_cols.push(v[j].clone());
        if norms[j] > reliable {
            u_cols[slot] = Some(a[j].iter().map(|x| x / norms[j]).collect());
        }
    }
    complete_basis(&mut u_cols);

    let mut u_m = Matrix::zeros(d, d)?;
    for (jcol, col) in u_cols.iter().enumerate() {
        let col = col.as_ref().expect("completion fills every column");
        for i in 0..d {
            u_m.set(i, jcol, col[i]);
        }
    }
    let mut v_m = Matrix::zeros(n, n)?;
    for (jcol, col) in v_cols.iter().enumerate() {
        for i in 0..n {
            v_m.set(i, jcol, col[i]);
        }
    }
    Ok((u_m, s_out, v_m))
}

/// Fills the `None` slots with orthonormal columns completing the basis.
///
/// Deterministic and seed-free. Slot k prefers the axis vector e_k, so when
/// the factor later multiplies a matrix row-wise, null-space rows keep their
/// own direction and the factor degrades gracefully toward the identity as
/// the rank drops. The axis is only usable while it keeps most of its norm
/// outside the span placed so far; otherwise the slot falls back to the
/// axis with the largest residual (ties at the lowest index).
fn complete_basis(cols: &mut [Option<Vec<f64>>]) {
    let d = cols.len();
    for slot in 0..d {
        if cols[slot].is_some() {
            continue;
        }
        let placed: Vec<&Vec<f64>> = cols.iter().flatten().collect();
        // Residual of e_i against an orthonormal set only needs the i-th
        // entry of each placed column.
        let residual = |i: usize| -> f64 {
            let proj: f64 = placed.iter().map(|c| c[i] * c[i]).sum();
            1.0 - proj
        };
        let mut pick = slot;
        if residual(slot) < 0.5 {
            let mut best_res = f64::NEG_INFINITY;
            for i in 0..d {
                let res = residual(i);
                if res > best_res {
                    best_res = res;
                    pick = i;
                }
            }
        }
        let mut w = vec![0.0; d];
        w[pick] = 1.0;
        for _pass in 0..2 {
            for c in &placed {
                let coef = dot(&w, c);
                for (wi, ci) in w.iter_mut().zip(c.iter()) {
                    *wi -= coef * ci;
                }
            }
        }
        let nrm = dot(&w, &w).sqrt();
        for wi in &mut w {
            *wi /= nrm;
        }
        cols[slot] = Some(w);
    }
}

/// Makes the largest-magnitude entry of every `u` column nonnegative; the
/// paired `v` column (when one exists) flips with it.
fn apply_sign_convention(out: &mut SvdResult) {
    let d = out.u.rows();
    let nsv = out.s.len();
    for j in 0..d {
        let mut best_i = 0;
        let mut best = -1.0;
        for i in 0..d {
            let a = out.u.get(i, j).abs();
            if a > best {
                best = a;
                best_i = i;
            }
        }
        if out.u.get(best_i, j) < 0.0 {
            for i in 0..d {
                out.u.set(i, j, -out.u.get(i, j));
            }
            if j < nsv {
                for i in 0..out.v.rows() {
                    out.v.set(i, j, -out.v.get(i, j));
                }
            }
        }
    }
}

fn rotate_pair(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (head, tail) = cols.split_at_mut(q);
    let cp = &mut head[p];
    let cq = &mut tail[0];
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let xp = c * *x - s * *y;
        let yq = s * *x + c * *y;
        *x = xp;
        *y = yq;
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
