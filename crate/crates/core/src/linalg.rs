//! Small dense linear-algebra helpers on top of `nalgebra`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Inverse of a symmetric positive-definite matrix via Cholesky.
pub fn spd_inverse(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let chol = m
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Singular(what.to_string()))?;
    Ok(symmetrize(&chol.inverse()))
}

/// Solve `m x = rhs` for symmetric positive-definite `m`.
pub fn spd_solve(m: &DMatrix<f64>, rhs: &DVector<f64>, what: &str) -> Result<DVector<f64>> {
    let chol = m
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Singular(what.to_string()))?;
    Ok(chol.solve(rhs))
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Result of clipping negative eigenvalues of a symmetric matrix.
#[derive(Debug, Clone)]
pub struct PsdRepair {
    pub matrix: DMatrix<f64>,
    /// Total magnitude of eigenvalue mass removed by clipping.
    pub shift: f64,
    /// `shift` relative to the trace of the repaired matrix (0 when trace is 0).
    pub relative_shift: f64,
}

/// Project a symmetric matrix onto the PSD cone by clipping eigenvalues at zero.
pub fn psd_repair(m: &DMatrix<f64>) -> PsdRepair {
    let sym = symmetrize(m);
    let eig = sym.clone().symmetric_eigen();
    let mut shift = 0.0;
    let clipped: DVector<f64> = eig.eigenvalues.map(|l| {
        if l < 0.0 {
            shift += -l;
            0.0
        } else {
            l
        }
    });
    if shift == 0.0 {
        return PsdRepair {
            matrix: sym,
            shift,
            relative_shift: 0.0,
        };
    }
    let q = &eig.eigenvectors;
    let repaired = symmetrize(&(q * DMatrix::from_diagonal(&clipped) * q.transpose()));
    let trace = repaired.trace();
    PsdRepair {
        matrix: repaired,
        shift,
        relative_shift: if trace > 0.0 { shift / trace } else { 0.0 },
    }
}

/// Symmetric square root `Q Λ^{1/2} Qᵀ` of a PSD matrix (negative eigenvalues clipped).
pub fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = symmetrize(m).symmetric_eigen();
    let root = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    let q = &eig.eigenvectors;
    q * DMatrix::from_diagonal(&root) * q.transpose()
}

/// Numerical rank from singular values with the usual `max(n, d)·eps·σ_max` cutoff.
pub fn numerical_rank(m: &DMatrix<f64>) -> usize {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0;
    }
    let sv = m.clone().svd(false, false).singular_values;
    let smax = sv.iter().cloned().fold(0.0, f64::max);
    let tol = m.nrows().max(m.ncols()) as f64 * f64::EPSILON * smax;
    sv.iter().filter(|&&s| s > tol).count()
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    symmetrize(m)
        .symmetric_eigenvalues()
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}

#[inline]
pub fn expit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn repair_leaves_psd_untouched() {
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
        let r = psd_repair(&m);
        assert_eq!(r.shift, 0.0);
        assert!((r.matrix - m).norm() < 1e-15);
    }

    #[test]
    fn repair_clips_negative_mass() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -0.5]);
        let r = psd_repair(&m);
        assert!((r.shift - 0.5).abs() < 1e-12);
        assert!(min_eigenvalue(&r.matrix) >= -1e-15);
    }

    #[test]
    fn sqrt_squares_back() {
        let m = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 2.0]);
        let s = psd_sqrt(&m);
        assert!((&s * &s - &m).norm() < 1e-12);
    }

    #[test]
    fn expit_is_stable_in_the_tails() {
        assert_eq!(expit(-800.0), 0.0);
        assert_eq!(expit(800.0), 1.0);
        assert!((expit(0.0) - 0.5).abs() < 1e-16);
        assert!((logit(expit(1.3)) - 1.3).abs() < 1e-12);
    }
}
