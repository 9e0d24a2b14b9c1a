//! Step-two composite estimators built from the per-model EB estimates.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::asymptotics::EbCovariance;
use crate::error::{Error, Result};
use crate::linalg::psd_repair;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Ivw,
    Ocwe,
    #[serde(rename = "sclearner")]
    ScLearner,
}

impl Method {
    pub fn label(self) -> &'static str {
        match self {
            Method::Ivw => "IVW",
            Method::Ocwe => "OCWE",
            Method::ScLearner => "SC-Learner",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Weights {
    /// One weight per EB estimate, shared by every coefficient.
    PerModel(DVector<f64>),
    /// `K × d`: column `j` holds the weights for coefficient `j`. Columns for
    /// coefficients no external model covers are zero and flagged in `from_internal`.
    PerCoefficient {
        weights: DMatrix<f64>,
        from_internal: Vec<bool>,
    },
}

#[derive(Debug, Clone)]
pub struct CombinationResult {
    pub method: Method,
    pub gamma_final: DVector<f64>,
    pub se_final: DVector<f64>,
    pub cov_final: DMatrix<f64>,
    pub weights: Weights,
    /// Achieved `wᵀQw` (OCWE only).
    pub objective: Option<f64>,
}

/// `S = Σ_i x_i x_iᵀ` over the design rows.
pub fn prediction_matrix(design: &DMatrix<f64>) -> DMatrix<f64> {
    design.tr_mul(design)
}

fn check_inputs(eb: &[DVector<f64>], cov: &EbCovariance, design: &DMatrix<f64>) -> Result<()> {
    if eb.is_empty() {
        return Err(Error::InvalidArgument("at least one EB estimate is required".into()));
    }
    if eb.len() != cov.n_models {
        return Err(Error::Dimension(format!(
            "{} EB estimates but covariance for {} models",
            eb.len(),
            cov.n_models
        )));
    }
    if eb.iter().any(|g| g.len() != cov.dim) || design.ncols() != cov.dim {
        return Err(Error::Dimension("coefficient dimension mismatch".into()));
    }
    Ok(())
}

/// Covariance of `Σ_a D_a θ_a` over the stacked `(EB_1, …, EB_K, I)` blocks,
/// where each `D_a` is diagonal with entries `coef[a]`.
fn linear_combination_cov(cov: &EbCovariance, coef: &[DVector<f64>]) -> DMatrix<f64> {
    let d = cov.dim;
    let mut out = DMatrix::zeros(d, d);
    for (a, ca) in coef.iter().enumerate() {
        if ca.iter().all(|&v| v == 0.0) {
            continue;
        }
        for (b, cb) in coef.iter().enumerate() {
            if cb.iter().all(|&v| v == 0.0) {
                continue;
            }
            let block = cov.block(a, b);
            for i in 0..d {
                for j in 0..d {
                    out[(i, j)] += ca[i] * block[(i, j)] * cb[j];
                }
            }
        }
    }
    (&out + out.transpose()) * 0.5
}

fn per_model_result(
    method: Method,
    eb: &[DVector<f64>],
    cov: &EbCovariance,
    w: DVector<f64>,
    objective: Option<f64>,
) -> CombinationResult {
    let d = cov.dim;
    let mut gamma = DVector::zeros(d);
    for (k, g) in eb.iter().enumerate() {
        gamma.axpy(w[k], g, 1.0);
    }
    let mut coef: Vec<DVector<f64>> = w.iter().map(|&wk| DVector::from_element(d, wk)).collect();
    coef.push(DVector::zeros(d));
    let cov_final = linear_combination_cov(cov, &coef);
    CombinationResult {
        method,
        gamma_final: gamma,
        se_final: cov_final.diagonal().map(|v| v.max(0.0).sqrt()),
        cov_final,
        weights: Weights::PerModel(w),
        objective,
    }
}

/// Inverse total-prediction-variance weights; cross-model covariance is
/// ignored in the weights but included in the reported uncertainty.
pub fn combine_ivw(eb: &[DVector<f64>], cov: &EbCovariance, design: &DMatrix<f64>) -> Result<CombinationResult> {
    check_inputs(eb, cov, design)?;
    let s = prediction_matrix(design);
    let inv: Vec<f64> = (0..eb.len())
        .map(|k| {
            let t = (&s * cov.var_eb(k)).trace();
            if t > 0.0 && t.is_finite() {
                Ok(1.0 / t)
            } else {
                Err(Error::Singular(format!("prediction variance of EB estimate {k} is {t}")))
            }
        })
        .collect::<Result<_>>()?;
    let total: f64 = inv.iter().sum();
    let w = DVector::from_iterator(inv.len(), inv.iter().map(|v| v / total));
    Ok(per_model_result(Method::Ivw, eb, cov, w, None))
}

/// Matrix `Q_jk = trace(S Cov(EB_j, EB_k))` of the OCWE objective.
pub fn ocwe_objective_matrix(cov: &EbCovariance, design: &DMatrix<f64>) -> DMatrix<f64> {
    let s = prediction_matrix(design);
    let k = cov.n_models;
    let q = DMatrix::from_fn(k, k, |a, b| (&s * cov.cov_eb(a, b)).trace());
    (&q + q.transpose()) * 0.5
}

/// Simplex weights minimizing the total estimated prediction variance.
pub fn combine_ocwe(eb: &[DVector<f64>], cov: &EbCovariance, design: &DMatrix<f64>) -> Result<CombinationResult> {
    check_inputs(eb, cov, design)?;
    let q = ocwe_objective_matrix(cov, design);
    let w = simplex_qp(&q)?;
    let objective = (w.transpose() * &q * &w)[0];
    Ok(per_model_result(Method::Ocwe, eb, cov, w, Some(objective)))
}

/// Largest support size solved by exhaustive enumeration.
pub const ENUMERATION_LIMIT: usize = 20;

/// Minimize `wᵀQw` over the probability simplex.
///
/// Exact for `K ≤ 20`: every support set is tried, the equality-constrained
/// KKT system is solved on it, and the best feasible candidate wins (ties go
/// to the lexicographically smallest support). Larger problems fall back to
/// projected gradient descent.
pub fn simplex_qp(q: &DMatrix<f64>) -> Result<DVector<f64>> {
    let k = q.nrows();
    if k == 0 || q.ncols() != k {
        return Err(Error::Dimension("Q must be a non-empty square matrix".into()));
    }
    if q.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("Q".into()));
    }
    let repaired = psd_repair(q);
    if repaired.relative_shift > 1e-6 {
        return Err(Error::Singular(format!(
            "OCWE matrix is indefinite (clipped {:.2e} of its trace)",
            repaired.relative_shift
        )));
    }
    let q = repaired.matrix;
    if k == 1 {
        return Ok(DVector::from_element(1, 1.0));
    }
    if k > ENUMERATION_LIMIT {
        return Ok(projected_gradient(&q));
    }
    let objective = |w: &DVector<f64>| (w.transpose() * &q * w)[0];
    let scale = q.diagonal().amax().max(f64::MIN_POSITIVE);

    let mut supports: Vec<Vec<usize>> = (1u32..(1u32 << k))
        .map(|mask| (0..k).filter(|i| mask & (1 << i) != 0).collect())
        .collect();
    supports.sort();

    let mut best: Option<(f64, DVector<f64>)> = None;
    for support in &supports {
        let Some(w) = solve_on_support(&q, support) else {
            continue;
        };
        let f = objective(&w);
        let better = match &best {
            None => true,
            Some((bf, _)) => f < bf - 1e-12 * scale,
        };
        if better {
            best = Some((f, w));
        }
    }
    best.map(|(_, w)| w)
        .ok_or_else(|| Error::Singular("no feasible simplex candidate".into()))
}

fn solve_on_support(q: &DMatrix<f64>, support: &[usize]) -> Option<DVector<f64>> {
    let m = support.len();
    // [Q_SS 1; 1ᵀ 0] [w; ν] = [0; 1]
    let mut kkt = DMatrix::zeros(m + 1, m + 1);
    for (a, &i) in support.iter().enumerate() {
        for (b, &j) in support.iter().enumerate() {
            kkt[(a, b)] = q[(i, j)];
        }
        kkt[(a, m)] = 1.0;
        kkt[(m, a)] = 1.0;
    }
    let mut rhs = DVector::zeros(m + 1);
    rhs[m] = 1.0;
    let svd = kkt.clone().svd(true, true);
    let smax = svd.singular_values.amax();
    let sol = svd.solve(&rhs, 1e-12 * smax.max(1.0)).ok()?;
    let ws = sol.rows(0, m);
    if (&kkt * &sol - &rhs).amax() > 1e-8 {
        return None;
    }
    if ws.iter().any(|&v| v < -1e-10) {
        return None;
    }
    let mut w = DVector::zeros(q.nrows());
    for (a, &i) in support.iter().enumerate() {
        w[i] = ws[a].max(0.0);
    }
    let total = w.sum();
    if total <= 0.0 {
        return None;
    }
    Some(w / total)
}

/// Euclidean projection onto the probability simplex.
pub fn project_to_simplex(v: &DVector<f64>) -> DVector<f64> {
    let mut u: Vec<f64> = v.iter().cloned().collect();
    u.sort_by(|a, b| b.partial_cmp(a).expect("finite"));
    let mut cumsum = 0.0;
    let mut theta = 0.0;
    for (i, &ui) in u.iter().enumerate() {
        cumsum += ui;
        let t = (cumsum - 1.0) / (i + 1) as f64;
        if ui - t > 0.0 {
            theta = t;
        }
    }
    v.map(|x| (x - theta).max(0.0))
}

fn projected_gradient(q: &DMatrix<f64>) -> DVector<f64> {
    let k = q.nrows();
    let lmax = q.clone().symmetric_eigenvalues().amax().max(f64::MIN_POSITIVE);
    let step = 1.0 / (2.0 * lmax);
    let mut w = DVector::from_element(k, 1.0 / k as f64);
    for _ in 0..200_000 {
        let grad = q * &w * 2.0;
        let next = project_to_simplex(&(&w - grad * step));
        let delta = (&next - &w).amax();
        w = next;
        if delta < 1e-10 {
            break;
        }
    }
    w
}

/// Per-coefficient inverse-variance weighting over the models that include
/// each covariate. `coverage[k]` lists the design positions of model `k`
/// (intercept at 0); coefficients covered by no model come from `gamma_i`.
pub fn combine_sclearner(
    eb: &[DVector<f64>],
    cov: &EbCovariance,
    coverage: &[Vec<usize>],
    gamma_i: &DVector<f64>,
) -> Result<CombinationResult> {
    if eb.is_empty() {
        return Err(Error::InvalidArgument("at least one EB estimate is required".into()));
    }
    if coverage.len() != eb.len() || eb.len() != cov.n_models || gamma_i.len() != cov.dim {
        return Err(Error::Dimension("SC-Learner inputs disagree on dimensions".into()));
    }
    let k = eb.len();
    let d = cov.dim;
    let mut weights = DMatrix::zeros(k, d);
    let mut from_internal = vec![false; d];
    for j in 0..d {
        let members: Vec<usize> = (0..k).filter(|&m| j == 0 || coverage[m].contains(&j)).collect();
        if members.is_empty() {
            from_internal[j] = true;
            continue;
        }
        let inv: Vec<f64> = members
            .iter()
            .map(|&m| {
                let v = cov.var_eb(m)[(j, j)];
                if v > 0.0 && v.is_finite() {
                    Ok(1.0 / v)
                } else {
                    Err(Error::Singular(format!("variance of coefficient {j} in EB estimate {m} is {v}")))
                }
            })
            .collect::<Result<_>>()?;
        let total: f64 = inv.iter().sum();
        for (&m, v) in members.iter().zip(&inv) {
            weights[(m, j)] = v / total;
        }
    }
    let mut gamma = DVector::zeros(d);
    let mut coef: Vec<DVector<f64>> = Vec::with_capacity(k + 1);
    for m in 0..k {
        let cm = weights.row(m).transpose();
        gamma += eb[m].component_mul(&cm);
        coef.push(cm);
    }
    let internal = DVector::from_iterator(d, from_internal.iter().map(|&f| if f { 1.0 } else { 0.0 }));
    gamma += gamma_i.component_mul(&internal);
    coef.push(internal);
    let cov_final = linear_combination_cov(cov, &coef);
    Ok(CombinationResult {
        method: Method::ScLearner,
        gamma_final: gamma,
        se_final: cov_final.diagonal().map(|v| v.max(0.0).sqrt()),
        cov_final,
        weights: Weights::PerCoefficient {
            weights,
            from_internal,
        },
        objective: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn block_cov(blocks: &[DMatrix<f64>], k: usize, d: usize, cross: f64) -> EbCovariance {
        // blocks[a] on the diagonal, cross-correlation `cross` between all pairs
        let total = (k + 1) * d;
        let mut m = DMatrix::zeros(total, total);
        for a in 0..=k {
            for b in 0..=k {
                let v = if a == b {
                    blocks[a].clone()
                } else {
                    let sa = blocks[a].map(|x| x.sqrt());
                    let sb = blocks[b].map(|x| x.sqrt());
                    sa.component_mul(&sb) * cross
                };
                m.view_mut((a * d, b * d), (d, d)).copy_from(&v);
            }
        }
        EbCovariance { matrix: m, n_models: k, dim: d, mc_draws: 0, seed: 0, repair_shift: 0.0 }
    }

    fn diag(v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_diagonal(&DVector::from_row_slice(v))
    }

    #[test]
    fn simplex_identity_is_uniform() {
        let w = simplex_qp(&DMatrix::identity(3, 3)).unwrap();
        for v in w.iter() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn simplex_inverse_variance_two_components() {
        let w = simplex_qp(&diag(&[1.0, 4.0])).unwrap();
        assert!((w[0] - 0.8).abs() < 1e-12 && (w[1] - 0.2).abs() < 1e-12);
    }

    #[test]
    fn simplex_vertex_solution() {
        // strongly correlated pair where the cheaper one dominates
        let q = DMatrix::from_row_slice(2, 2, &[1.0, 1.5, 1.5, 4.0]);
        let w = simplex_qp(&q).unwrap();
        assert_eq!(w.as_slice(), &[1.0, 0.0]);
    }

    #[test]
    fn simplex_tie_breaks_to_smallest_support() {
        let q = DMatrix::from_element(2, 2, 1.0);
        let w = simplex_qp(&q).unwrap();
        assert_eq!(w.as_slice(), &[1.0, 0.0]);
    }

    #[test]
    fn projected_gradient_agrees_with_enumeration() {
        let a = DMatrix::from_fn(4, 4, |i, j| ((i * 7 + j * 3) % 5) as f64 - 2.0);
        let q = &a * a.transpose() + DMatrix::identity(4, 4) * 0.5;
        let exact = simplex_qp(&q).unwrap();
        let pg = projected_gradient(&q);
        let f = |w: &DVector<f64>| (w.transpose() * &q * w)[0];
        assert!((f(&exact) - f(&pg)).abs() < 1e-8);
    }

    #[test]
    fn simplex_projection_properties() {
        let v = DVector::from_vec(vec![0.9, 0.4, -0.3, 0.2]);
        let p = project_to_simplex(&v);
        assert!((p.sum() - 1.0).abs() < 1e-12);
        assert!(p.iter().all(|&x| x >= 0.0));
    }

    #[test]
    fn ivw_single_model_is_identity() {
        let d = 2;
        let cov = block_cov(&[diag(&[0.04, 0.09]), diag(&[0.05, 0.1])], 1, d, 0.5);
        let eb = vec![DVector::from_vec(vec![0.3, -0.2])];
        let design = DMatrix::from_row_slice(3, 2, &[1.0, 0.1, 1.0, -0.5, 1.0, 2.0]);
        let r = combine_ivw(&eb, &cov, &design).unwrap();
        assert_eq!(r.gamma_final, eb[0]);
        assert!((r.se_final[0] - 0.2).abs() < 1e-12);
    }

    #[test]
    fn ivw_symmetric_models_get_equal_weight() {
        let v = diag(&[0.04, 0.09]);
        let cov = block_cov(&[v.clone(), v.clone(), diag(&[0.05, 0.1])], 2, 2, 0.3);
        let eb = vec![DVector::from_vec(vec![0.3, -0.2]), DVector::from_vec(vec![0.1, 0.0])];
        let design = DMatrix::from_row_slice(3, 2, &[1.0, 0.1, 1.0, -0.5, 1.0, 2.0]);
        let r = combine_ivw(&eb, &cov, &design).unwrap();
        let Weights::PerModel(w) = r.weights else { panic!() };
        assert!((w[0] - 0.5).abs() < 1e-12 && (w[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn ivw_equals_ocwe_for_uncorrelated_proportional_covariances() {
        let base = diag(&[0.04, 0.09, 0.02]);
        let cov = block_cov(&[base.clone(), &base * 2.0, &base * 0.5, base.clone()], 3, 3, 0.0);
        let eb = vec![
            DVector::from_vec(vec![0.3, -0.2, 0.1]),
            DVector::from_vec(vec![0.1, 0.0, 0.2]),
            DVector::from_vec(vec![0.2, -0.1, 0.0]),
        ];
        let design = DMatrix::from_fn(5, 3, |i, j| if j == 0 { 1.0 } else { (i + j) as f64 * 0.3 - 0.5 });
        let ivw = combine_ivw(&eb, &cov, &design).unwrap();
        let ocwe = combine_ocwe(&eb, &cov, &design).unwrap();
        assert!((&ivw.gamma_final - &ocwe.gamma_final).amax() < 1e-10);
    }

    #[test]
    fn ocwe_beats_vertices_and_uniform() {
        let cov = block_cov(&[diag(&[0.04, 0.09]), diag(&[0.03, 0.2]), diag(&[0.08, 0.05]), diag(&[0.1, 0.1])], 3, 2, 0.4);
        let eb = vec![DVector::zeros(2), DVector::zeros(2), DVector::zeros(2)];
        let design = DMatrix::from_row_slice(3, 2, &[1.0, 0.1, 1.0, -0.5, 1.0, 2.0]);
        let r = combine_ocwe(&eb, &cov, &design).unwrap();
        let q = ocwe_objective_matrix(&cov, &design);
        let obj = r.objective.unwrap();
        for k in 0..3 {
            assert!(obj <= q[(k, k)] + 1e-12);
        }
        let u = DVector::from_element(3, 1.0 / 3.0);
        assert!(obj <= (u.transpose() * &q * &u)[0] + 1e-12);
    }

    #[test]
    fn sclearner_uses_only_contributing_models() {
        // models on (X1,X2,X3), (X1,X2), (X1,X3) with target (1, X1, X2, X3, B)
        let d = 5;
        let v = diag(&[0.04, 0.05, 0.06, 0.07, 0.08]);
        let cov = block_cov(&[v.clone(), &v * 2.0, &v * 4.0, v.clone()], 3, d, 0.2);
        let eb = vec![
            DVector::from_vec(vec![1.0, 1.0, 1.0, 1.0, 1.0]),
            DVector::from_vec(vec![2.0, 2.0, 2.0, 2.0, 2.0]),
            DVector::from_vec(vec![3.0, 3.0, 3.0, 3.0, 3.0]),
        ];
        let coverage = vec![vec![0, 1, 2, 3], vec![0, 1, 2], vec![0, 1, 3]];
        let gi = DVector::from_vec(vec![9.0, 9.0, 9.0, 9.0, 9.0]);
        let r = combine_sclearner(&eb, &cov, &coverage, &gi).unwrap();
        let Weights::PerCoefficient { weights, from_internal } = &r.weights else { panic!() };
        // X3: models 1 and 3 only, inverse-variance 1 : 1/4
        assert_eq!(weights[(1, 3)], 0.0);
        assert!((weights[(0, 3)] - 0.8).abs() < 1e-12);
        assert!((weights[(2, 3)] - 0.2).abs() < 1e-12);
        assert!((r.gamma_final[3] - (0.8 + 0.6)).abs() < 1e-12);
        // B from the internal fit
        assert!(from_internal[4]);
        assert_eq!(r.gamma_final[4], 9.0);
        for j in 0..4 {
            assert!((weights.column(j).sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn sclearner_single_model() {
        let v = diag(&[0.04, 0.05, 0.06]);
        let cov = block_cov(&[v.clone(), v.clone()], 1, 3, 0.5);
        let eb = vec![DVector::from_vec(vec![0.1, 0.2, 0.3])];
        let gi = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let r = combine_sclearner(&eb, &cov, &[vec![0, 1]], &gi).unwrap();
        assert_eq!(r.gamma_final.as_slice(), &[0.1, 0.2, 3.0]);
        assert!((r.se_final[1] - 0.05f64.sqrt()).abs() < 1e-12);
        assert!((r.se_final[2] - 0.06f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn sclearner_equal_variances_reduce_to_mean() {
        let v = diag(&[0.04, 0.05]);
        let cov = block_cov(&[v.clone(), v.clone(), v.clone()], 2, 2, 0.1);
        let eb = vec![DVector::from_vec(vec![0.1, 0.4]), DVector::from_vec(vec![0.3, 0.2])];
        let r = combine_sclearner(&eb, &cov, &[vec![0, 1], vec![0, 1]], &DVector::zeros(2)).unwrap();
        assert!((r.gamma_final[0] - 0.2).abs() < 1e-12);
        assert!((r.gamma_final[1] - 0.3).abs() < 1e-12);
    }
}
