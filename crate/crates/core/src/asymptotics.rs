//! Joint large-sample covariance of the constrained and internal estimators,
//! the empirical-Bayes shrinkage point estimate, and Monte Carlo propagation
//! of the joint covariance through the shrinkage map.

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};

use crate::cspml::ConstraintSet;
use crate::data::{build_design, Dataset, ExternalModelSpec, Link};
use crate::error::{Error, Result};
use crate::glm::score_and_info_design;
use crate::linalg::{psd_repair, psd_sqrt, spd_inverse, spd_solve, symmetrize};
use crate::rng::{purpose, substream};

/// Sample-average plug-ins for the joint covariance.
#[derive(Debug, Clone)]
pub struct AsymptoticBlocks {
    /// Mean information of the internal model.
    pub b_hat: DMatrix<f64>,
    /// Per model, mean Jacobian of the conditional external score.
    pub c: Vec<DMatrix<f64>>,
    /// `l[j][k]` is the mean of `u_j u_kᵀ`.
    pub l: Vec<Vec<DMatrix<f64>>>,
    pub n: usize,
}

impl AsymptoticBlocks {
    pub fn n_models(&self) -> usize {
        self.c.len()
    }

    pub fn dim(&self) -> usize {
        self.b_hat.nrows()
    }
}

/// Evaluate the blocks at `gamma` on an explicit design.
pub fn estimate_blocks_design(
    design: &DMatrix<f64>,
    y: &DVector<f64>,
    constraints: &[ConstraintSet],
    gamma: &DVector<f64>,
    link: Link,
) -> Result<AsymptoticBlocks> {
    if gamma.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("evaluation point".into()));
    }
    let n = design.nrows();
    let (_, b_hat) = score_and_info_design(gamma, design, y, link)?;
    let scores: Vec<DMatrix<f64>> = constraints.iter().map(|c| c.scores(gamma, design)).collect();
    let c = constraints.iter().map(|c| c.mean_jacobian(gamma, design)).collect();
    let k = constraints.len();
    let mut l = vec![vec![DMatrix::zeros(0, 0); k]; k];
    for j in 0..k {
        for m in j..k {
            let block = scores[j].tr_mul(&scores[m]) / n as f64;
            if m != j {
                l[m][j] = block.transpose();
            }
            l[j][m] = block;
        }
        l[j][j] = symmetrize(&l[j][j]);
        if l[j][j].clone().cholesky().is_none() {
            return Err(Error::Singular(format!(
                "score second-moment matrix for `{}`",
                constraints[j].name
            )));
        }
    }
    Ok(AsymptoticBlocks { b_hat, c, l, n })
}

pub fn estimate_blocks(
    dataset: &Dataset,
    specs: &[ExternalModelSpec],
    gamma: &DVector<f64>,
    link: Link,
) -> Result<AsymptoticBlocks> {
    let design = build_design(dataset)?;
    let constraints = specs
        .iter()
        .map(|s| ConstraintSet::from_spec(dataset, s, link))
        .collect::<Result<Vec<_>>>()?;
    estimate_blocks_design(&design, &dataset.outcome, &constraints, gamma, link)
}

/// Covariance of the stacked vector `(γ̂_CML_1, …, γ̂_CML_K, γ̂_I)` on the
/// per-sample scale (the √n-asymptotic matrix divided by n).
#[derive(Debug, Clone)]
pub struct JointAsymptoticCov {
    pub matrix: DMatrix<f64>,
    pub n_models: usize,
    pub dim: usize,
    pub n: usize,
}

impl JointAsymptoticCov {
    /// Block `(a, b)`; index `n_models` is the internal estimator.
    pub fn block(&self, a: usize, b: usize) -> DMatrix<f64> {
        let d = self.dim;
        self.matrix.view((a * d, b * d), (d, d)).into_owned()
    }

    pub fn var_cml(&self, k: usize) -> DMatrix<f64> {
        self.block(k, k)
    }

    pub fn var_internal(&self) -> DMatrix<f64> {
        self.block(self.n_models, self.n_models)
    }
}

/// Assemble the joint covariance from the plug-in blocks.
pub fn joint_cov(blocks: &AsymptoticBlocks) -> Result<JointAsymptoticCov> {
    let k = blocks.n_models();
    let d = blocks.dim();
    let nf = blocks.n as f64;
    let b = &blocks.b_hat;
    // L_kk⁻¹ C_k per model
    let linv_c: Vec<DMatrix<f64>> = (0..k)
        .map(|j| {
            blocks.l[j][j]
                .clone()
                .cholesky()
                .map(|ch| ch.solve(&blocks.c[j]))
                .ok_or_else(|| Error::Singular(format!("L block {j}")))
        })
        .collect::<Result<_>>()?;
    let v: Vec<DMatrix<f64>> = (0..k)
        .map(|j| {
            let m = b + blocks.c[j].transpose() * &linv_c[j];
            spd_inverse(&symmetrize(&m), &format!("constrained information of model {j}"))
        })
        .collect::<Result<_>>()?;

    let total = (k + 1) * d;
    let mut out = DMatrix::zeros(total, total);
    let mut put = |a: usize, c: usize, m: &DMatrix<f64>| {
        out.view_mut((a * d, c * d), (d, d)).copy_from(m);
    };
    for j in 0..k {
        let vj = &v[j] / nf;
        put(j, j, &vj);
        put(j, k, &vj);
        put(k, j, &vj);
        for m in (j + 1)..k {
            let middle = b + linv_c[j].transpose() * &blocks.l[j][m] * &linv_c[m];
            let cross = &v[j] * middle * &v[m] / nf;
            put(j, m, &cross);
            put(m, j, &cross.transpose());
        }
    }
    let vi = spd_inverse(b, "internal information")? / nf;
    put(k, k, &vi);
    Ok(JointAsymptoticCov {
        matrix: out,
        n_models: k,
        dim: d,
        n: blocks.n,
    })
}

/// Empirical-Bayes estimate `γ̂_CML + Z (1 − 1/(1 + Zᵀ V_I⁻¹ Z))`, `Z = γ̂_I − γ̂_CML`.
pub fn eb_point(gamma_i: &DVector<f64>, gamma_cml: &DVector<f64>, v_i: &DMatrix<f64>) -> Result<DVector<f64>> {
    let z = gamma_i - gamma_cml;
    let vinv_z = spd_solve(v_i, &z, "internal covariance")?;
    Ok(gamma_cml + &z * shrink_factor(z.dot(&vinv_z)))
}

/// `1 − 1/(1 + q)` for the Mahalanobis-type quadratic `q = Zᵀ V⁻¹ Z`.
#[inline]
pub fn shrink_factor(q: f64) -> f64 {
    q / (1.0 + q)
}

/// Matrix-weighted form `Â(Σ̂ + Â)⁻¹ γ̂_I + Σ̂(Σ̂ + Â)⁻¹ γ̂_CML` with `Â = ZZᵀ`.
pub fn eb_matrix_form(gamma_i: &DVector<f64>, gamma_cml: &DVector<f64>, sigma: &DMatrix<f64>) -> Result<DVector<f64>> {
    let z = gamma_i - gamma_cml;
    let a = &z * z.transpose();
    let total = sigma + &a;
    let lu = total.clone().lu();
    let inv = lu.try_inverse().ok_or_else(|| Error::Singular("Σ + A".into()))?;
    Ok(&a * &inv * gamma_i + sigma * &inv * gamma_cml)
}

/// True when the observed discrepancy is large enough that the
/// zero-mean Monte Carlo likely understates EB uncertainty.
pub fn large_discrepancy(gamma_i: &DVector<f64>, gamma_cml: &DVector<f64>, v_i: &DMatrix<f64>) -> bool {
    (gamma_i - gamma_cml).norm() > 3.0 * v_i.trace().max(0.0).sqrt()
}

/// Monte Carlo covariance of the stacked `(γ̂_EB_1, …, γ̂_EB_K, γ̂_I)`.
#[derive(Debug, Clone)]
pub struct EbCovariance {
    pub matrix: DMatrix<f64>,
    pub n_models: usize,
    pub dim: usize,
    pub mc_draws: usize,
    pub seed: u64,
    /// Eigenvalue mass clipped from the joint matrix, relative to its trace.
    pub repair_shift: f64,
}

impl EbCovariance {
    pub fn block(&self, a: usize, b: usize) -> DMatrix<f64> {
        let d = self.dim;
        self.matrix.view((a * d, b * d), (d, d)).into_owned()
    }

    pub fn var_eb(&self, k: usize) -> DMatrix<f64> {
        self.block(k, k)
    }

    pub fn cov_eb(&self, j: usize, k: usize) -> DMatrix<f64> {
        self.block(j, k)
    }

    pub fn var_internal(&self) -> DMatrix<f64> {
        self.block(self.n_models, self.n_models)
    }
}

/// Draws per Monte Carlo chunk; chunk `c` always uses substream `c`.
const CHUNK: usize = 256;

struct Moments {
    count: usize,
    sum: DVector<f64>,
    cross: DMatrix<f64>,
}

fn chunk_moments(
    root: &DMatrix<f64>,
    vinv: &DMatrix<f64>,
    k: usize,
    d: usize,
    seed: u64,
    chunk: usize,
    count: usize,
) -> Moments {
    let total = (k + 1) * d;
    let mut rng = substream(seed, purpose::EB_DRAWS, chunk as u64);
    let mut sum = DVector::zeros(total);
    let mut cross = DMatrix::zeros(total, total);
    let mut xi = DVector::zeros(total);
    let mut out = DVector::zeros(total);
    for _ in 0..count {
        for v in xi.iter_mut() {
            *v = StandardNormal.sample(&mut rng);
        }
        let draw = root * &xi;
        let internal = draw.rows(k * d, d);
        for j in 0..k {
            let cml = draw.rows(j * d, d);
            let z = internal - cml;
            let q = (z.transpose() * vinv * &z)[0];
            let eb = cml + z * shrink_factor(q);
            out.rows_mut(j * d, d).copy_from(&eb);
        }
        out.rows_mut(k * d, d).copy_from(&internal);
        sum += &out;
        cross.ger(1.0, &out, &out, 1.0);
    }
    Moments { count, sum, cross }
}

/// Propagate the joint covariance through the shrinkage map by simulation.
///
/// Draws the stacked estimator vector from a zero-mean normal with the joint
/// covariance (via its symmetric square root) and returns the empirical
/// covariance of the resulting EB draws together with the internal draws.
/// The internal-internal block is copied from `joint` unchanged.
pub fn eb_covariance(joint: &JointAsymptoticCov, draws: usize, seed: u64) -> Result<EbCovariance> {
    if draws < 100 {
        return Err(Error::InvalidArgument(format!("at least 100 Monte Carlo draws needed, got {draws}")));
    }
    let k = joint.n_models;
    let d = joint.dim;
    let repaired = psd_repair(&joint.matrix);
    if repaired.relative_shift > 0.01 {
        log::warn!(
            "joint covariance needed eigenvalue clipping of {:.3}% of its trace",
            100.0 * repaired.relative_shift
        );
    }
    let root = psd_sqrt(&repaired.matrix);
    let vinv = spd_inverse(&joint.var_internal(), "internal covariance")?;
    let chunks: Vec<(usize, usize)> = (0..draws.div_ceil(CHUNK))
        .map(|c| (c, CHUNK.min(draws - c * CHUNK)))
        .collect();

    #[cfg(feature = "parallel")]
    let parts: Vec<Moments> = {
        use rayon::prelude::*;
        chunks
            .par_iter()
            .map(|&(c, count)| chunk_moments(&root, &vinv, k, d, seed, c, count))
            .collect()
    };
    #[cfg(not(feature = "parallel"))]
    let parts: Vec<Moments> = chunks
        .iter()
        .map(|&(c, count)| chunk_moments(&root, &vinv, k, d, seed, c, count))
        .collect();

    let total = (k + 1) * d;
    let mut sum = DVector::zeros(total);
    let mut cross = DMatrix::zeros(total, total);
    let mut count = 0usize;
    for p in parts {
        sum += p.sum;
        cross += p.cross;
        count += p.count;
    }
    let m = count as f64;
    let mean = &sum / m;
    let mut cov = symmetrize(&((cross - &mean * mean.transpose() * m) / (m - 1.0)));
    // the internal estimator is not transformed, so keep its exact block
    cov.view_mut((k * d, k * d), (d, d)).copy_from(&joint.var_internal());
    Ok(EbCovariance {
        matrix: cov,
        n_models: k,
        dim: d,
        mc_draws: draws,
        seed,
        repair_shift: repaired.relative_shift,
    })
}
