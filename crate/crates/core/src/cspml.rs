//! Constrained semiparametric maximum likelihood for one external model.
//!
//! The external coefficients enter as moment constraints
//! `Σ p_i u_i(γ) = 0`, where `u_i` is the conditional expectation of the
//! external model's score given the internal row. For fixed γ the empirical
//! masses are profiled out through the dual
//! `p_i = 1 / (n (1 + λᵀu_i))`, so the outer problem maximizes
//! `ℓ(γ) − max_λ Σ log(1 + λᵀu_i(γ))` over γ alone.

use nalgebra::{DMatrix, DVector};

use crate::data::{build_design, map_indices, recenter_external, Dataset, ExternalModelSpec, Link};
use crate::error::{Error, Result};
use crate::glm::{log_likelihood, score_and_info_design, GlmFit};
use crate::linalg::{expit, spd_solve};

/// Smallest admissible `1 + λᵀu_i`; keeps every `p_i` strictly positive.
pub const FEASIBILITY_GUARD: f64 = 1e-10;

/// Second derivative of the inverse link.
fn mean_second_derivative(link: Link, eta: f64) -> f64 {
    match link {
        Link::Logit => {
            let mu = expit(eta);
            mu * (1.0 - mu) * (1.0 - 2.0 * mu)
        }
        Link::Identity => 0.0,
    }
}

fn check_links(internal: Link, external: Link) -> Result<()> {
    if internal == external {
        Ok(())
    } else {
        Err(Error::UnsupportedLinks {
            internal: internal.as_str().into(),
            external: external.as_str().into(),
        })
    }
}

/// `E_{Y|X,B;γ}[U_β(Y|X_k)]` for a single observation.
///
/// `row` is the full target design row (intercept first) and `external_row`
/// the external model's design row (intercept first).
pub fn conditional_external_score(
    gamma: &DVector<f64>,
    beta: &DVector<f64>,
    row: &[f64],
    external_row: &[f64],
    internal_link: Link,
    external_link: Link,
) -> Result<DVector<f64>> {
    check_links(internal_link, external_link)?;
    if row.len() != gamma.len() || external_row.len() != beta.len() {
        return Err(Error::Dimension("score row lengths do not match coefficients".into()));
    }
    let eta: f64 = row.iter().zip(gamma.iter()).map(|(x, g)| x * g).sum();
    let eta_ext: f64 = external_row.iter().zip(beta.iter()).map(|(x, b)| x * b).sum();
    if !eta.is_finite() || !eta_ext.is_finite() {
        return Err(Error::NonFinite("linear predictor".into()));
    }
    let diff = internal_link.inverse(eta) - external_link.inverse(eta_ext);
    Ok(DVector::from_iterator(external_row.len(), external_row.iter().map(|x| x * diff)))
}

/// The moment constraint contributed by one external model on a fixed design.
#[derive(Debug, Clone)]
pub struct ConstraintSet {
    pub name: String,
    /// Columns of the target design used by the external model (intercept at 0).
    pub positions: Vec<usize>,
    pub beta: DVector<f64>,
    pub internal_link: Link,
    pub external_link: Link,
    /// External design rows, `n × (p_k + 1)`.
    external_design: DMatrix<f64>,
    /// External means `μ_β(x_k)` per row; constant in γ.
    external_mean: DVector<f64>,
}

impl ConstraintSet {
    pub fn new(
        name: impl Into<String>,
        design: &DMatrix<f64>,
        positions: Vec<usize>,
        beta: DVector<f64>,
        internal_link: Link,
        external_link: Link,
    ) -> Result<Self> {
        check_links(internal_link, external_link)?;
        if positions.len() != beta.len() {
            return Err(Error::Dimension(format!(
                "{} positions for {} external coefficients",
                positions.len(),
                beta.len()
            )));
        }
        if positions.iter().any(|&p| p >= design.ncols()) {
            return Err(Error::Dimension("external position outside the design".into()));
        }
        let external_design = design.select_columns(&positions);
        let external_mean = (&external_design * &beta).map(|e| external_link.inverse(e));
        Ok(Self {
            name: name.into(),
            positions,
            beta,
            internal_link,
            external_link,
            external_design,
            external_mean,
        })
    }

    /// Build from a dataset and a (possibly recentered) external spec.
    pub fn from_spec(dataset: &Dataset, spec: &ExternalModelSpec, internal_link: Link) -> Result<Self> {
        let spec = recenter_external(spec)?;
        let map = map_indices(std::slice::from_ref(&spec), dataset)?;
        let design = build_design(dataset)?;
        Self::new(
            spec.name.clone(),
            &design,
            map.for_model(0).to_vec(),
            DVector::from_vec(spec.coefficients.clone()),
            internal_link,
            spec.link,
        )
    }

    pub fn dim(&self) -> usize {
        self.beta.len()
    }

    pub fn external_design(&self) -> &DMatrix<f64> {
        &self.external_design
    }

    /// Conditional scores `u_i(γ)` as rows of an `n × (p_k + 1)` matrix.
    pub fn scores(&self, gamma: &DVector<f64>, design: &DMatrix<f64>) -> DMatrix<f64> {
        let eta = design * gamma;
        let n = design.nrows();
        DMatrix::from_fn(n, self.dim(), |i, j| {
            self.external_design[(i, j)] * (self.internal_link.inverse(eta[i]) - self.external_mean[i])
        })
    }

    /// Mean Jacobian `(1/n) Σ ∂u_i/∂γ`, shape `(p_k + 1) × d`.
    pub fn mean_jacobian(&self, gamma: &DVector<f64>, design: &DMatrix<f64>) -> DMatrix<f64> {
        let eta = design * gamma;
        let n = design.nrows();
        let weighted = DMatrix::from_fn(n, self.dim(), |i, j| {
            self.external_design[(i, j)] * self.internal_link.mean_derivative(eta[i])
        });
        weighted.tr_mul(design) / n as f64
    }
}

/// Inner dual solution for a fixed γ.
#[derive(Debug, Clone)]
pub struct DualSolution {
    pub lambda: DVector<f64>,
    /// `1 + λᵀu_i` per row.
    pub denom: DVector<f64>,
    /// `Σ log(1 + λᵀu_i)`.
    pub value: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct CmlOptions {
    /// Inner tolerance on `‖(1/n) Σ u_i / (1 + λᵀu_i)‖`.
    pub inner_tol: f64,
    pub inner_max_iter: usize,
    /// Outer tolerance on the largest absolute mean profile gradient.
    pub outer_tol: f64,
    pub outer_max_iter: usize,
}

impl Default for CmlOptions {
    fn default() -> Self {
        Self {
            inner_tol: 1e-10,
            inner_max_iter: 200,
            outer_tol: 1e-8,
            outer_max_iter: 100,
        }
    }
}

/// Maximize `Σ log(1 + λᵀu_i)` over λ by guarded Newton ascent.
pub fn solve_dual(
    u: &DMatrix<f64>,
    start: Option<&DVector<f64>>,
    opts: &CmlOptions,
    model: &str,
) -> Result<DualSolution> {
    let (n, r) = u.shape();
    let nf = n as f64;
    let infeasible = || Error::InfeasibleConstraint { model: model.to_string() };
    let eval = |lambda: &DVector<f64>| -> Option<(DVector<f64>, f64)> {
        let denom = DVector::from_fn(n, |i, _| 1.0 + (u.row(i) * lambda)[0]);
        if denom.iter().any(|&t| !(t > FEASIBILITY_GUARD)) {
            return None;
        }
        let value = denom.iter().map(|t| t.ln()).sum();
        Some((denom, value))
    };

    let mut lambda = match start {
        Some(l) if l.len() == r && eval(l).is_some() => l.clone(),
        _ => DVector::zeros(r),
    };
    let (mut denom, mut value) = eval(&lambda).ok_or_else(infeasible)?;
    let mut rounding_steps = 0;
    for it in 0..=opts.inner_max_iter {
        let mut grad = DVector::zeros(r);
        let mut hess = DMatrix::zeros(r, r);
        for i in 0..n {
            let ui = u.row(i).transpose();
            let t = denom[i];
            grad.axpy(1.0 / t, &ui, 1.0);
            hess.ger(1.0 / (t * t), &ui, &ui, 1.0);
        }
        let small_grad = grad.norm() / nf < opts.inner_tol;
        let step = match spd_solve(&hess, &grad, "dual Hessian") {
            Ok(s) => s,
            Err(_) if small_grad => DVector::zeros(r),
            Err(_) => {
                let ridge = 1e-12 * hess.trace().max(1e-300);
                let jittered = &hess + DMatrix::identity(r, r) * ridge;
                spd_solve(&jittered, &grad, "dual Hessian").map_err(|_| infeasible())?
            }
        };
        // A small gradient is not enough when the Hessian is ill-conditioned:
        // λ itself must have settled, since the outer gradient depends on it.
        if small_grad && step.norm() <= 1e-9 * (1.0 + lambda.norm()) {
            return Ok(DualSolution {
                lambda,
                denom,
                value,
                iterations: it,
            });
        }
        if it == opts.inner_max_iter {
            break;
        }
        // Once the predicted gain is below the rounding level of the
        // objective, an ascent test is meaningless; take pure Newton steps.
        let decrement = grad.dot(&step);
        if decrement < 1e-13 * value.abs().max(1.0) {
            let trial = &lambda + &step;
            if let Some((d, v)) = eval(&trial) {
                lambda = trial;
                denom = d;
                value = v;
                rounding_steps += 1;
                if rounding_steps <= 10 {
                    continue;
                }
            }
            if grad.norm() / nf < opts.inner_tol.sqrt() {
                return Ok(DualSolution {
                    lambda,
                    denom,
                    value,
                    iterations: it,
                });
            }
            break;
        }
        let mut t = 1.0;
        let mut moved = false;
        for _ in 0..60 {
            let trial = &lambda + &step * t;
            if let Some((d, v)) = eval(&trial) {
                if v >= value {
                    lambda = trial;
                    denom = d;
                    value = v;
                    moved = true;
                    break;
                }
            }
            t *= 0.5;
        }
        if !moved || lambda.norm() > 1e10 {
            break;
        }
    }
    Err(infeasible())
}

/// Result of the constrained fit.
#[derive(Debug, Clone)]
pub struct CmlFit {
    pub gamma_cml: DVector<f64>,
    /// Multiplier of the moment constraint; `p_i = 1 / (n (1 + λᵀu_i))`.
    pub lambda: DVector<f64>,
    pub p_weights: DVector<f64>,
    pub converged: bool,
    pub iterations: usize,
    /// Profile objective `ℓ(γ) − Σ log(1 + λᵀu_i)` per outer iteration.
    pub objective_trace: Vec<f64>,
    /// `‖Σ p_i u_i(γ̂)‖` at the solution.
    pub constraint_norm: f64,
}

struct ProfileState {
    gamma: DVector<f64>,
    dual: DualSolution,
    objective: f64,
}

fn profile_at(
    gamma: DVector<f64>,
    design: &DMatrix<f64>,
    y: &DVector<f64>,
    constraint: &ConstraintSet,
    warm: Option<&DVector<f64>>,
    opts: &CmlOptions,
) -> Result<ProfileState> {
    let u = constraint.scores(&gamma, design);
    let dual = solve_dual(&u, warm, opts, &constraint.name)?;
    let objective = log_likelihood(&gamma, design, y, constraint.internal_link)? - dual.value;
    Ok(ProfileState { gamma, dual, objective })
}

/// Gradient of the profile objective and its negative Hessian (exact when
/// positive definite, otherwise the expected-information approximation).
fn profile_derivatives(
    state: &ProfileState,
    design: &DMatrix<f64>,
    y: &DVector<f64>,
    constraint: &ConstraintSet,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let (n, d) = design.shape();
    let nf = n as f64;
    let r = constraint.dim();
    let link = constraint.internal_link;
    let gamma = &state.gamma;
    let lambda = &state.dual.lambda;
    let denom = &state.dual.denom;
    let (score, info) = score_and_info_design(gamma, design, y, link)?;
    let eta = design * gamma;
    let xe = constraint.external_design();
    let u = constraint.scores(gamma, design);

    let mut grad = score * nf;
    // curvature pieces of the constraint term
    let mut second = DMatrix::zeros(d, d);
    let mut a = DMatrix::zeros(r, d);
    let mut h_lambda = DMatrix::zeros(r, r);
    let mut jl_outer = DMatrix::zeros(d, d);
    let mut c_mean = DMatrix::zeros(r, d);
    let mut l_mean = DMatrix::zeros(r, r);
    for i in 0..n {
        let row = design.row(i).transpose();
        let xk = xe.row(i).transpose();
        let ui = u.row(i).transpose();
        let t = denom[i];
        let mu1 = link.mean_derivative(eta[i]);
        let mu2 = mean_second_derivative(link, eta[i]);
        let xl = xk.dot(lambda);
        // J_iᵀλ = μ'_i (x_kᵀλ) row_i
        let jtl = &row * (mu1 * xl);
        grad.axpy(-1.0 / t, &jtl, 1.0);
        second.ger(mu2 * xl / t, &row, &row, 1.0);
        jl_outer.ger(1.0 / (t * t), &jtl, &jtl, 1.0);
        // A = Σ J_i / t_i − u_i (J_iᵀλ)ᵀ / t_i²
        a.ger(mu1 / t, &xk, &row, 1.0);
        a.ger(-1.0 / (t * t), &ui, &jtl, 1.0);
        h_lambda.ger(1.0 / (t * t), &ui, &ui, 1.0);
        c_mean.ger(mu1 / nf, &xk, &row, 1.0);
        l_mean.ger(1.0 / nf, &ui, &ui, 1.0);
    }
    let info_total = &info * nf;
    let exact = spd_solve_matrix(&h_lambda, &a).map(|hinv_a| {
        let m = &info_total + &second - &jl_outer + a.transpose() * hinv_a;
        (&m + m.transpose()) * 0.5
    });
    if let Some(m) = exact {
        if m.clone().cholesky().is_some() {
            return Ok((grad, m));
        }
    }
    let fisher = match spd_solve_matrix(&l_mean, &c_mean) {
        Some(linv_c) => &info_total + c_mean.transpose() * linv_c * nf,
        None => info_total,
    };
    Ok((grad, (&fisher + fisher.transpose()) * 0.5))
}

fn spd_solve_matrix(m: &DMatrix<f64>, rhs: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    m.clone().cholesky().map(|c| c.solve(rhs))
}

/// Move `start` to a nearby point where the unweighted constraint mean
/// vanishes, so that the uniform weights are feasible. Used when the
/// external model is too far from the internal fit for `start` itself.
fn feasible_start(design: &DMatrix<f64>, constraint: &ConstraintSet, start: &DVector<f64>) -> Result<DVector<f64>> {
    let n = design.nrows() as f64;
    let mean_u = |g: &DVector<f64>| constraint.scores(g, design).row_sum().transpose() / n;
    let mut gamma = start.clone();
    let mut ubar = mean_u(&gamma);
    for _ in 0..100 {
        if ubar.norm() < 1e-12 {
            return Ok(gamma);
        }
        let j = constraint.mean_jacobian(&gamma, design);
        let jjt = &j * j.transpose();
        let Ok(v) = spd_solve(&jjt, &ubar, "constraint Jacobian") else {
            break;
        };
        let step = -(j.transpose() * v);
        let mut t = 1.0;
        let mut improved = false;
        for _ in 0..40 {
            let trial = &gamma + &step * t;
            let u = mean_u(&trial);
            if u.norm() < ubar.norm() {
                gamma = trial;
                ubar = u;
                improved = true;
                break;
            }
            t *= 0.5;
        }
        if !improved {
            break;
        }
    }
    if ubar.norm() < 1e-8 {
        Ok(gamma)
    } else {
        Err(Error::InfeasibleConstraint {
            model: constraint.name.clone(),
        })
    }
}

/// Constrained fit on an explicit design, started from `start` (normally γ̂_I).
pub fn fit_cml_design(
    design: &DMatrix<f64>,
    y: &DVector<f64>,
    constraint: &ConstraintSet,
    start: &DVector<f64>,
    opts: &CmlOptions,
) -> Result<CmlFit> {
    let (n, d) = design.shape();
    if constraint.dim() >= n {
        return Err(Error::InvalidArgument(format!(
            "constraint dimension {} must be below n = {n}",
            constraint.dim()
        )));
    }
    if start.len() != d {
        return Err(Error::Dimension("start vector length".into()));
    }
    let nf = n as f64;
    let mut state = match profile_at(start.clone(), design, y, constraint, None, opts) {
        Err(Error::InfeasibleConstraint { .. }) => {
            let feasible = feasible_start(design, constraint, start)?;
            profile_at(feasible, design, y, constraint, None, opts)?
        }
        other => other?,
    };
    let mut trace = vec![state.objective];
    let mut converged = false;
    let mut iterations = 0;
    while iterations < opts.outer_max_iter {
        let (grad, neg_hess) = profile_derivatives(&state, design, y, constraint)?;
        if grad.amax() / nf < opts.outer_tol {
            converged = true;
            break;
        }
        iterations += 1;
        let dir = spd_solve(&neg_hess, &grad, "profile Hessian")?;
        let slope = grad.dot(&dir);
        let mut t = 1.0;
        let mut next = None;
        for _ in 0..50 {
            let trial = &state.gamma + &dir * t;
            if let Ok(s) = profile_at(trial, design, y, constraint, Some(&state.dual.lambda), opts) {
                if s.objective >= state.objective + 1e-4 * t * slope
                    || (s.objective >= state.objective && t < 1e-3)
                {
                    next = Some(s);
                    break;
                }
            }
            t *= 0.5;
        }
        match next {
            Some(s) => {
                let rel = (&s.gamma - &state.gamma).norm() / state.gamma.norm().max(1.0);
                state = s;
                trace.push(state.objective);
                if rel < 1e-14 {
                    break;
                }
            }
            None => break,
        }
    }
    if !converged {
        let (grad, _) = profile_derivatives(&state, design, y, constraint)?;
        // accept a stalled line search sitting on a numerically flat optimum
        if grad.amax() / nf < opts.outer_tol * 100.0 {
            converged = true;
        }
    }
    if !converged {
        return Err(Error::NoConvergence {
            what: format!("constrained fit for `{}`", constraint.name),
            iterations,
        });
    }
    let mut p = state.dual.denom.map(|t| 1.0 / (nf * t));
    let total: f64 = p.sum();
    p /= total;
    let u = constraint.scores(&state.gamma, design);
    let constraint_norm = u.tr_mul(&p).norm();
    Ok(CmlFit {
        gamma_cml: state.gamma,
        lambda: state.dual.lambda,
        p_weights: p,
        converged,
        iterations,
        objective_trace: trace,
        constraint_norm,
    })
}

/// Constrained fit for one external model, starting from the internal MLE.
pub fn fit_cml(dataset: &Dataset, spec: &ExternalModelSpec, internal_fit: &GlmFit) -> Result<CmlFit> {
    let constraint = ConstraintSet::from_spec(dataset, spec, internal_fit.link)?;
    let design = build_design(dataset)?;
    fit_cml_design(
        &design,
        &dataset.outcome,
        &constraint,
        &internal_fit.gamma_hat,
        &CmlOptions::default(),
    )
}
