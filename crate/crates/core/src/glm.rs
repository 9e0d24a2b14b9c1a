//! Maximum-likelihood fitting of the internal target GLM.

use nalgebra::{DMatrix, DVector};

use crate::data::{build_design, Dataset, Link};
use crate::error::{Error, Result};
use crate::linalg::{numerical_rank, spd_inverse, spd_solve};

/// Linear predictor beyond which a fitted probability is numerically 0 or 1.
const SATURATED_ETA: f64 = 30.0;

/// Convergence controls for Newton–Raphson.
#[derive(Debug, Clone, Copy)]
pub struct FitOptions {
    /// Stop when the largest absolute mean score falls below this.
    pub score_tol: f64,
    /// Or when the relative coefficient change falls below this.
    pub step_tol: f64,
    pub max_iter: usize,
    /// Coefficient norm beyond which the fit is declared separated.
    pub separation_cap: f64,
    /// Estimate the residual variance for the identity link instead of using 1.
    pub estimate_dispersion: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            score_tol: 1e-8,
            step_tol: 1e-10,
            max_iter: 100,
            separation_cap: 1e3,
            estimate_dispersion: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GlmFit {
    pub gamma_hat: DVector<f64>,
    /// Estimated covariance of `gamma_hat`, the inverse of the total observed information.
    pub cov: DMatrix<f64>,
    pub link: Link,
    pub loglik: f64,
    pub converged: bool,
    pub iterations: usize,
    pub dispersion: f64,
    /// Log-likelihood after each accepted Newton step.
    pub loglik_trace: Vec<f64>,
}

impl GlmFit {
    pub fn standard_errors(&self) -> DVector<f64> {
        self.cov.diagonal().map(|v| v.max(0.0).sqrt())
    }
}

/// Linear predictors and mean responses for each design row.
pub fn predict(gamma: &DVector<f64>, design: &DMatrix<f64>, link: Link) -> Result<(DVector<f64>, DVector<f64>)> {
    if design.ncols() != gamma.len() {
        return Err(Error::Dimension(format!(
            "design has {} columns, coefficients {}",
            design.ncols(),
            gamma.len()
        )));
    }
    let eta = design * gamma;
    if eta.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("linear predictor".into()));
    }
    let mu = eta.map(|e| link.inverse(e));
    Ok((eta, mu))
}

pub fn log_likelihood(gamma: &DVector<f64>, design: &DMatrix<f64>, y: &DVector<f64>, link: Link) -> Result<f64> {
    let (eta, _) = predict(gamma, design, link)?;
    Ok(match link {
        // y·η − log(1 + e^η), evaluated without overflow
        Link::Logit => eta
            .iter()
            .zip(y.iter())
            .map(|(&e, &yi)| yi * e - (e.max(0.0) + (-e.abs()).exp().ln_1p()))
            .sum(),
        Link::Identity => -0.5 * eta.iter().zip(y.iter()).map(|(&e, &yi)| (yi - e).powi(2)).sum::<f64>(),
    })
}

/// Mean score and mean information (negative Hessian) of the log-likelihood.
///
/// The identity link uses unit dispersion.
pub fn score_and_info_design(
    gamma: &DVector<f64>,
    design: &DMatrix<f64>,
    y: &DVector<f64>,
    link: Link,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = design.nrows() as f64;
    let (eta, mu) = predict(gamma, design, link)?;
    let resid = y - &mu;
    let score = design.tr_mul(&resid) / n;
    let weights = eta.map(|e| link.mean_derivative(e));
    let weighted = DMatrix::from_fn(design.nrows(), design.ncols(), |i, j| design[(i, j)] * weights[i]);
    let info = design.tr_mul(&weighted) / n;
    Ok((score, info))
}

pub fn score_and_info(gamma: &DVector<f64>, dataset: &Dataset, link: Link) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let design = build_design(dataset)?;
    score_and_info_design(gamma, &design, &dataset.outcome, link)
}

/// Fit the target GLM on the internal data.
pub fn fit_mle(dataset: &Dataset, link: Link) -> Result<GlmFit> {
    fit_mle_with(dataset, link, &FitOptions::default())
}

pub fn fit_mle_with(dataset: &Dataset, link: Link, opts: &FitOptions) -> Result<GlmFit> {
    if link == Link::Logit {
        dataset.check_binary()?;
    }
    let design = build_design(dataset)?;
    fit_design(&design, &dataset.outcome, link, opts)
}

/// Fit on an explicit design. For the logit link `y` may hold any values in
/// `[0, 1]`, which makes this usable for fitting to probabilities.
pub fn fit_design(design: &DMatrix<f64>, y: &DVector<f64>, link: Link, opts: &FitOptions) -> Result<GlmFit> {
    let (n, d) = design.shape();
    if y.len() != n {
        return Err(Error::Dimension(format!("design has {n} rows, outcome {}", y.len())));
    }
    if n < d {
        return Err(Error::RankDeficient { rank: n, cols: d });
    }
    let rank = numerical_rank(design);
    if rank < d {
        return Err(Error::RankDeficient { rank, cols: d });
    }
    match link {
        Link::Identity => fit_identity(design, y, opts),
        Link::Logit => fit_logit(design, y, opts),
    }
}

fn fit_identity(design: &DMatrix<f64>, y: &DVector<f64>, opts: &FitOptions) -> Result<GlmFit> {
    let (n, d) = design.shape();
    let xtx = design.tr_mul(design);
    let gamma = spd_solve(&xtx, &design.tr_mul(y), "normal equations")?;
    let resid = y - design * &gamma;
    let rss = resid.norm_squared();
    let dispersion = if opts.estimate_dispersion && n > d {
        rss / (n - d) as f64
    } else {
        1.0
    };
    let cov = spd_inverse(&xtx, "X'X")? * dispersion;
    Ok(GlmFit {
        gamma_hat: gamma,
        cov,
        link: Link::Identity,
        loglik: -0.5 * rss,
        converged: true,
        iterations: 1,
        dispersion,
        loglik_trace: vec![-0.5 * rss],
    })
}

fn fit_logit(design: &DMatrix<f64>, y: &DVector<f64>, opts: &FitOptions) -> Result<GlmFit> {
    let n = design.nrows() as f64;
    let mut gamma = DVector::zeros(design.ncols());
    let mut loglik = log_likelihood(&gamma, design, y, Link::Logit)?;
    let mut converged = false;
    let mut iterations = 0;
    let mut trace = vec![loglik];
    while iterations < opts.max_iter {
        iterations += 1;
        let (score, info) = score_and_info_design(&gamma, design, y, Link::Logit)?;
        if score.amax() < opts.score_tol {
            converged = true;
            break;
        }
        let step = spd_solve(&info, &score, "logistic information")?;
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let trial = &gamma + &step * t;
            if let Ok(ll) = log_likelihood(&trial, design, y, Link::Logit) {
                if ll >= loglik - 1e-12 * loglik.abs().max(1.0) {
                    accepted = Some((trial, ll));
                    break;
                }
            }
            t *= 0.5;
        }
        let Some((next, ll)) = accepted else {
            break;
        };
        let rel = (&next - &gamma).norm() / gamma.norm().max(1.0);
        gamma = next;
        loglik = ll;
        trace.push(ll);
        if gamma.norm() > opts.separation_cap {
            return Err(Error::Separation {
                cap: opts.separation_cap,
            });
        }
        if rel < opts.step_tol {
            converged = true;
            break;
        }
    }
    if !converged {
        // one last look: the halving loop may have stalled exactly at the optimum
        let (score, _) = score_and_info_design(&gamma, design, y, Link::Logit)?;
        if score.amax() < opts.score_tol * 10.0 {
            converged = true;
        }
    }
    if !converged {
        return Err(Error::NoConvergence {
            what: "logistic Newton-Raphson".into(),
            iterations,
        });
    }
    // the score also vanishes as coefficients diverge under separation
    if (design * &gamma).amax() > SATURATED_ETA {
        return Err(Error::Separation {
            cap: opts.separation_cap,
        });
    }
    let (_, info) = score_and_info_design(&gamma, design, y, Link::Logit)?;
    let cov = spd_inverse(&(info * n), "observed information")?;
    Ok(GlmFit {
        gamma_hat: gamma,
        cov,
        link: Link::Logit,
        loglik,
        converged,
        iterations,
        dispersion: 1.0,
        loglik_trace: trace,
    })
}
