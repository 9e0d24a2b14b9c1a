//! Independent reference computations shared by the integration tests.
//!
//! Everything here works on plain `Vec<f64>` and never calls into the
//! library's solvers, so agreement is evidence rather than tautology.
#![allow(dead_code)]

use ebmeta::{Dataset, Link};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn sigmoid(t: f64) -> f64 {
    1.0 / (1.0 + (-t).exp())
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Gaussian elimination with partial pivoting.
pub fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[piv][col].abs() < 1e-300 {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for r in col + 1..n {
            let f = a[r][col] / a[col][col];
            for c in col..n {
                a[r][c] -= f * a[col][c];
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|c| a[r][c] * x[c]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    Some(x)
}

/// Logistic MLE by plain Newton iterations on the score equations.
pub fn logistic_newton(rows: &[Vec<f64>], y: &[f64]) -> Option<Vec<f64>> {
    let d = rows[0].len();
    let mut beta = vec![0.0; d];
    for _ in 0..200 {
        let mut score = vec![0.0; d];
        let mut info = vec![vec![0.0; d]; d];
        for (x, &yi) in rows.iter().zip(y) {
            let mu = sigmoid(dot(x, &beta));
            let w = mu * (1.0 - mu);
            for a in 0..d {
                score[a] += x[a] * (yi - mu);
                for b in 0..d {
                    info[a][b] += w * x[a] * x[b];
                }
            }
        }
        let step = solve(info, score.clone())?;
        for (b, s) in beta.iter_mut().zip(&step) {
            *b += s;
        }
        if step.iter().map(|s| s.abs()).fold(0.0, f64::max) < 1e-13 {
            return Some(beta);
        }
    }
    None
}

pub fn logistic_loglik(rows: &[Vec<f64>], y: &[f64], beta: &[f64]) -> f64 {
    rows.iter()
        .zip(y)
        .map(|(x, &yi)| {
            let eta = dot(x, beta);
            yi * eta - (1.0 + eta.exp()).ln()
        })
        .sum()
}

/// `max_λ Σ log(1 + λᵀu_i)` by damped Newton; `None` when unbounded
/// (zero outside the convex hull of the `u_i`).
pub fn el_dual_value(u: &[Vec<f64>]) -> Option<f64> {
    let r = u[0].len();
    let mut lambda = vec![0.0; r];
    let value = |l: &[f64]| -> f64 {
        let mut s = 0.0;
        for ui in u {
            let t = 1.0 + dot(l, ui);
            if t <= 0.0 {
                return f64::NEG_INFINITY;
            }
            s += t.ln();
        }
        s
    };
    let mut current = 0.0;
    for _ in 0..500 {
        let mut g = vec![0.0; r];
        let mut h = vec![vec![0.0; r]; r];
        for ui in u {
            let t = 1.0 + dot(&lambda, ui);
            for a in 0..r {
                g[a] += ui[a] / t;
                for b in 0..r {
                    h[a][b] += ui[a] * ui[b] / (t * t);
                }
            }
        }
        let step = solve(h, g.clone())?;
        let mut t = 1.0;
        loop {
            let trial: Vec<f64> = lambda.iter().zip(&step).map(|(l, s)| l + t * s).collect();
            let v = value(&trial);
            if v >= current {
                lambda = trial;
                let gain = v - current;
                current = v;
                if gain < 1e-15 && dot(&g, &step) < 1e-20 {
                    return Some(current);
                }
                break;
            }
            t *= 0.5;
            if t < 1e-20 {
                return Some(current);
            }
        }
        if lambda.iter().any(|l| l.abs() > 1e8) {
            return None;
        }
    }
    Some(current)
}

/// Nelder–Mead maximizer with restarts at the incumbent.
pub fn nelder_mead_max(f: &dyn Fn(&[f64]) -> f64, start: &[f64], scale: f64) -> Vec<f64> {
    let d = start.len();
    let mut best = start.to_vec();
    let mut size = scale;
    for _ in 0..6 {
        let mut simplex: Vec<Vec<f64>> = vec![best.clone()];
        for j in 0..d {
            let mut v = best.clone();
            v[j] += size;
            simplex.push(v);
        }
        let mut vals: Vec<f64> = simplex.iter().map(|v| -f(v)).collect();
        for _ in 0..20_000 {
            let mut idx: Vec<usize> = (0..=d).collect();
            idx.sort_by(|&a, &b| vals[a].total_cmp(&vals[b]));
            simplex = idx.iter().map(|&i| simplex[i].clone()).collect();
            vals = idx.iter().map(|&i| vals[i]).collect();
            let spread = (1..=d)
                .map(|i| (0..d).map(|j| (simplex[i][j] - simplex[0][j]).abs()).fold(0.0, f64::max))
                .fold(0.0, f64::max);
            if spread < 1e-11 {
                break;
            }
            let centroid: Vec<f64> = (0..d).map(|j| simplex[..d].iter().map(|v| v[j]).sum::<f64>() / d as f64).collect();
            let along = |t: f64| -> Vec<f64> { (0..d).map(|j| centroid[j] + t * (simplex[d][j] - centroid[j])).collect() };
            let xr = along(-1.0);
            let fr = -f(&xr);
            if fr < vals[0] {
                let xe = along(-2.0);
                let fe = -f(&xe);
                if fe < fr {
                    simplex[d] = xe;
                    vals[d] = fe;
                } else {
                    simplex[d] = xr;
                    vals[d] = fr;
                }
            } else if fr < vals[d - 1] {
                simplex[d] = xr;
                vals[d] = fr;
            } else {
                let xc = if fr < vals[d] { along(-0.5) } else { along(0.5) };
                let fc = -f(&xc);
                if fc < vals[d].min(fr) {
                    simplex[d] = xc;
                    vals[d] = fc;
                } else {
                    for i in 1..=d {
                        simplex[i] = (0..d).map(|j| simplex[0][j] + 0.5 * (simplex[i][j] - simplex[0][j])).collect();
                        vals[i] = -f(&simplex[i]);
                    }
                }
            }
        }
        best = simplex[0].clone();
        size *= 0.1;
    }
    best
}

/// Constrained likelihood maximizer: γ by direct search, the empirical masses
/// by their own concave dual at each γ.
pub fn cml_oracle(rows: &[Vec<f64>], y: &[f64], ext_cols: &[usize], beta: &[f64], start: &[f64]) -> Option<Vec<f64>> {
    let objective = |g: &[f64]| -> f64 {
        let u: Vec<Vec<f64>> = rows
            .iter()
            .map(|x| {
                let xe: Vec<f64> = ext_cols.iter().map(|&c| x[c]).collect();
                let diff = sigmoid(dot(x, g)) - sigmoid(dot(&xe, beta));
                xe.iter().map(|v| v * diff).collect()
            })
            .collect();
        match el_dual_value(&u) {
            Some(v) => logistic_loglik(rows, y, g) - v,
            None => f64::NEG_INFINITY,
        }
    };
    if !objective(start).is_finite() {
        return None;
    }
    Some(nelder_mead_max(&objective, start, 0.2))
}

/// Minimum of `wᵀQw` over a regular grid on the 3-simplex.
pub fn grid_simplex_min(q: &DMatrix<f64>, step: f64) -> f64 {
    let m = (1.0 / step).round() as usize;
    let mut best = f64::INFINITY;
    for i in 0..=m {
        for j in 0..=(m - i) {
            let w = [i as f64 * step, j as f64 * step, (m - i - j) as f64 * step];
            let mut v = 0.0;
            for a in 0..3 {
                for b in 0..3 {
                    v += w[a] * q[(a, b)] * w[b];
                }
            }
            best = best.min(v);
        }
    }
    best
}

/// Central-difference Jacobian of `f` at `x`.
pub fn jacobian(f: &dyn Fn(&DVector<f64>) -> DVector<f64>, x: &DVector<f64>, h: f64) -> DMatrix<f64> {
    let m = f(x).len();
    let mut out = DMatrix::zeros(m, x.len());
    for j in 0..x.len() {
        let mut up = x.clone();
        let mut down = x.clone();
        up[j] += h;
        down[j] -= h;
        out.set_column(j, &((f(&up) - f(&down)) / (2.0 * h)));
    }
    out
}

pub fn random_pd(rng: &mut ChaCha8Rng, d: usize) -> DMatrix<f64> {
    let a = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    &a * a.transpose() + DMatrix::identity(d, d) * 0.1
}

pub fn random_psd(rng: &mut ChaCha8Rng, d: usize, rank: usize) -> DMatrix<f64> {
    let a = DMatrix::from_fn(d, rank, |_, _| rng.sample::<f64, _>(StandardNormal));
    &a * a.transpose()
}

pub fn random_vector(rng: &mut ChaCha8Rng, d: usize) -> DVector<f64> {
    DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal))
}

/// Logistic data with one shared covariate `X1` and one internal-only `B`.
pub fn tiny_dataset(seed: u64, n: usize) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cov = DMatrix::zeros(n, 2);
    let mut y = DVector::zeros(n);
    for i in 0..n {
        let w: f64 = rng.sample(StandardNormal);
        let x = 0.3f64.sqrt() * w + 0.7f64.sqrt() * rng.sample::<f64, _>(StandardNormal);
        let b = 0.3f64.sqrt() * w + 0.7f64.sqrt() * rng.sample::<f64, _>(StandardNormal);
        cov[(i, 0)] = x;
        cov[(i, 1)] = b;
        let p = sigmoid(-0.5 - 0.8 * x + 0.8 * b);
        y[i] = if rng.random::<f64>() < p { 1.0 } else { 0.0 };
    }
    Dataset::new(y, cov, vec!["X1".into(), "B".into()], vec!["X1".into()], vec!["B".into()]).unwrap()
}

/// Design rows (intercept first) of a dataset as plain vectors.
pub fn rows_of(dataset: &Dataset) -> Vec<Vec<f64>> {
    let design = ebmeta::build_design(dataset).unwrap();
    (0..design.nrows()).map(|i| design.row(i).iter().cloned().collect()).collect()
}

pub const LOGIT: Link = Link::Logit;
