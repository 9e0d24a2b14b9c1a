//! Simulation scenarios and the replication driver.

use std::fmt;
use std::fs::File;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::data::{Dataset, ExternalModelSpec, Link};
use crate::error::{Error, Result};
use crate::glm::{fit_design, FitOptions};
use crate::linalg::expit;
use crate::pipeline::{run_pipeline, EstimateReport, PipelineOptions, Validation, WeightReport};
use crate::rng::{purpose, substream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum ScenarioId {
    I,
    II,
    III,
    IV,
    V,
    VI,
}

impl ScenarioId {
    pub const ALL: [ScenarioId; 6] = [
        ScenarioId::I,
        ScenarioId::II,
        ScenarioId::III,
        ScenarioId::IV,
        ScenarioId::V,
        ScenarioId::VI,
    ];
}

impl fmt::Display for ScenarioId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ScenarioId::I => "I",
            ScenarioId::II => "II",
            ScenarioId::III => "III",
            ScenarioId::IV => "IV",
            ScenarioId::V => "V",
            ScenarioId::VI => "VI",
        };
        f.write_str(s)
    }
}

impl FromStr for ScenarioId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "I" | "1" => Ok(ScenarioId::I),
            "II" | "2" => Ok(ScenarioId::II),
            "III" | "3" => Ok(ScenarioId::III),
            "IV" | "4" => Ok(ScenarioId::IV),
            "V" | "5" => Ok(ScenarioId::V),
            "VI" | "6" => Ok(ScenarioId::VI),
            other => Err(Error::InvalidArgument(format!(
                "unknown scenario `{other}` (expected I, II, III, IV, V or VI)"
            ))),
        }
    }
}

/// How one external population departs from the internal one.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Perturbation {
    None,
    /// `B ← B + b_shift + Σ_j b_on_x[j]·X_j` for every B column of external `model`.
    CovariateShift {
        model: usize,
        b_shift: f64,
        b_on_x: Vec<f64>,
    },
    /// External `model`'s outcome uses a shifted intercept and shifted X slopes.
    OutcomeShift {
        model: usize,
        intercept_shift: f64,
        x_slope_shift: f64,
    },
}

#[derive(Debug, Clone, Serialize)]
pub struct Scenario {
    pub id: ScenarioId,
    /// Intercept, then X slopes, then B slopes.
    pub true_gamma: Vec<f64>,
    pub p: usize,
    pub q: usize,
    pub corr: f64,
    pub n_internal: usize,
    pub n_external: Vec<usize>,
    /// Zero-based X indices used by each external model.
    pub external_sets: Vec<Vec<usize>>,
    pub perturbation: Perturbation,
    pub n_validation: usize,
    /// Perturbation magnitudes were tuned rather than read off a design table.
    pub calibrated: bool,
}

// Frozen after a single calibration pass against large-sample CML biases.
const SHIFT_III_B_MEAN: f64 = 1.50;
const SHIFT_III_B_ON_X: [f64; 2] = [-0.32, 0.36];

impl Scenario {
    pub fn new(id: ScenarioId) -> Self {
        let (p, q, n) = match id {
            ScenarioId::V => (9, 1, 500),
            ScenarioId::VI => (3, 5, 500),
            _ => (4, 1, 200),
        };
        let mut true_gamma = vec![-1.0];
        true_gamma.extend(std::iter::repeat_n(-0.5, p));
        true_gamma.extend(std::iter::repeat_n(0.5, q));
        let external_sets = match id {
            ScenarioId::V => vec![vec![0, 1], (0..7).collect(), vec![0, 1, 2, 3, 7, 8]],
            ScenarioId::VI => vec![vec![0, 1], vec![0, 2], vec![0, 1, 2]],
            _ => vec![vec![0, 1], vec![0, 2], vec![0, 1, 2, 3]],
        };
        let mut n_external = vec![30_000; 3];
        if id == ScenarioId::II {
            n_external[0] = 500;
        }
        let perturbation = match id {
            ScenarioId::III => {
                let mut b_on_x = vec![0.0; p];
                b_on_x[..2].copy_from_slice(&SHIFT_III_B_ON_X);
                Perturbation::CovariateShift {
                    model: 0,
                    b_shift: SHIFT_III_B_MEAN,
                    b_on_x,
                }
            }
            ScenarioId::IV => Perturbation::OutcomeShift {
                model: 2,
                intercept_shift: 1.7,
                x_slope_shift: 0.82,
            },
            _ => Perturbation::None,
        };
        Scenario {
            id,
            true_gamma,
            p,
            q,
            corr: 0.3,
            n_internal: n,
            n_external,
            external_sets,
            calibrated: !matches!(perturbation, Perturbation::None),
            perturbation,
            n_validation: 1000,
        }
    }

    pub fn x_names(&self) -> Vec<String> {
        (1..=self.p).map(|j| format!("X{j}")).collect()
    }

    pub fn b_names(&self) -> Vec<String> {
        if self.q == 1 {
            vec!["B".into()]
        } else {
            (1..=self.q).map(|j| format!("B{j}")).collect()
        }
    }

    pub fn coefficient_names(&self) -> Vec<String> {
        let mut names = vec!["(Intercept)".to_string()];
        names.extend(self.x_names());
        names.extend(self.b_names());
        names
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.p + self.q;
        if self.true_gamma.len() != d + 1 {
            return Err(Error::InvalidArgument("true_gamma length must be p + q + 1".into()));
        }
        // equicorrelation matrix is PD iff -1/(d-1) < ρ < 1
        if !(self.corr < 1.0 && self.corr > -1.0 / (d.max(2) - 1) as f64) {
            return Err(Error::InvalidArgument(format!("correlation {} is not PD", self.corr)));
        }
        if self.n_external.len() != self.external_sets.len() {
            return Err(Error::InvalidArgument("one external size per external model".into()));
        }
        if self.external_sets.iter().flatten().any(|&j| j >= self.p) {
            return Err(Error::InvalidArgument("external covariate index out of range".into()));
        }
        let model = match &self.perturbation {
            Perturbation::None => None,
            Perturbation::CovariateShift { model, b_on_x, .. } => {
                if b_on_x.len() != self.p {
                    return Err(Error::InvalidArgument("b_on_x needs one entry per X".into()));
                }
                Some(*model)
            }
            Perturbation::OutcomeShift { model, .. } => Some(*model),
        };
        if model.is_some_and(|m| m >= self.external_sets.len()) {
            return Err(Error::InvalidArgument("perturbed model index out of range".into()));
        }
        Ok(())
    }

    fn linear_predictor(&self, row: &[f64], external: Option<usize>) -> f64 {
        let mut gamma = self.true_gamma.clone();
        if let Perturbation::OutcomeShift {
            model,
            intercept_shift,
            x_slope_shift,
        } = &self.perturbation
        {
            if external == Some(*model) {
                gamma[0] += intercept_shift;
                for g in &mut gamma[1..=self.p] {
                    *g += x_slope_shift;
                }
            }
        }
        gamma[0] + gamma[1..].iter().zip(row).map(|(g, x)| g * x).sum::<f64>()
    }

    /// Covariate rows (X then B) and outcomes drawn from the population of
    /// `external` (or the internal population when `None`).
    fn draw(&self, rng: &mut ChaCha8Rng, n: usize, external: Option<usize>) -> (DMatrix<f64>, DVector<f64>, DVector<f64>) {
        let d = self.p + self.q;
        let shared = self.corr.sqrt();
        let own = (1.0 - self.corr).sqrt();
        let mut x = DMatrix::zeros(n, d);
        let mut prob = DVector::zeros(n);
        let mut y = DVector::zeros(n);
        let mut row = vec![0.0; d];
        for i in 0..n {
            let w0: f64 = StandardNormal.sample(rng);
            for v in row.iter_mut() {
                let e: f64 = StandardNormal.sample(rng);
                *v = shared * w0 + own * e;
            }
            if let Perturbation::CovariateShift { model, b_shift, b_on_x } = &self.perturbation {
                if external == Some(*model) {
                    let shift = b_shift + b_on_x.iter().zip(&row[..self.p]).map(|(c, v)| c * v).sum::<f64>();
                    for b in &mut row[self.p..] {
                        *b += shift;
                    }
                }
            }
            let p = expit(self.linear_predictor(&row, external));
            prob[i] = p;
            y[i] = if rng.random::<f64>() < p { 1.0 } else { 0.0 };
            for (j, v) in row.iter().enumerate() {
                x[(i, j)] = *v;
            }
        }
        (x, y, prob)
    }

    fn dataset(&self, x: DMatrix<f64>, y: DVector<f64>) -> Result<Dataset> {
        let mut names = self.x_names();
        names.extend(self.b_names());
        Dataset::new(y, x, names, self.x_names(), self.b_names())
    }
}

/// One replicate's data.
#[derive(Debug, Clone)]
pub struct Generated {
    pub internal: Dataset,
    pub externals: Vec<ExternalModelSpec>,
    pub validation: Dataset,
    pub validation_prob: DVector<f64>,
}

/// Fit external model `k` on its own sample from its population.
pub fn fit_external(scenario: &Scenario, k: usize, rng: &mut ChaCha8Rng) -> Result<ExternalModelSpec> {
    let set = &scenario.external_sets[k];
    let m = scenario.n_external[k];
    let (x, y, _) = scenario.draw(rng, m, Some(k));
    let mut design = DMatrix::from_element(m, set.len() + 1, 1.0);
    for (c, &j) in set.iter().enumerate() {
        design.set_column(c + 1, &x.column(j));
    }
    let fit = fit_design(&design, &y, Link::Logit, &FitOptions::default())?;
    let names = scenario.x_names();
    Ok(ExternalModelSpec::new(
        format!("external_{}", k + 1),
        Link::Logit,
        set.iter().map(|&j| names[j].clone()).collect(),
        fit.gamma_hat.iter().cloned().collect(),
    ))
}

/// Deterministic data for replicate `index` under `seed`.
pub fn generate(scenario: &Scenario, seed: u64, index: u64) -> Result<Generated> {
    scenario.validate()?;
    let mut rng = substream(seed, purpose::INTERNAL, index);
    let (x, y, _) = scenario.draw(&mut rng, scenario.n_internal, None);
    let internal = scenario.dataset(x, y)?;
    let externals = (0..scenario.external_sets.len())
        .map(|k| {
            let mut rng = substream(seed, purpose::EXTERNAL, index * 64 + k as u64);
            fit_external(scenario, k, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut rng = substream(seed, purpose::VALIDATION, index);
    let (vx, vy, prob) = scenario.draw(&mut rng, scenario.n_validation, None);
    let validation = scenario.dataset(vx, vy)?;
    Ok(Generated {
        internal,
        externals,
        validation,
        validation_prob: prob,
    })
}

/// Outcome draws from a scenario's internal population, for prevalence checks.
pub fn draw_internal(scenario: &Scenario, n: usize, seed: u64) -> Result<Dataset> {
    let mut rng = substream(seed, purpose::INTERNAL, u64::MAX);
    let (x, y, _) = scenario.draw(&mut rng, n, None);
    scenario.dataset(x, y)
}

#[derive(Debug, Clone, Serialize)]
pub struct SummaryRow {
    pub estimator: String,
    pub coefficient: String,
    pub bias: f64,
    pub sd: f64,
    pub ese: f64,
    pub coverage: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct WeightSummary {
    pub estimator: String,
    pub models: Vec<String>,
    pub mean: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct MetricSummary {
    pub estimator: String,
    pub avg_pred_var: f64,
    pub sse: f64,
    pub scaled_brier: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ReplicationSummary {
    pub scenario: ScenarioId,
    pub calibrated_scenario: bool,
    pub reps: usize,
    pub failures: usize,
    pub failure_rate: f64,
    pub seed: u64,
    pub mc_draws: usize,
    pub coefficients: Vec<String>,
    pub true_gamma: Vec<f64>,
    pub rows: Vec<SummaryRow>,
    pub weights: Vec<WeightSummary>,
    pub metrics: Vec<MetricSummary>,
}

impl ReplicationSummary {
    pub fn row(&self, estimator: &str, coefficient: usize) -> Option<&SummaryRow> {
        let name = self.coefficients.get(coefficient)?;
        self.rows
            .iter()
            .find(|r| r.estimator == estimator && &r.coefficient == name)
    }

    pub fn mean_weights(&self, estimator: &str) -> Option<&[f64]> {
        self.weights
            .iter()
            .find(|w| w.estimator == estimator)
            .map(|w| w.mean.as_slice())
    }

    pub fn metric(&self, estimator: &str) -> Option<&MetricSummary> {
        self.metrics.iter().find(|m| m.estimator == estimator)
    }

    pub fn estimators(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.estimator.as_str()) {
                out.push(&r.estimator);
            }
        }
        out
    }

    /// One row per estimator × coefficient.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let io = |e: std::io::Error| Error::Io {
            path: path.display().to_string(),
            source: e,
        };
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        for row in &self.rows {
            w.serialize(row).map_err(|e| Error::Parse {
                path: path.display().to_string(),
                reason: e.to_string(),
            })?;
        }
        w.flush().map_err(io)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let io = |e: std::io::Error| Error::Io {
            path: path.display().to_string(),
            source: e,
        };
        let mut f = File::create(path).map_err(io)?;
        serde_json::to_writer_pretty(&mut f, self).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        f.write_all(b"\n").map_err(io)
    }
}

struct ReplicateResult {
    reports: Vec<EstimateReport>,
}

fn run_replicate(scenario: &Scenario, seed: u64, index: u64, mc_draws: usize) -> Result<ReplicateResult> {
    let data = generate(scenario, seed, index)?;
    let eb_seed = substream(seed, purpose::REPLICATE, index).next_u64();
    let opts = PipelineOptions::all(mc_draws, eb_seed);
    let out = run_pipeline(&data.internal, &data.externals, Link::Logit, &opts)?;
    let design = crate::data::build_design(&data.validation)?;
    let validation = Validation {
        design: &design,
        outcome: &data.validation.outcome,
        true_prob: Some(&data.validation_prob),
    };
    let reports = out.reports(&opts.methods, Some(&validation))?;
    Ok(ReplicateResult { reports })
}

/// Run `reps` replicates and aggregate bias, spread, mean SE and coverage.
///
/// Replicates that fail are dropped from the aggregates and counted. The
/// result depends only on `(scenario, reps, seed, mc_draws)`.
pub fn run_scenario(scenario: &Scenario, reps: usize, seed: u64, mc_draws: usize) -> Result<ReplicationSummary> {
    if reps == 0 {
        return Err(Error::InvalidArgument("reps must be positive".into()));
    }
    if reps < 50 {
        log::warn!("{reps} replicates is too few for stable coverage estimates");
    }
    scenario.validate()?;
    let run = |i: usize| run_replicate(scenario, seed, i as u64, mc_draws);
    #[cfg(feature = "parallel")]
    let results: Vec<Result<ReplicateResult>> = {
        use rayon::prelude::*;
        (0..reps).into_par_iter().map(run).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let results: Vec<Result<ReplicateResult>> = (0..reps).map(run).collect();

    let mut ok = Vec::with_capacity(reps);
    let mut failures = 0;
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(r) => ok.push(r),
            Err(e) => {
                log::warn!("replicate {i} failed: {e}");
                failures += 1;
            }
        }
    }
    if ok.is_empty() {
        return Err(Error::NoConvergence {
            what: format!("every replicate of scenario {}", scenario.id),
            iterations: reps,
        });
    }
    Ok(aggregate(scenario, &ok, reps, failures, seed, mc_draws))
}

fn aggregate(
    scenario: &Scenario,
    ok: &[ReplicateResult],
    reps: usize,
    failures: usize,
    seed: u64,
    mc_draws: usize,
) -> ReplicationSummary {
    let names = scenario.coefficient_names();
    let truth = &scenario.true_gamma;
    let labels: Vec<String> = ok[0].reports.iter().map(|r| r.estimator.clone()).collect();
    let m = ok.len() as f64;
    let mut rows = Vec::new();
    let mut weights = Vec::new();
    let mut metrics = Vec::new();
    for (e, label) in labels.iter().enumerate() {
        let reports: Vec<&EstimateReport> = ok.iter().map(|r| &r.reports[e]).collect();
        for (j, name) in names.iter().enumerate() {
            let est: Vec<f64> = reports.iter().map(|r| r.gamma[j]).collect();
            let se: Vec<f64> = reports.iter().map(|r| r.cov[(j, j)].max(0.0).sqrt()).collect();
            let mean = est.iter().sum::<f64>() / m;
            let var = if ok.len() > 1 {
                est.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1.0)
            } else {
                0.0
            };
            let covered = est
                .iter()
                .zip(&se)
                .filter(|(v, s)| (*v - truth[j]).abs() <= 1.96 * **s)
                .count();
            rows.push(SummaryRow {
                estimator: label.clone(),
                coefficient: name.clone(),
                bias: mean - truth[j],
                sd: var.sqrt(),
                ese: se.iter().sum::<f64>() / m,
                coverage: covered as f64 / m,
            });
        }
        if let Some(WeightReport::PerModel(first)) = &reports[0].weights {
            let mut mean = vec![0.0; first.len()];
            for r in &reports {
                if let Some(WeightReport::PerModel(w)) = &r.weights {
                    for (acc, mw) in mean.iter_mut().zip(w) {
                        *acc += mw.weight / m;
                    }
                }
            }
            weights.push(WeightSummary {
                estimator: label.clone(),
                models: first.iter().map(|w| w.model.clone()).collect(),
                mean,
            });
        }
        let mut ms = MetricSummary {
            estimator: label.clone(),
            avg_pred_var: 0.0,
            sse: 0.0,
            scaled_brier: 0.0,
        };
        for r in &reports {
            if let Some(mr) = &r.metrics {
                ms.avg_pred_var += mr.avg_pred_var / m;
                ms.sse += mr.sse.unwrap_or(f64::NAN) / m;
                ms.scaled_brier += mr.scaled_brier / m;
            }
        }
        metrics.push(ms);
    }
    ReplicationSummary {
        scenario: scenario.id,
        calibrated_scenario: scenario.calibrated,
        reps,
        failures,
        failure_rate: failures as f64 / reps as f64,
        seed,
        mc_draws,
        coefficients: names,
        true_gamma: truth.clone(),
        rows,
        weights,
        metrics,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scenario_ids_parse() {
        for id in ScenarioId::ALL {
            assert_eq!(id.to_string().parse::<ScenarioId>().unwrap(), id);
        }
        assert!("VII".parse::<ScenarioId>().is_err());
    }

    #[test]
    fn scenario_shapes() {
        let vi = Scenario::new(ScenarioId::VI);
        assert_eq!((vi.p, vi.q), (3, 5));
        assert_eq!(vi.true_gamma.len(), 9);
        let v = Scenario::new(ScenarioId::V);
        assert_eq!(v.true_gamma.len(), 11);
        assert_eq!(Scenario::new(ScenarioId::II).n_external[0], 500);
        for id in ScenarioId::ALL {
            Scenario::new(id).validate().unwrap();
        }
    }

    #[test]
    fn generate_is_deterministic() {
        let mut s = Scenario::new(ScenarioId::I);
        s.n_external = vec![400; 3];
        let a = generate(&s, 11, 2).unwrap();
        let b = generate(&s, 11, 2).unwrap();
        assert_eq!(a.internal.covariates, b.internal.covariates);
        assert_eq!(a.externals[2].coefficients, b.externals[2].coefficients);
        let c = generate(&s, 11, 3).unwrap();
        assert_ne!(a.internal.outcome, c.internal.outcome);
    }

    #[test]
    fn zero_reps_rejected() {
        assert!(run_scenario(&Scenario::new(ScenarioId::I), 0, 1, 200).is_err());
    }
}
