//! Two-step integration: per-model constrained and EB fits, then composite
//! estimators, packaged as serializable reports.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::asymptotics::{
    eb_covariance, eb_point, estimate_blocks_design, joint_cov, large_discrepancy, EbCovariance,
    JointAsymptoticCov,
};
use crate::combiners::{combine_ivw, combine_ocwe, combine_sclearner, CombinationResult, Weights};
use crate::cspml::{fit_cml_design, CmlFit, CmlOptions, ConstraintSet};
use crate::data::{build_design, Dataset, ExternalModelSpec, Link};
use crate::error::{Error, Result};
use crate::glm::{fit_design, FitOptions, GlmFit};
use crate::metrics::{evaluate, MetricReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Estimator {
    Mle,
    Cml,
    Eb,
    Ivw,
    Ocwe,
    #[serde(rename = "sclearner")]
    ScLearner,
}

impl Estimator {
    pub const ALL: [Estimator; 6] = [
        Estimator::Mle,
        Estimator::Cml,
        Estimator::Eb,
        Estimator::Ivw,
        Estimator::Ocwe,
        Estimator::ScLearner,
    ];

    /// True for estimators whose uncertainty comes from the Monte Carlo EB covariance.
    pub fn needs_eb_covariance(self) -> bool {
        matches!(self, Estimator::Eb | Estimator::Ivw | Estimator::Ocwe | Estimator::ScLearner)
    }
}

impl fmt::Display for Estimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Estimator::Mle => "mle",
            Estimator::Cml => "cml",
            Estimator::Eb => "eb",
            Estimator::Ivw => "ivw",
            Estimator::Ocwe => "ocwe",
            Estimator::ScLearner => "sclearner",
        })
    }
}

impl FromStr for Estimator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "mle" | "direct" => Ok(Estimator::Mle),
            "cml" => Ok(Estimator::Cml),
            "eb" => Ok(Estimator::Eb),
            "ivw" => Ok(Estimator::Ivw),
            "ocwe" => Ok(Estimator::Ocwe),
            "sclearner" | "sc-learner" | "sc_learner" => Ok(Estimator::ScLearner),
            other => Err(Error::InvalidArgument(format!(
                "unknown method `{other}` (expected mle, cml, eb, ivw, ocwe or sclearner)"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PipelineOptions {
    pub methods: BTreeSet<Estimator>,
    pub mc_draws: usize,
    pub seed: u64,
    pub glm: FitOptions,
    pub cml: CmlOptions,
}

impl PipelineOptions {
    pub fn all(mc_draws: usize, seed: u64) -> Self {
        PipelineOptions {
            methods: Estimator::ALL.into_iter().collect(),
            mc_draws,
            seed,
            glm: FitOptions::default(),
            cml: CmlOptions::default(),
        }
    }
}

/// Step-one output for one external model.
#[derive(Debug, Clone)]
pub struct ModelStep {
    pub name: String,
    pub cml: CmlFit,
    pub eb: DVector<f64>,
    /// `‖γ̂_I − γ̂_CML‖` is large relative to the internal uncertainty; EB
    /// standard errors from the zero-mean simulation may then be too small.
    pub large_discrepancy: bool,
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub names: Vec<String>,
    pub link: Link,
    pub internal: GlmFit,
    pub models: Vec<ModelStep>,
    /// Design positions each external model covers (intercept at 0).
    pub coverage: Vec<Vec<usize>>,
    pub joint: Option<JointAsymptoticCov>,
    pub eb_cov: Option<EbCovariance>,
    pub combinations: Vec<CombinationResult>,
}

/// Run both steps on an internal dataset and a list of external models.
pub fn run_pipeline(
    dataset: &Dataset,
    specs: &[ExternalModelSpec],
    link: Link,
    opts: &PipelineOptions,
) -> Result<PipelineOutput> {
    if opts.methods.is_empty() {
        return Err(Error::InvalidArgument("at least one method must be requested".into()));
    }
    if link == Link::Logit {
        dataset.check_binary()?;
    }
    let design = build_design(dataset)?;
    let y = &dataset.outcome;
    let internal = fit_design(&design, y, link, &opts.glm)?;
    let integrate = opts.methods.iter().any(|m| *m != Estimator::Mle);
    if specs.is_empty() || !integrate {
        if integrate {
            log::warn!("no external models supplied; only the direct fit is reported");
        }
        return Ok(PipelineOutput {
            names: dataset.coefficient_names(),
            link,
            internal,
            models: Vec::new(),
            coverage: Vec::new(),
            joint: None,
            eb_cov: None,
            combinations: Vec::new(),
        });
    }

    let constraints = specs
        .iter()
        .map(|s| ConstraintSet::from_spec(dataset, s, link))
        .collect::<Result<Vec<_>>>()?;
    let fits = constraints
        .iter()
        .map(|c| fit_cml_design(&design, y, c, &internal.gamma_hat, &opts.cml).map_err(|e| e.in_model(&c.name)))
        .collect::<Result<Vec<_>>>()?;
    let blocks = estimate_blocks_design(&design, y, &constraints, &internal.gamma_hat, link)?;
    let joint = joint_cov(&blocks)?;
    let v_i = joint.var_internal();
    let mut models = Vec::with_capacity(fits.len());
    for (c, cml) in constraints.iter().zip(fits) {
        let eb = eb_point(&internal.gamma_hat, &cml.gamma_cml, &v_i)?;
        let flag = large_discrepancy(&internal.gamma_hat, &cml.gamma_cml, &v_i);
        if flag {
            log::info!("external model `{}` disagrees strongly with the internal fit", c.name);
        }
        models.push(ModelStep {
            name: c.name.clone(),
            cml,
            eb,
            large_discrepancy: flag,
        });
    }
    let coverage: Vec<Vec<usize>> = constraints.iter().map(|c| c.positions.clone()).collect();

    let eb_cov = if opts.methods.iter().any(|m| m.needs_eb_covariance()) {
        if opts.mc_draws == 0 {
            return Err(Error::InvalidArgument(
                "EB-based methods need Monte Carlo draws (mc_draws > 0)".into(),
            ));
        }
        Some(eb_covariance(&joint, opts.mc_draws, opts.seed)?)
    } else {
        None
    };

    let mut combinations = Vec::new();
    if let Some(cov) = &eb_cov {
        let eb: Vec<DVector<f64>> = models.iter().map(|m| m.eb.clone()).collect();
        if opts.methods.contains(&Estimator::Ivw) {
            combinations.push(combine_ivw(&eb, cov, &design)?);
        }
        if opts.methods.contains(&Estimator::Ocwe) {
            combinations.push(combine_ocwe(&eb, cov, &design)?);
        }
        if opts.methods.contains(&Estimator::ScLearner) {
            combinations.push(combine_sclearner(&eb, cov, &coverage, &internal.gamma_hat)?);
        }
    }

    Ok(PipelineOutput {
        names: dataset.coefficient_names(),
        link,
        internal,
        models,
        coverage,
        joint: Some(joint),
        eb_cov,
        combinations,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct CoefficientRow {
    pub name: String,
    pub estimate: f64,
    pub se: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ModelWeight {
    pub model: String,
    pub weight: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct CoefficientWeights {
    pub coefficient: String,
    /// `external` when combined across EB estimates, `internal` when taken from the direct fit.
    pub source: &'static str,
    pub weights: Vec<ModelWeight>,
}

#[derive(Debug, Clone, Serialize)]
#[serde(untagged)]
pub enum WeightReport {
    PerModel(Vec<ModelWeight>),
    PerCoefficient(Vec<CoefficientWeights>),
}

/// One estimator's coefficients and uncertainty, with where they came from.
#[derive(Debug, Clone, Serialize)]
pub struct EstimateReport {
    pub estimator: String,
    pub provenance: Estimator,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    pub coefficients: Vec<CoefficientRow>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weights: Option<WeightReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub objective: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metrics: Option<MetricReport>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
    #[serde(skip)]
    pub gamma: DVector<f64>,
    #[serde(skip)]
    pub cov: DMatrix<f64>,
}

impl EstimateReport {
    fn new(
        estimator: String,
        provenance: Estimator,
        model: Option<String>,
        names: &[String],
        gamma: DVector<f64>,
        cov: DMatrix<f64>,
    ) -> Self {
        let coefficients = names
            .iter()
            .enumerate()
            .map(|(j, name)| CoefficientRow {
                name: name.clone(),
                estimate: gamma[j],
                se: cov[(j, j)].max(0.0).sqrt(),
            })
            .collect();
        EstimateReport {
            estimator,
            provenance,
            model,
            coefficients,
            weights: None,
            objective: None,
            metrics: None,
            warnings: Vec::new(),
            gamma,
            cov,
        }
    }

    pub fn se(&self) -> DVector<f64> {
        self.cov.diagonal().map(|v| v.max(0.0).sqrt())
    }
}

/// Held-out data for computing metrics on each report.
pub struct Validation<'a> {
    pub design: &'a DMatrix<f64>,
    pub outcome: &'a DVector<f64>,
    pub true_prob: Option<&'a DVector<f64>>,
}

const DISCREPANCY_WARNING: &str =
    "large internal/external discrepancy: Monte Carlo standard errors may be underestimated";

impl PipelineOutput {
    /// Flatten into reports for the requested methods, in a fixed order:
    /// direct fit, CML per model, EB per model, then the composites.
    pub fn reports(&self, methods: &BTreeSet<Estimator>, validation: Option<&Validation>) -> Result<Vec<EstimateReport>> {
        let mut out = Vec::new();
        if methods.contains(&Estimator::Mle) {
            out.push(EstimateReport::new(
                "MLE".into(),
                Estimator::Mle,
                None,
                &self.names,
                self.internal.gamma_hat.clone(),
                self.internal.cov.clone(),
            ));
        }
        if methods.contains(&Estimator::Cml) {
            if let Some(joint) = &self.joint {
                for (k, m) in self.models.iter().enumerate() {
                    let mut r = EstimateReport::new(
                        format!("CML_{}", k + 1),
                        Estimator::Cml,
                        Some(m.name.clone()),
                        &self.names,
                        m.cml.gamma_cml.clone(),
                        joint.var_cml(k),
                    );
                    if m.large_discrepancy {
                        r.warnings.push(DISCREPANCY_WARNING.into());
                    }
                    out.push(r);
                }
            }
        }
        if methods.contains(&Estimator::Eb) {
            if let Some(cov) = &self.eb_cov {
                for (k, m) in self.models.iter().enumerate() {
                    let mut r = EstimateReport::new(
                        format!("EB_{}", k + 1),
                        Estimator::Eb,
                        Some(m.name.clone()),
                        &self.names,
                        m.eb.clone(),
                        cov.var_eb(k),
                    );
                    if m.large_discrepancy {
                        r.warnings.push(DISCREPANCY_WARNING.into());
                    }
                    out.push(r);
                }
            }
        }
        for c in &self.combinations {
            let provenance = match c.method {
                crate::combiners::Method::Ivw => Estimator::Ivw,
                crate::combiners::Method::Ocwe => Estimator::Ocwe,
                crate::combiners::Method::ScLearner => Estimator::ScLearner,
            };
            let mut r = EstimateReport::new(
                c.method.label().into(),
                provenance,
                None,
                &self.names,
                c.gamma_final.clone(),
                c.cov_final.clone(),
            );
            r.weights = Some(self.weight_report(&c.weights));
            r.objective = c.objective;
            if self.models.iter().any(|m| m.large_discrepancy) {
                r.warnings.push(DISCREPANCY_WARNING.into());
            }
            out.push(r);
        }
        if let Some(v) = validation {
            for r in &mut out {
                r.metrics = Some(evaluate(&r.gamma, &r.cov, v.design, v.outcome, v.true_prob, self.link)?);
            }
        }
        Ok(out)
    }

    fn weight_report(&self, weights: &Weights) -> WeightReport {
        match weights {
            Weights::PerModel(w) => WeightReport::PerModel(
                self.models
                    .iter()
                    .zip(w.iter())
                    .map(|(m, &weight)| ModelWeight {
                        model: m.name.clone(),
                        weight,
                    })
                    .collect(),
            ),
            Weights::PerCoefficient { weights, from_internal } => WeightReport::PerCoefficient(
                self.names
                    .iter()
                    .enumerate()
                    .map(|(j, name)| CoefficientWeights {
                        coefficient: name.clone(),
                        source: if from_internal[j] { "internal" } else { "external" },
                        weights: self
                            .models
                            .iter()
                            .enumerate()
                            .filter(|(k, _)| weights[(*k, j)] > 0.0)
                            .map(|(k, m)| ModelWeight {
                                model: m.name.clone(),
                                weight: weights[(k, j)],
                            })
                            .collect(),
                    })
                    .collect(),
            ),
        }
    }
}
