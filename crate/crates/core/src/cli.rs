//! Command implementations behind the `ebmeta` binary.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::data::{build_design, Dataset, ExternalModelSpec, Link};
use crate::error::{Error, Result};
use crate::pipeline::{run_pipeline, Estimator, EstimateReport, PipelineOptions, Validation};
use crate::sim::{run_scenario, ReplicationSummary, Scenario, ScenarioId};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Fit,
    Simulate,
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub command: Command,
    pub data_path: Option<PathBuf>,
    pub outcome_name: Option<String>,
    pub b_names: Vec<String>,
    pub external_spec_paths: Vec<PathBuf>,
    pub methods: BTreeSet<Estimator>,
    pub mc_draws: usize,
    pub seed: Option<u64>,
    pub scenario: Option<String>,
    pub reps: usize,
    pub output_path: Option<PathBuf>,
    pub validation_path: Option<PathBuf>,
    pub link: Link,
}

impl RunConfig {
    fn require<'a, T>(value: &'a Option<T>, flag: &str) -> Result<&'a T> {
        value
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument(format!("--{flag} is required")))
    }

    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            return Err(Error::InvalidArgument("--methods must name at least one method".into()));
        }
        let random = match self.command {
            Command::Simulate => true,
            Command::Fit => self.mc_draws > 0 && self.methods.iter().any(|m| m.needs_eb_covariance()),
        };
        if random && self.seed.is_none() {
            return Err(Error::InvalidArgument("--seed is required for Monte Carlo steps".into()));
        }
        match self.command {
            Command::Fit => {
                Self::require(&self.data_path, "data")?;
                Self::require(&self.outcome_name, "outcome")?;
                if self.b_names.is_empty() {
                    return Err(Error::InvalidArgument("--b-cols must list at least one column".into()));
                }
            }
            Command::Simulate => {
                Self::require(&self.scenario, "scenario")?.parse::<ScenarioId>()?;
                Self::require(&self.output_path, "out")?;
                if self.reps == 0 {
                    return Err(Error::InvalidArgument("--reps must be positive".into()));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct FitReport {
    pub link: Link,
    pub n: usize,
    pub coefficients: Vec<String>,
    pub external_models: Vec<String>,
    pub mc_draws: usize,
    pub seed: Option<u64>,
    pub estimators: Vec<EstimateReport>,
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })
}

/// Fit, integrate and combine; writes the JSON report when `--out` is given.
pub fn cmd_fit(config: &RunConfig) -> Result<FitReport> {
    config.validate()?;
    let data_path = RunConfig::require(&config.data_path, "data")?;
    let outcome = RunConfig::require(&config.outcome_name, "outcome")?;
    let dataset = Dataset::from_csv(data_path, outcome, &config.b_names)?;
    let specs = config
        .external_spec_paths
        .iter()
        .map(|p| ExternalModelSpec::from_json_file(p))
        .collect::<Result<Vec<_>>>()?;
    let validation = match &config.validation_path {
        Some(p) => {
            let v = Dataset::from_csv(p, outcome, &config.b_names)?;
            if v.names != dataset.names {
                return Err(Error::Parse {
                    path: p.display().to_string(),
                    reason: format!("columns {:?} do not match the data columns {:?}", v.names, dataset.names),
                });
            }
            Some(v)
        }
        None => None,
    };
    let opts = PipelineOptions {
        methods: config.methods.clone(),
        mc_draws: config.mc_draws,
        seed: config.seed.unwrap_or(0),
        ..PipelineOptions::all(config.mc_draws, 0)
    };
    let output = run_pipeline(&dataset, &specs, config.link, &opts)?;
    let reports = match &validation {
        Some(v) => {
            let design = build_design(v)?;
            output.reports(
                &config.methods,
                Some(&Validation {
                    design: &design,
                    outcome: &v.outcome,
                    true_prob: None,
                }),
            )?
        }
        None => output.reports(&config.methods, None)?,
    };
    let report = FitReport {
        link: config.link,
        n: dataset.n(),
        coefficients: output.names.clone(),
        external_models: specs.iter().map(|s| s.name.clone()).collect(),
        mc_draws: if output.eb_cov.is_some() { config.mc_draws } else { 0 },
        seed: config.seed,
        estimators: reports,
    };
    if let Some(out) = &config.output_path {
        write_json(&report, out)?;
    }
    Ok(report)
}

/// Paths written by [`cmd_simulate`].
#[derive(Debug, Clone)]
pub struct SimulationOutputs {
    pub summary_csv: PathBuf,
    pub results_json: PathBuf,
}

/// Run a scenario and write `summary_<id>.csv` and `results_<id>.json` into `--out`.
pub fn cmd_simulate(config: &RunConfig) -> Result<(ReplicationSummary, SimulationOutputs)> {
    config.validate()?;
    let id: ScenarioId = RunConfig::require(&config.scenario, "scenario")?.parse()?;
    let dir = RunConfig::require(&config.output_path, "out")?;
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.display().to_string(),
        source: e,
    })?;
    let scenario = Scenario::new(id);
    let summary = run_scenario(&scenario, config.reps, config.seed.unwrap_or(0), config.mc_draws)?;
    let outputs = SimulationOutputs {
        summary_csv: dir.join(format!("summary_{id}.csv")),
        results_json: dir.join(format!("results_{id}.json")),
    };
    summary.write_csv(&outputs.summary_csv)?;
    summary.write_json(&outputs.results_json)?;
    Ok((summary, outputs))
}
