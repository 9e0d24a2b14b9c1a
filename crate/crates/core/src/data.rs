//! Internal datasets, external model specifications and the covariate index map.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Link function shared by the internal target model and external models.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Link {
    Logit,
    Identity,
}

impl Link {
    pub fn inverse(self, eta: f64) -> f64 {
        match self {
            Link::Logit => crate::linalg::expit(eta),
            Link::Identity => eta,
        }
    }

    /// Derivative of the mean with respect to the linear predictor.
    pub fn mean_derivative(self, eta: f64) -> f64 {
        match self {
            Link::Logit => {
                let mu = crate::linalg::expit(eta);
                mu * (1.0 - mu)
            }
            Link::Identity => 1.0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Link::Logit => "logit",
            Link::Identity => "identity",
        }
    }
}

impl std::str::FromStr for Link {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "logit" => Ok(Link::Logit),
            "identity" => Ok(Link::Identity),
            other => Err(Error::InvalidArgument(format!("unknown link `{other}`"))),
        }
    }
}

/// Individual-level internal observations.
///
/// `covariates` columns follow `names`; `x_names` are the standard covariates
/// shared with external models and `b_names` the internal-only ones.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub outcome: DVector<f64>,
    pub covariates: DMatrix<f64>,
    pub names: Vec<String>,
    pub x_names: Vec<String>,
    pub b_names: Vec<String>,
}

impl Dataset {
    pub fn new(
        outcome: DVector<f64>,
        covariates: DMatrix<f64>,
        names: Vec<String>,
        x_names: Vec<String>,
        b_names: Vec<String>,
    ) -> Result<Self> {
        let n = outcome.len();
        if covariates.nrows() != n {
            return Err(Error::InvalidData(format!(
                "outcome has {n} rows but covariates have {}",
                covariates.nrows()
            )));
        }
        if covariates.ncols() != names.len() {
            return Err(Error::InvalidData(format!(
                "{} covariate columns but {} names",
                covariates.ncols(),
                names.len()
            )));
        }
        let mut seen = HashSet::new();
        for name in &names {
            if !seen.insert(name.as_str()) {
                return Err(Error::InvalidData(format!("duplicate column name `{name}`")));
            }
        }
        if b_names.is_empty() {
            return Err(Error::InvalidData("at least one new (B) covariate is required".into()));
        }
        let mut role = HashSet::new();
        for name in x_names.iter().chain(&b_names) {
            if !role.insert(name.as_str()) {
                return Err(Error::InvalidData(format!(
                    "covariate `{name}` listed more than once across x/b names"
                )));
            }
            if !seen.contains(name.as_str()) {
                return Err(Error::InvalidData(format!("covariate `{name}` has no column")));
            }
        }
        let params = x_names.len() + b_names.len() + 1;
        if n < params {
            return Err(Error::InvalidData(format!(
                "{n} rows cannot support {params} parameters"
            )));
        }
        if outcome.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("outcome".into()));
        }
        Ok(Self {
            outcome,
            covariates,
            names,
            x_names,
            b_names,
        })
    }

    pub fn n(&self) -> usize {
        self.outcome.len()
    }

    /// Number of fitted parameters including the intercept.
    pub fn n_params(&self) -> usize {
        1 + self.x_names.len() + self.b_names.len()
    }

    /// Coefficient labels in design order.
    pub fn coefficient_names(&self) -> Vec<String> {
        std::iter::once("(Intercept)".to_string())
            .chain(self.x_names.iter().cloned())
            .chain(self.b_names.iter().cloned())
            .collect()
    }

    fn column(&self, name: &str) -> usize {
        self.names.iter().position(|n| n == name).expect("validated name")
    }

    /// Check that a binary outcome is 0/1 and contains both classes.
    pub fn check_binary(&self) -> Result<()> {
        let mut zeros = 0usize;
        let mut ones = 0usize;
        for &y in self.outcome.iter() {
            if y == 0.0 {
                zeros += 1;
            } else if y == 1.0 {
                ones += 1;
            } else {
                return Err(Error::InvalidData(format!(
                    "logit link needs a 0/1 outcome, found {y}"
                )));
            }
        }
        if zeros == 0 || ones == 0 {
            return Err(Error::InvalidData(
                "binary outcome must contain both classes".into(),
            ));
        }
        Ok(())
    }

    /// Load a comma-separated file with a header row. Every column that is
    /// neither the outcome nor listed in `b_names` becomes a standard covariate.
    pub fn from_csv(path: &Path, outcome: &str, b_names: &[String]) -> Result<Self> {
        let display = path.display().to_string();
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(|e| Error::Parse {
                path: display.clone(),
                reason: e.to_string(),
            })?;
        let headers: Vec<String> = reader
            .headers()
            .map_err(|e| Error::Parse {
                path: display.clone(),
                reason: e.to_string(),
            })?
            .iter()
            .map(str::to_string)
            .collect();
        let y_col = headers.iter().position(|h| h == outcome).ok_or_else(|| Error::Parse {
            path: display.clone(),
            reason: format!("outcome column `{outcome}` not found"),
        })?;
        for b in b_names {
            if !headers.contains(b) {
                return Err(Error::Parse {
                    path: display.clone(),
                    reason: format!("b column `{b}` not found"),
                });
            }
        }
        let names: Vec<String> = headers
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != y_col)
            .map(|(_, h)| h.clone())
            .collect();
        let x_names: Vec<String> = names
            .iter()
            .filter(|h| !b_names.contains(h))
            .cloned()
            .collect();

        let mut y = Vec::new();
        let mut values = Vec::new();
        for (line, record) in reader.records().enumerate() {
            let record = record.map_err(|e| Error::Parse {
                path: display.clone(),
                reason: e.to_string(),
            })?;
            for (i, field) in record.iter().enumerate() {
                let v: f64 = field.parse().map_err(|_| Error::Parse {
                    path: display.clone(),
                    reason: format!("row {}: `{field}` is not a number", line + 2),
                })?;
                if !v.is_finite() {
                    return Err(Error::Parse {
                        path: display.clone(),
                        reason: format!("row {}: non-finite value", line + 2),
                    });
                }
                if i == y_col {
                    y.push(v);
                } else {
                    values.push(v);
                }
            }
        }
        let n = y.len();
        let covariates = DMatrix::from_row_slice(n, names.len(), &values);
        Dataset::new(DVector::from_vec(y), covariates, names, x_names, b_names.to_vec())
    }

    /// Write the outcome (as column `outcome`) followed by every covariate.
    pub fn write_csv(&self, path: &Path, outcome: &str) -> Result<()> {
        let err = |e: csv::Error| Error::Parse {
            path: path.display().to_string(),
            reason: e.to_string(),
        };
        let mut w = csv::Writer::from_path(path).map_err(err)?;
        let mut header = vec![outcome.to_string()];
        header.extend(self.names.iter().cloned());
        w.write_record(&header).map_err(err)?;
        for i in 0..self.n() {
            let mut record = vec![self.outcome[i].to_string()];
            record.extend(self.covariates.row(i).iter().map(|v| v.to_string()));
            w.write_record(&record).map_err(err)?;
        }
        w.flush().map_err(|e| Error::Io {
            path: path.display().to_string(),
            source: e,
        })
    }
}

/// Full target design: intercept column, then `x_names`, then `b_names`.
pub fn build_design(dataset: &Dataset) -> Result<DMatrix<f64>> {
    let mut seen = HashSet::new();
    for name in &dataset.names {
        if !seen.insert(name.as_str()) {
            return Err(Error::InvalidData(format!("duplicate column name `{name}`")));
        }
    }
    let n = dataset.n();
    let cols: Vec<usize> = dataset
        .x_names
        .iter()
        .chain(&dataset.b_names)
        .map(|name| dataset.column(name))
        .collect();
    let mut design = DMatrix::zeros(n, cols.len() + 1);
    design.column_mut(0).fill(1.0);
    for (j, &c) in cols.iter().enumerate() {
        design.column_mut(j + 1).copy_from(&dataset.covariates.column(c));
    }
    if design.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("design matrix".into()));
    }
    Ok(design)
}

/// Unit conversion for one external covariate: the external model's covariate
/// equals `scale * internal - offset`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Recenter {
    pub offset: f64,
    pub scale: f64,
}

/// A published regression model for the same outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExternalModelSpec {
    pub name: String,
    pub link: Link,
    pub covariates: Vec<String>,
    /// Intercept first, then one slope per covariate.
    pub coefficients: Vec<f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub recenter: BTreeMap<String, Recenter>,
}

impl ExternalModelSpec {
    pub fn new(name: impl Into<String>, link: Link, covariates: Vec<String>, coefficients: Vec<f64>) -> Self {
        Self {
            name: name.into(),
            link,
            covariates,
            coefficients,
            recenter: BTreeMap::new(),
        }
    }

    fn invalid(&self, reason: impl Into<String>) -> Error {
        Error::InvalidSpec {
            model: self.name.clone(),
            reason: reason.into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.coefficients.len() != self.covariates.len() + 1 {
            return Err(self.invalid(format!(
                "coefficients has {} entries, expected {} (intercept + covariates)",
                self.coefficients.len(),
                self.covariates.len() + 1
            )));
        }
        let mut seen = HashSet::new();
        for c in &self.covariates {
            if !seen.insert(c) {
                return Err(self.invalid(format!("covariate `{c}` listed twice")));
            }
        }
        if self.coefficients.iter().any(|c| !c.is_finite()) {
            return Err(self.invalid("coefficients must be finite"));
        }
        for (key, r) in &self.recenter {
            if !self.covariates.contains(key) {
                return Err(self.invalid(format!("recenter key `{key}` is not a covariate")));
            }
            if r.scale == 0.0 || !r.scale.is_finite() || !r.offset.is_finite() {
                return Err(self.invalid(format!("recenter entry for `{key}` needs a finite nonzero scale")));
            }
        }
        Ok(())
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.display().to_string(),
            source,
        })?;
        let spec: Self = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        spec.validate()?;
        Ok(spec)
    }

    /// Linear predictor of the external model at covariate values given in
    /// the external model's own units.
    pub fn linear_predictor(&self, values: &[f64]) -> f64 {
        self.coefficients[0]
            + self.coefficients[1..]
                .iter()
                .zip(values)
                .map(|(b, x)| b * x)
                .sum::<f64>()
    }
}

/// Fold the recenter map into the coefficients so the model can be evaluated
/// directly on covariates in internal units.
pub fn recenter_external(spec: &ExternalModelSpec) -> Result<ExternalModelSpec> {
    spec.validate()?;
    let mut out = spec.clone();
    for (key, r) in &spec.recenter {
        let j = spec.covariates.iter().position(|c| c == key).expect("validated key") + 1;
        let slope = spec.coefficients[j];
        out.coefficients[j] = slope * r.scale;
        out.coefficients[0] -= slope * r.offset;
    }
    out.recenter.clear();
    Ok(out)
}

/// Positions of each external model's intercept and covariates inside the
/// full target design.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexMap {
    pub positions: Vec<Vec<usize>>,
}

impl IndexMap {
    pub fn for_model(&self, k: usize) -> &[usize] {
        &self.positions[k]
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

pub fn map_indices(specs: &[ExternalModelSpec], dataset: &Dataset) -> Result<IndexMap> {
    let mut positions = Vec::with_capacity(specs.len());
    for spec in specs {
        spec.validate()?;
        let mut pos = vec![0];
        let mut missing = Vec::new();
        for c in &spec.covariates {
            if dataset.b_names.contains(c) {
                return Err(Error::InvalidSpec {
                    model: spec.name.clone(),
                    reason: format!("`{c}` is an internal-only (B) covariate"),
                });
            }
            match dataset.x_names.iter().position(|x| x == c) {
                Some(i) => pos.push(i + 1),
                None => missing.push(c.clone()),
            }
        }
        if !missing.is_empty() {
            return Err(Error::UnknownCovariates {
                model: spec.name.clone(),
                missing,
            });
        }
        positions.push(pos);
    }
    Ok(IndexMap { positions })
}
