use thiserror::Error;

/// Errors raised by model fitting, integration and simulation.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid dataset: {0}")]
    InvalidData(String),
    #[error("invalid external model `{model}`: {reason}")]
    InvalidSpec { model: String, reason: String },
    #[error("external model `{model}` references covariates absent from the internal data: {missing:?}")]
    UnknownCovariates { model: String, missing: Vec<String> },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("design matrix is rank deficient (rank {rank} < {cols} columns)")]
    RankDeficient { rank: usize, cols: usize },
    #[error("complete or quasi-complete separation: coefficient norm exceeded {cap}")]
    Separation { cap: f64 },
    #[error("{what} did not converge within {iterations} iterations")]
    NoConvergence { what: String, iterations: usize },
    #[error("constraint for external model `{model}` is infeasible: the origin is outside the convex hull of the conditional scores")]
    InfeasibleConstraint { model: String },
    #[error("matrix is singular or not positive definite: {0}")]
    Singular(String),
    #[error("unsupported link pairing: internal {internal}, external {external}")]
    UnsupportedLinks { internal: String, external: String },
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error in {path}: {reason}")]
    Parse { path: String, reason: String },
    #[error("external model `{model}`: {source}")]
    Model {
        model: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    /// True for failures of the numerical machinery, as opposed to bad input.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::RankDeficient { .. }
            | Error::Separation { .. }
            | Error::NoConvergence { .. }
            | Error::InfeasibleConstraint { .. }
            | Error::Singular(_)
            | Error::NonFinite(_) => true,
            Error::Model { source, .. } => source.is_numerical(),
            _ => false,
        }
    }

    pub(crate) fn in_model(self, model: &str) -> Error {
        match self {
            e @ (Error::InvalidSpec { .. }
            | Error::UnknownCovariates { .. }
            | Error::InfeasibleConstraint { .. }
            | Error::Model { .. }) => e,
            e => Error::Model {
                model: model.to_string(),
                source: Box::new(e),
            },
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
