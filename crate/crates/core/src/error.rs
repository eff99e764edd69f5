use thiserror::Error;

/// Errors produced anywhere in the pipeline.
///
/// Variants split into two families: input problems (bad data, bad
/// parameters) and numerical failures (non-convergence, infeasibility).
/// [`Error::is_numerical`] tells them apart for exit-code mapping.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("no observer of this type (type index {type_index}) in class school={school_id} cohort={cohort_id}")]
    NoObserver {
        type_index: usize,
        school_id: u32,
        cohort_id: u32,
    },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error(
        "equilibrium did not converge in class school={school_id} cohort={cohort_id} \
         after {iterations} iterations (residual {residual:.3e})"
    )]
    EquilibriumNotConverged {
        school_id: u32,
        cohort_id: u32,
        iterations: usize,
        residual: f64,
        last_iterate: Vec<f64>,
    },

    #[error("perfect separation: coefficient `{coefficient}` diverges")]
    Separation { coefficient: String },

    #[error("optimizer did not converge after {iterations} iterations (gradient norm {gradient_norm:.3e})")]
    OptimizerNotConverged {
        iterations: usize,
        gradient_norm: f64,
    },

    #[error("singular Hessian (condition number {condition_number:.3e})")]
    SingularHessian { condition_number: f64 },

    #[error("entropy index undefined: state population is monoracial")]
    EntropyUndefined,

    #[error("target entropy {target} infeasible; attainable range [{min}, {max}]")]
    Infeasible { target: f64, min: f64, max: f64 },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures of a numerical procedure rather than of the input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::EquilibriumNotConverged { .. }
                | Error::Separation { .. }
                | Error::OptimizerNotConverged { .. }
                | Error::SingularHessian { .. }
                | Error::Infeasible { .. }
                | Error::EntropyUndefined
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
