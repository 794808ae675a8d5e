use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected} values, got {got}")]
    Shape { expected: usize, got: usize },

    #[error("site {site} out of range (lattice has {sites} sites)")]
    SiteOutOfRange { site: usize, sites: usize },

    #[error("no bond from site {site} in direction {direction}")]
    MissingBond { site: usize, direction: usize },

    #[error("plane {plane} out of range (valid planes 0..{planes})")]
    PlaneOutOfRange { plane: usize, planes: usize },

    #[error("operation requires the {expected} reservoir variant")]
    WrongVariant { expected: &'static str },

    #[error("invalid parameter `{field}`: {reason}")]
    InvalidParameter { field: String, reason: String },

    #[error("potential `{0}` is not confining and the configuration space is not compact")]
    NonConfining(String),

    #[error("linear model requires quadratic potentials, found {0}")]
    NotQuadratic(String),

    #[error("drift matrix is not Hurwitz (max real part of spectrum {max_real:e})")]
    NotHurwitz { max_real: f64 },

    #[error("Lyapunov solve is ill-conditioned (relative residual {residual:e})")]
    IllConditioned { residual: f64 },

    #[error("non-finite state at step {step} (t = {time})")]
    BlowUp { step: u64, time: f64 },

    #[error("isokinetic constraint singular on the {side} side (zero kinetic energy)")]
    SingularConstraint { side: &'static str },

    #[error("no convergence after {iterations} iterations (residual {residual:e})")]
    NotConverged { iterations: usize, residual: f64 },

    #[error("series of length {len} is too short for {blocks} blocks")]
    SeriesTooShort { len: usize, blocks: usize },

    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            field: field.into(),
            reason: reason.into(),
        }
    }

    /// True for failures caused by the numerics rather than by the input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NotHurwitz { .. }
                | Error::IllConditioned { .. }
                | Error::BlowUp { .. }
                | Error::SingularConstraint { .. }
                | Error::NotConverged { .. }
        )
    }
}
