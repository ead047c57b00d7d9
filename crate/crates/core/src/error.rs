use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("predict on stopped process")]
    TerminalBelief,

    #[error("non-finite observation {0}")]
    NonFiniteObservation(f64),

    #[error("no scalar sufficient statistic: sigma0 = {sigma0} differs from sigma1 = {sigma1}")]
    NoScalarStatistic { sigma0: f64, sigma1: f64 },

    #[error("awake count {m} exceeds sensor count {n}")]
    AwakeCountOutOfRange { m: usize, n: usize },

    #[error("empty q grid")]
    EmptyQGrid,

    #[error("value iteration did not converge in {iterations} sweeps (last sup-norm delta {last_delta:e})")]
    NotConverged { iterations: usize, last_delta: f64 },

    #[error("degenerate instance: {0}")]
    DegenerateInstance(String),

    #[error("belief {pi} is in the stopping region (threshold {gamma})")]
    InStoppingRegion { pi: f64, gamma: f64 },

    #[error(
        "calibration bracket [{lo}, {hi}] does not contain the target false-alarm rate {target}"
    )]
    BracketNotFound { lo: f64, hi: f64, target: f64 },

    #[error(
        "calibration stopped after {steps} bisection steps with P_FA {p_fa} (target {target})"
    )]
    CalibrationNotConverged {
        steps: usize,
        p_fa: f64,
        target: f64,
    },

    #[error("enumeration bound exceeded: {0}")]
    EnumerationTooLarge(String),
}

pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidParameter {
        name,
        reason: reason.into(),
    }
}
