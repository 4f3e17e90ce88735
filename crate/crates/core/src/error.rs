use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("singular impedance: {0}")]
    SingularImpedance(String),

    #[error("integration blowup: rotor speed {omega} rad/s is not positive (reduce dt)")]
    IntegrationBlowup { omega: f64 },

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("training diverged: {0}")]
    TrainingDivergence(String),

    #[error("episode aborted at step {step}: {cause}")]
    EpisodeAborted { step: usize, cause: Box<Error> },

    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
