//! Crate-wide error type.

use thiserror::Error;

/// A single validation failure, addressed by the offending field.
#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    /// Path into the configuration, e.g. `emitters[1].gamma`.
    pub path: String,
    pub message: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    /// Configuration rejected; carries the complete list of violations,
    /// never just the first one found.
    #[error("invalid configuration:\n{}", format_violations(.0))]
    Validation(Vec<Violation>),

    #[error("probe grid {0}")]
    Grid(String),

    #[error(
        "emitter {0} is prepared unpolarized; a coherent amplitude needs a definite spin state"
    )]
    UnresolvedSpin(usize),

    #[error("emitter index {index} out of range (config has {len} emitters)")]
    EmitterIndex { index: usize, len: usize },

    #[error("emitter {0} is inactive")]
    InactiveEmitter(usize),

    #[error("{0} unpolarized emitters would need {1} conditioned spectra; cap is 4096")]
    MixtureTooLarge(usize, u64),

    #[error("no contributing transitions: every emitter is inactive or masked out")]
    NoTransitions,

    #[error(
        "exchange rate is undefined at zero detuning; diagonalize the effective matrix instead"
    )]
    ZeroDetuning,

    #[error("steady-state linear system is singular at {0}")]
    SingularSystem(String),

    #[error("eigensolver did not converge on matrix {0}")]
    EigenNonConvergence(String),

    #[error("field sweep: {0}")]
    Sweep(String),

    #[error("readout parameters: {0}")]
    Readout(String),

    #[error("fit problem: {0}")]
    FitSetup(String),
}

fn format_violations(violations: &[Violation]) -> String {
    violations
        .iter()
        .map(|v| format!("  - {v}"))
        .collect::<Vec<_>>()
        .join("\n")
}

impl Error {
    /// True for errors produced by input checking rather than numerics.
    pub fn is_validation(&self) -> bool {
        !matches!(
            self,
            Error::SingularSystem(_) | Error::EigenNonConvergence(_)
        )
    }
}
