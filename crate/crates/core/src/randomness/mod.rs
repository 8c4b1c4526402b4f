//! Reproducible random streams, Poisson clocks and lattice jump laws.

mod clock;
mod jump_law;
mod stream;

pub use clock::{required_iterations, Clock};
pub use jump_law::{
    build_jump_law, AliasTable, JumpLaw, JumpLawKind, DEFAULT_ATOM_BUDGET,
    DEFAULT_NORMALIZATION_TOLERANCE,
};
pub use stream::{derive_stream, exponential_from_uniform, Label, RngStream};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum RandomnessError {
    #[error("stream labels must be nonempty")]
    EmptyLabels,
    #[error("stability index {0} outside (0, 2]")]
    InvalidAlpha(f64),
    #[error("dimension must be at least 1, got {0}")]
    InvalidDimension(usize),
    #[error("cutoff {cutoff} must be at least 1")]
    CutoffTooSmall { cutoff: f64 },
    #[error("normaliser accuracy {achieved:.3e} exceeds tolerance {tolerance:.1e}; raise the cutoff")]
    NormalizationUnreachable { achieved: f64, tolerance: f64 },
    #[error("malformed jump table: {0}")]
    MalformedTable(String),
}
