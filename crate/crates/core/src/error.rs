use alloc::boxed::Box;
use alloc::string::String;
use core::fmt;

pub type Result<T> = core::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Operand shapes are incompatible for the named operation.
    Shape { op: &'static str, detail: String },
    /// A primitive produced NaN or infinity.
    NonFinite { op: &'static str },
    /// Cholesky failed at the given (1-based) leading minor, even after the jitter ladder.
    NotPositiveDefinite { minor: usize },
    /// Gram matrix of an unregularized pseudoinverse is singular.
    RankDeficient,
    /// A length is not a multiple of the patch size.
    Divisibility { len: usize, patch: usize },
    /// Iterative recursion blew up at a step.
    Instability { stage: &'static str, step: usize },
    InvalidArgument(String),
    Backward(String),
    /// Error raised inside a named pipeline stage.
    Stage { stage: &'static str, source: Box<Error> },
    /// Error raised at one step of a sequential recursion.
    AtStep { stage: &'static str, step: usize, source: Box<Error> },
}

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage { stage, source: Box::new(self) }
    }

    pub fn at_step(self, stage: &'static str, step: usize) -> Self {
        match self {
            e @ Error::Instability { .. } => e,
            e => Error::AtStep { stage, step, source: Box::new(e) },
        }
    }

    /// Innermost error, skipping stage annotations.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } | Error::AtStep { source, .. } => source.root(),
            e => e,
        }
    }

    /// True for errors caused by numerical breakdown rather than bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self.root(),
            Error::NonFinite { .. }
                | Error::NotPositiveDefinite { .. }
                | Error::RankDeficient
                | Error::Instability { .. }
        )
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape { op, detail } => write!(f, "{op}: dimension mismatch: {detail}"),
            Error::NonFinite { op } => write!(f, "numerical instability: {op} produced a non-finite value"),
            Error::NotPositiveDefinite { minor } => {
                write!(f, "matrix is not positive definite (leading minor {minor} failed)")
            }
            Error::RankDeficient => write!(
                f,
                "pseudoinverse Gram matrix is singular; use a positive ridge lambda"
            ),
            Error::Divisibility { len, patch } => {
                write!(f, "length {len} is not divisible by patch size {patch}")
            }
            Error::Instability { stage, step } => {
                write!(f, "numerical instability in {stage} at step {step}")
            }
            Error::InvalidArgument(msg) => write!(f, "invalid argument: {msg}"),
            Error::Backward(msg) => write!(f, "backward: {msg}"),
            Error::Stage { stage, source } => write!(f, "{stage}: {source}"),
            Error::AtStep { stage, step, source } => write!(f, "{stage} step {step}: {source}"),
        }
    }
}

impl core::error::Error for Error {}
