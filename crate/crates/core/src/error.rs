use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Operand shapes are incompatible.
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// Mathematically undefined request (empty reduction, B=1 batchnorm, ...).
    Domain(String),
    /// Class label or index outside its range.
    Index(String),
    /// Caller broke an API contract (non-scalar loss, missing gradient, ...).
    Contract(String),
    /// A NaN or infinity was produced.
    NonFinite(String),
    /// BMO landmarks missing or degenerate.
    Landmark(String),
    /// Input data unusable (too few points, empty sets, ...).
    Data(String),
    /// Invalid configuration or phantom specification.
    Spec(String),
    /// No grouped, stratified split satisfies the constraints.
    Split(String),
    /// Metric undefined for the given labels.
    Metric(String),
    /// Too few samples to estimate a measurement.
    Coverage(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Dimension { op, lhs, rhs } => {
                write!(f, "dimension error in {op}: {lhs:?} vs {rhs:?}")
            }
            Error::Domain(m) => write!(f, "domain error: {m}"),
            Error::Index(m) => write!(f, "index error: {m}"),
            Error::Contract(m) => write!(f, "contract error: {m}"),
            Error::NonFinite(m) => write!(f, "non-finite value: {m}"),
            Error::Landmark(m) => write!(f, "landmark error: {m}"),
            Error::Data(m) => write!(f, "data error: {m}"),
            Error::Spec(m) => write!(f, "spec error: {m}"),
            Error::Split(m) => write!(f, "split error: {m}"),
            Error::Metric(m) => write!(f, "metric error: {m}"),
            Error::Coverage(m) => write!(f, "coverage error: {m}"),
        }
    }
}

impl core::error::Error for Error {}
