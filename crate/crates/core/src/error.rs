use thiserror::Error;

/// Errors raised anywhere in the engine.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum GlmmError {
    #[error("syntax error at position {pos}: {msg}")]
    Syntax { pos: usize, msg: String },

    #[error("invalid level count {count} for factor `{name}`")]
    InvalidLevelCount { name: String, count: i64 },

    #[error("design has {rows} rows which exceeds the cap of {cap}")]
    RowCapExceeded { rows: u128, cap: u64 },

    #[error("unknown covariance function `{0}`")]
    UnknownFunction(String),

    #[error("malformed term: {0}")]
    MalformedTerm(String),

    #[error("unidentifiable product `{0}`: more than one function carries a free scale parameter")]
    Unidentifiable(String),

    #[error("variable `{0}` not found in data")]
    MissingVariable(String),

    #[error("variable `{var}` is non-numeric and cannot be used by `{function}`")]
    NonNumericVariable { var: String, function: String },

    #[error("`{function}` is only valid in up to {max} dimension(s), got {got}")]
    DimensionLimit {
        function: String,
        max: usize,
        got: usize,
    },

    #[error("parameter {index} = {value} outside admissible range for `{function}`: {range}")]
    ParameterRange {
        index: usize,
        value: f64,
        function: String,
        range: String,
    },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("matrix not positive definite in block {block}: pivot {pivot:e}")]
    NotPositiveDefinite { block: usize, pivot: f64 },

    #[error("singular matrix: {msg}; candidate columns {columns:?}")]
    Singular { msg: String, columns: Vec<usize> },

    #[error("degenerate factor `{0}`: a single level leaves no columns once the intercept is in the model")]
    DegenerateFactor(String),

    #[error("invalid family/link combination {family}/{link}")]
    InvalidLink { family: String, link: String },

    #[error("mean {mu} outside the support of the {family} family")]
    MeanOutOfSupport { family: String, mu: f64 },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("optimizer failure: {0}")]
    Optimizer(String),

    #[error("sampler failure: {0}")]
    Sampler(String),

    #[error("importance sampling effective sample size {ess:.2} below {min}")]
    LowEffectiveSampleSize { ess: f64, min: f64 },

    #[error("non positive-definite Hessian, eigenvalues {0:?}")]
    HessianNotPd(Vec<f64>),

    #[error("degenerate design: {msg}; columns that may cause the failure {columns:?}")]
    DegenerateDesign { msg: String, columns: Vec<usize> },

    #[error("apportionment: {0}")]
    Apportion(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T> = std::result::Result<T, GlmmError>;
