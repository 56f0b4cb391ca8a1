use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors raised across the toolkit.
///
/// Each variant maps onto one of the CLI exit-status classes via
/// [`Error::exit_code`].
#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("input path not found: {0}")]
    MissingPath(PathBuf),

    #[error("corrupt header: {0}")]
    CorruptHeader(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("truncated payload: {0}")]
    TruncatedPayload(String),

    #[error("invariant violation in example `{example_id}`{}: {reason}", layer_suffix(*.layer_index))]
    InvariantViolation {
        example_id: String,
        layer_index: Option<usize>,
        reason: String,
    },

    #[error("layer mismatch: {0}")]
    LayerMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("training diverged at epoch {epoch} (loss = {loss})")]
    Divergence { epoch: usize, loss: f64 },

    #[error("singular linear system despite damping (condition estimate {condition:.3e})")]
    SingularSystem { condition: f64 },

    #[error("estimator `{0}` needs a Hessian but none was supplied")]
    MissingHessian(&'static str),

    #[error("estimator `{0}` needs the training manifest or a cached surrogate")]
    MissingTrainManifest(&'static str),

    #[error("no feasible k under a budget of {budget} bytes")]
    NoFeasibleK { budget: u64 },

    #[error("records are not ranked: {0}")]
    UnrankedInput(String),

    #[error("stale cache: cache model_tag `{cache_tag}` does not match test model_tag `{test_tag}`")]
    StaleCache { cache_tag: String, test_tag: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

fn layer_suffix(layer: Option<usize>) -> String {
    match layer {
        Some(l) => format!(" (layer {l})"),
        None => String::new(),
    }
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::MissingPath(path)
        } else {
            Error::Io { path, source }
        }
    }

    /// Exit status used by the CLI: 2 config/validation, 3 data format,
    /// 4 numerical, 1 anything else (plain IO).
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::MissingPath(_)
            | Error::InvalidArgument(_)
            | Error::EmptyInput(_)
            | Error::MissingHessian(_)
            | Error::MissingTrainManifest(_)
            | Error::NoFeasibleK { .. }
            | Error::StaleCache { .. }
            | Error::Config(_) => 2,
            Error::CorruptHeader(_)
            | Error::DimensionMismatch(_)
            | Error::TruncatedPayload(_)
            | Error::InvariantViolation { .. }
            | Error::LayerMismatch(_)
            | Error::UnrankedInput(_)
            | Error::Json(_)
            | Error::Csv(_) => 3,
            Error::NonFinite(_) | Error::Divergence { .. } | Error::SingularSystem { .. } => 4,
            Error::Io { .. } => 1,
        }
    }

    /// Stable machine-readable name of the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::MissingPath(_) => "missing_path",
            Error::CorruptHeader(_) => "corrupt_header",
            Error::DimensionMismatch(_) => "dimension_mismatch",
            Error::TruncatedPayload(_) => "truncated_payload",
            Error::InvariantViolation { .. } => "invariant_violation",
            Error::LayerMismatch(_) => "layer_mismatch",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::EmptyInput(_) => "empty_input",
            Error::NonFinite(_) => "non_finite",
            Error::Divergence { .. } => "divergence",
            Error::SingularSystem { .. } => "singular_system",
            Error::MissingHessian(_) => "missing_hessian",
            Error::MissingTrainManifest(_) => "missing_train_manifest",
            Error::NoFeasibleK { .. } => "no_feasible_k",
            Error::UnrankedInput(_) => "unranked_input",
            Error::StaleCache { .. } => "stale_cache",
            Error::Config(_) => "config",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }
}
