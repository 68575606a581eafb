use evroute_nn::NnError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("unknown vehicle id {id} (vocabulary size {vocab})")]
    UnknownVehicle { id: usize, vocab: usize },

    #[error("validation: {0}")]
    Validation(String),

    #[error("route has {len} segments, limit is {max}")]
    Length { len: usize, max: usize },

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("{what} version `{found}` is not supported (expected `{expected}`)")]
    Version { what: &'static str, found: String, expected: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("degenerate fit: {0}")]
    DegenerateFit(String),

    #[error("schema fingerprint mismatch: model trained on {model}, data uses {data}")]
    SchemaMismatch { model: String, data: String },

    #[error("training diverged at epoch {epoch}: {source}")]
    Diverged {
        epoch: usize,
        #[source]
        source: NnError,
    },

    #[error("no evaluable pairs: all {skipped} actuals are at or below {threshold} Wh")]
    EmptyEvaluation { skipped: usize, threshold: f64 },

    #[error("reference model `ffn` is required for bps deltas but was not supplied")]
    ReferenceMissing,

    #[error("domain error: {0}")]
    Domain(String),

    #[error("unknown model `{name}`; valid names are: {valid}")]
    UnknownModel { name: String, valid: String },

    #[error(transparent)]
    Nn(#[from] NnError),
}

impl CoreError {
    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        Self::Io { path: path.display().to_string(), source }
    }
}

pub type Result<T> = std::result::Result<T, CoreError>;
